"""Dynamic tone mapper: radiance bank, recurrent context learner and per-channel tone curves.

HDR colors are tone-mapped per channel by a small MLP that sees the log of the
exposed radiance together with a context vector ``f_t``.  ``f_t`` is the final
hidden state of a recurrent cell run over the last ``k + 1`` radiance signatures
(mean HDR color of the scene at each training timestamp) stored in the bank.

Gradients for the tone parameters come from :mod:`hdr4dgs.tape`; the bank is
statistics only and never carries a gradient path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape as tp
from .errors import ColdBank, ContractViolation, EmptyScene, InvalidExposure
from .scene import FOURIER_PERIOD, Gaussian4DCloud, colors_at

LOG_EPS = 1e-6
CANONICAL_VIEW = np.array([0.0, 0.0, 1.0])
CELL_KINDS = ("gru", "rnn")
_GRU_NAMES = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")
_RNN_NAMES = ("Wx", "Uh", "b")
_CURVE_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass
class RadianceBank:
    entries: np.ndarray
    times: np.ndarray
    written: np.ndarray
    momentum: float = 0.9

    @classmethod
    def create(cls, times, momentum: float = 0.9) -> "RadianceBank":
        times = np.asarray(times, dtype=np.float64)
        return cls(np.zeros((len(times), 3)), times, np.zeros(len(times), dtype=bool), momentum)

    def __len__(self):
        return len(self.times)

    def nearest_index(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))

    def window(self, t_index: int, k: int) -> np.ndarray:
        """Signatures ``r_{t-k..t}`` in chronological order; early slots repeat entry 0."""
        if not 0 <= t_index < len(self):
            raise ContractViolation(f"bank index {t_index} out of range [0, {len(self)})")
        idx = np.clip(np.arange(t_index - k, t_index + 1), 0, None)
        if not np.all(self.written[idx]):
            raise ColdBank(f"bank entries {sorted(set(idx[~self.written[idx]].tolist()))} were never written")
        return self.entries[idx].copy()

    def copy(self) -> "RadianceBank":
        return RadianceBank(self.entries.copy(), self.times.copy(), self.written.copy(), self.momentum)


def bank_update(bank: RadianceBank, t_index: int, signature) -> RadianceBank:
    """EMA update of one entry in place; a never-written entry takes the signature as is."""
    if not 0 <= t_index < len(bank):
        raise ContractViolation(f"bank index {t_index} out of range [0, {len(bank)})")
    sig = np.asarray(signature, dtype=np.float64)
    if bank.written[t_index]:
        m = bank.momentum
        bank.entries[t_index] = m * bank.entries[t_index] + (1.0 - m) * sig
    else:
        bank.entries[t_index] = sig
        bank.written[t_index] = True
    return bank


def radiance_signature(cloud: Gaussian4DCloud, t: float, period: float = FOURIER_PERIOD) -> np.ndarray:
    if cloud.n == 0:
        raise EmptyScene("radiance signature of an empty cloud")
    return colors_at(cloud, t, CANONICAL_VIEW, period).mean(axis=0)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class DRCLWeights:
    kind: str
    hidden: int
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, kind: str, hidden: int, rng: np.random.Generator, input_size: int = 3) -> "DRCLWeights":
        if kind not in CELL_KINDS:
            raise ContractViolation(f"unknown cell kind {kind!r}; expected one of {CELL_KINDS}")
        bound = 1.0 / np.sqrt(hidden)
        names = _GRU_NAMES if kind == "gru" else _RNN_NAMES
        params = {}
        for name in names:
            if name.startswith("W"):
                shape = (input_size, hidden)
            elif name.startswith("U"):
                shape = (hidden, hidden)
            else:
                shape = (hidden,)
            params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(kind, hidden, params)

    @classmethod
    def zeros(cls, kind: str, hidden: int, input_size: int = 3) -> "DRCLWeights":
        w = cls.init(kind, hidden, np.random.default_rng(0), input_size)
        w.params = {k: np.zeros_like(v) for k, v in w.params.items()}
        return w


@dataclass
class ToneCurves:
    params: dict

    @property
    def context_dim(self) -> int:
        return self.params["W1"].shape[1] - 1

    @property
    def width(self) -> int:
        return self.params["W1"].shape[2]

    @classmethod
    def init(cls, context_dim: int, rng: np.random.Generator, width: int = 64, monotone: bool = True) -> "ToneCurves":
        """Per-channel MLPs (1 + d) -> width -> width -> 1.

        With ``monotone`` every weight downstream of the log-radiance input is
        non-negative and the first-layer hinges are spread over log exposures in
        [-16, 10], so each curve starts non-decreasing and smooth over the whole
        range.  The output layer is then rescaled so that at zero context the curve
        passes through 0.5 at log exposure 0 and about 0.018 at log exposure -6.
        """
        d_in = 1 + context_dim

        def layer(fan_in, fan_out, positive):
            bound = np.sqrt(1.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(3, fan_in, fan_out))
            return np.abs(w) if positive else w

        w1 = layer(d_in, width, False)
        b1 = rng.uniform(-1.0, 1.0, size=(3, 1, width))
        if monotone:
            w1[:, 0, :] = rng.uniform(0.5, 1.5, size=(3, width)) / 8.0
            hinges = rng.uniform(-16.0, 10.0, size=(3, width))
            b1 = (-w1[:, 0, :] * hinges)[:, None, :]
        params = {
            "W1": w1,
            "b1": b1,
            "W2": layer(width, width, monotone),
            "b2": np.zeros((3, 1, width)),
            "W3": layer(width, 1, monotone),
            "b3": np.zeros((3, 1, 1)),
        }
        if monotone:
            probe = np.array([0.0, -6.0])
            x = np.broadcast_to(probe[None, :, None], (3, 2, 1))
            z = _curves_logit(params, x, np.zeros(context_dim))[:, :, 0]
            scale = 4.0 / np.maximum(z[:, 0] - z[:, 1], 1e-12)
            params["W3"] = params["W3"] * scale[:, None, None]
            params["b3"] = (-scale * z[:, 0]).reshape(3, 1, 1)
        return cls(params)

    @classmethod
    def zeros(cls, context_dim: int, width: int = 64) -> "ToneCurves":
        curves = cls.init(context_dim, np.random.default_rng(0), width, monotone=False)
        curves.params = {k: np.zeros_like(v) for k, v in curves.params.items()}
        return curves


@dataclass
class ToneMapperState:
    bank: RadianceBank
    drcl: DRCLWeights
    curves: ToneCurves
    window: int = 20

    def __post_init__(self):
        if self.window < 0:
            raise ContractViolation("window k must be non-negative")
        if self.curves.context_dim != self.drcl.hidden:
            raise ContractViolation("tone-curve context size does not match DRCL hidden size")

    @classmethod
    def create(
        cls,
        times,
        rng: np.random.Generator,
        kind: str = "gru",
        context_dim: int = 2,
        window: int = 20,
        width: int = 64,
        momentum: float = 0.9,
    ) -> "ToneMapperState":
        return cls(
            bank=RadianceBank.create(times, momentum),
            drcl=DRCLWeights.init(kind, context_dim, rng),
            curves=ToneCurves.init(context_dim, rng, width),
            window=window,
        )

    def params(self) -> dict[str, np.ndarray]:
        out = {f"drcl.{k}": v for k, v in self.drcl.params.items()}
        out.update({f"curves.{k}": v for k, v in self.curves.params.items()})
        return out

    def set_param(self, name: str, value):
        group, key = name.split(".", 1)
        target = self.drcl.params if group == "drcl" else self.curves.params
        target[key] = value

    def copy(self) -> "ToneMapperState":
        return ToneMapperState(
            bank=self.bank.copy(),
            drcl=DRCLWeights(self.drcl.kind, self.drcl.hidden, {k: v.copy() for k, v in self.drcl.params.items()}),
            curves=ToneCurves({k: v.copy() for k, v in self.curves.params.items()}),
            window=self.window,
        )


# ---------------------------------------------------------------------------
# graph builders


def drcl_graph(kind: str, w: dict, window: np.ndarray, h0) -> tp.Var:
    """Run the cell over the window rows (oldest first); returns the final (1, d) state."""
    h = h0
    for x in window:
        x = x[None, :]
        if kind == "gru":
            z = tp.sigmoid(x @ w["Wz"] + h @ w["Uz"] + w["bz"])
            r = tp.sigmoid(x @ w["Wr"] + h @ w["Ur"] + w["br"])
            cand = tp.tanh(x @ w["Wh"] + (r * h) @ w["Uh"] + w["bh"])
            h = h + z * (cand - h)
        else:
            h = tp.tanh(x @ w["Wx"] + h @ w["Uh"] + w["b"])
    return h


def curves_graph(c: dict, log_input: tp.Var, f: tp.Var) -> tp.Var:
    """``log_input`` (3, P, 1), ``f`` (1, d) -> tone-mapped values (3, P, 1)."""
    ctx = tp.broadcast_to(tp.reshape(f, (1, 1, f.shape[-1])), log_input.shape[:2] + (f.shape[-1],))
    x = tp.concat([log_input, ctx], axis=-1)
    h = tp.relu(x @ c["W1"] + c["b1"])
    h = tp.relu(h @ c["W2"] + c["b2"])
    return tp.sigmoid(h @ c["W3"] + c["b3"])


def _check_exposure(e_t):
    if not e_t > 0:
        raise InvalidExposure(f"exposure must be positive, got {e_t}")


def tone_graph(c: dict, colors: tp.Var, e_t: float, f: tp.Var) -> tp.Var:
    """(P, 3) HDR colors -> (P, 3) LDR colors."""
    _check_exposure(e_t)
    # log(max(c, eps)) + log(e) taken as one log of the product, so inputs with the
    # same c * e give bit-identical outputs
    logc = tp.log_clamped(colors * float(e_t), LOG_EPS * float(e_t))
    x = tp.reshape(tp.transpose(logc, (1, 0)), (3, colors.shape[0], 1))
    out = curves_graph(c, x, f)
    return tp.transpose(tp.reshape(out, (3, colors.shape[0])), (1, 0))


def _curves_logit(params, log_input, f):
    """Pre-sigmoid output of the curves, plain numpy."""
    x = np.concatenate([log_input, np.broadcast_to(np.reshape(f, (1, 1, -1)),
                                                   log_input.shape[:2] + (np.size(f),))], axis=-1)
    h = np.maximum(x @ params["W1"] + params["b1"], 0.0)
    h = np.maximum(h @ params["W2"] + params["b2"], 0.0)
    return h @ params["W3"] + params["b3"]


# ---------------------------------------------------------------------------
# per-frame context shared by the 3D and 2D tone paths


class ToneContext:
    """One tape holding DRCL and tone-curve parameters for a single frame."""

    def __init__(self, state: ToneMapperState, t_index: int, exposure: float):
        _check_exposure(exposure)
        self.state = state
        self.exposure = float(exposure)
        self.t_index = t_index
        self.tape = tp.Tape()
        self.drcl_vars = {k: self.tape.var(v) for k, v in state.drcl.params.items()}
        self.curve_vars = {k: self.tape.var(v) for k, v in state.curves.params.items()}
        window = state.bank.window(t_index, state.window)
        h0 = np.zeros((1, state.drcl.hidden))
        self.f = drcl_graph(state.drcl.kind, self.drcl_vars, window, h0)

    @property
    def context(self) -> np.ndarray:
        return self.f.value[0].copy()

    def map_colors(self, colors) -> tuple[tp.Var, tp.Var]:
        leaf = self.tape.var(colors)
        return leaf, tone_graph(self.curve_vars, leaf, self.exposure, self.f)

    def map_image(self, image) -> tuple[tp.Var, tp.Var]:
        image = np.asarray(image, dtype=np.float64)
        leaf = self.tape.var(image)
        flat = tp.reshape(leaf, (-1, 3))
        out = tone_graph(self.curve_vars, flat, self.exposure, self.f)
        return leaf, tp.reshape(out, image.shape)

    def param_grads(self, grads: tp.Gradients) -> dict[str, np.ndarray]:
        out = {f"drcl.{k}": grads[v] for k, v in self.drcl_vars.items()}
        out.update({f"curves.{k}": grads[v] for k, v in self.curve_vars.items()})
        return out


# ---------------------------------------------------------------------------
# array-level API


def drcl_forward(drcl: DRCLWeights, window, expected_length: int | None = None) -> np.ndarray:
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2 or window.shape[1] != 3:
        raise ContractViolation(f"window must be (k+1, 3), got {window.shape}")
    if expected_length is not None and window.shape[0] != expected_length:
        raise ContractViolation(f"window length {window.shape[0]} != {expected_length}")
    t = tp.Tape()
    w = {k: t.var(v) for k, v in drcl.params.items()}
    h = drcl_graph(drcl.kind, w, window, np.zeros((1, drcl.hidden)))
    return np.asarray(h.value if isinstance(h, tp.Var) else h)[0]


def tone_map_colors(curves: ToneCurves, c_h, e_t: float, f_t) -> np.ndarray:
    c_h = np.asarray(c_h, dtype=np.float64)
    if c_h.ndim != 2 or c_h.shape[1] != 3:
        raise ContractViolation(f"colors must be (N, 3), got {c_h.shape}")
    t = tp.Tape()
    c = {k: t.var(v) for k, v in curves.params.items()}
    f = t.var(np.asarray(f_t, dtype=np.float64).reshape(1, -1))
    return tone_graph(c, t.var(c_h), e_t, f).value


def tone_map_image(curves: ToneCurves, hdr_image, e_t: float, f_t) -> np.ndarray:
    hdr_image = np.asarray(hdr_image, dtype=np.float64)
    return tone_map_colors(curves, hdr_image.reshape(-1, 3), e_t, f_t).reshape(hdr_image.shape)


def dtm_apply(
    state: ToneMapperState,
    cloud: Gaussian4DCloud,
    t_index: int,
    e_t: float,
    colors=None,
    period: float = FOURIER_PERIOD,
) -> tuple[np.ndarray, np.ndarray]:
    """Tone-map every Gaussian's HDR color at a bank timestamp; returns (c_l, f_t).

    Without explicit ``colors`` the canonical-view 4DSH colors at the bank time are used.
    """
    _check_exposure(e_t)
    window = state.bank.window(t_index, state.window)
    f_t = drcl_forward(state.drcl, window)
    if colors is None:
        colors = colors_at(cloud, float(state.bank.times[t_index]), CANONICAL_VIEW, period)
    return tone_map_colors(state.curves, colors, e_t, f_t), f_t
