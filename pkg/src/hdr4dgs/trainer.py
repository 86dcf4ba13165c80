"""Adam optimization of the 4D Gaussian cloud and tone mapper, evaluation and ablations."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .datagen import FrameRecord, Manifest, load_hdr, load_ldr
from .errors import ContractViolation, NonFiniteGradient
from .losses import LossWeights, capped, mu_law, psnr, ssim, total_loss
from .rasterizer import DEFAULT_SETTINGS, RasterSettings, render_backward, render_frame
from .scene import COLOR_OFFSET, PARAM_GROUPS, PARAM_NAMES, SH_C0, Gaussian4DCloud
from .tonemap import (
    CELL_KINDS,
    DRCLWeights,
    RadianceBank,
    ToneContext,
    ToneCurves,
    ToneMapperState,
    bank_update,
    radiance_signature,
)

log = logging.getLogger(__name__)

LOG_HEADER = ("iter", "loss_total", "loss_ldr", "loss_hdr", "psnr_train")
EVAL_HEADER = ("scene", "frame", "domain", "psnr", "ssim")
SUPERVISION = ("ldr", "ldr+hdr")
ABLATION_AXES = {
    "cell_kind": ("gru", "rnn"),
    "k": (5, 10, 20, 30),
    "pixel_level": (True, False),
    "supervision": ("ldr", "ldr+hdr"),
}


@dataclass
class TrainConfig:
    iterations: int = 5000
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scaling: float = 5e-3
    lr_rotation: float = 1e-3
    lr_tone: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    lambda_dssim: float = 0.2
    alpha_hdr: float = 0.6
    mu: float = 5000.0
    k: int = 20
    context_dim: int = 2
    n_init: int = 2000
    seed: int = 0
    cell_kind: str = "gru"
    pixel_level: bool = True
    supervision: str = "ldr"
    sh_degree: int = 2
    n_fourier: int = 2
    init_opacity: float = 0.1
    init_time_scale: float = 0.1
    init_color_min: float = 0.01
    init_color_max: float = 2.0
    tone_warmup: int = 500
    bank_momentum: float = 0.9
    log_every: int = 50
    checkpoint_every: int = 1000
    dataset: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.iterations < 1:
            raise ContractViolation("iterations must be >= 1")
        rates = [self.lr_position, self.lr_position_final, self.lr_sh, self.lr_opacity,
                 self.lr_scaling, self.lr_rotation, self.lr_tone]
        if min(rates) <= 0:
            raise ContractViolation("learning rates must be positive")
        if self.cell_kind not in CELL_KINDS:
            raise ContractViolation(f"cell_kind must be one of {CELL_KINDS}")
        if self.supervision not in SUPERVISION:
            raise ContractViolation(f"supervision must be one of {SUPERVISION}")
        if self.tone_warmup < 0:
            raise ContractViolation("tone_warmup must be >= 0")
        if self.k < 0 or self.context_dim < 1 or self.n_init < 1:
            raise ContractViolation("k >= 0, context_dim >= 1 and n_init >= 1 required")
        if not 0.0 < self.init_color_min <= self.init_color_max:
            raise ContractViolation("need 0 < init_color_min <= init_color_max")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ContractViolation("log_every and checkpoint_every must be >= 1")
        LossWeights(self.lambda_dssim, self.alpha_hdr, self.mu)

    @property
    def effective_alpha(self) -> float:
        return self.alpha_hdr if self.supervision == "ldr+hdr" else 0.0

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_dssim, self.effective_alpha, self.mu)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(names))
        if unknown:
            raise ContractViolation(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def hash(self) -> str:
        # paths do not change the optimization
        d = {k: v for k, v in self.to_dict().items() if k not in ("dataset", "out_dir")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def load_config_file(path) -> dict:
    """Flat TOML key/value file; a [train] table is also accepted."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as f:
        data = tomllib.load(f)
    if "train" in data and isinstance(data["train"], dict):
        data = {**{k: v for k, v in data.items() if k != "train"}, **data["train"]}
    return data


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def like(cls, p) -> "AdamMoments":
        return cls(np.zeros_like(p), np.zeros_like(p), 0)


def adam_step(param, grad, moments: AdamMoments, lr: float, beta1=0.9, beta2=0.999, eps=1e-15):
    """Bias-corrected Adam; returns the new parameter and updates ``moments`` in place.

    Non-finite gradients raise NonFiniteGradient before anything is modified.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != np.shape(param):
        raise ContractViolation(f"gradient shape {grad.shape} != parameter shape {np.shape(param)}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("non-finite gradient")
    moments.step += 1
    moments.m = beta1 * moments.m + (1.0 - beta1) * grad
    moments.v = beta2 * moments.v + (1.0 - beta2) * grad * grad
    m_hat = moments.m / (1.0 - beta1**moments.step)
    v_hat = moments.v / (1.0 - beta2**moments.step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# training state and checkpoints


@dataclass
class TrainState:
    config: TrainConfig
    cloud: Gaussian4DCloud
    tone: ToneMapperState
    moments: dict = field(default_factory=dict)
    iteration: int = 0
    skipped: int = 0
    extent: float = 1.0

    def param_names(self) -> list[str]:
        return [f"cloud.{n}" for n in PARAM_NAMES] + [f"tone.{n}" for n in self.tone.params()]

    def get(self, name: str) -> np.ndarray:
        group, key = name.split(".", 1)
        return getattr(self.cloud, key) if group == "cloud" else self.tone.params()[key]

    def set(self, name: str, value):
        group, key = name.split(".", 1)
        if group == "cloud":
            setattr(self.cloud, key, value)
        else:
            self.tone.set_param(key, value)


def group_of(name: str) -> str:
    """Optimizer group of a state parameter name."""
    group, key = name.split(".", 1)
    if group == "tone":
        return "drcl" if key.startswith("drcl.") else "tone_curves"
    for g, members in PARAM_GROUPS.items():
        if key in members:
            return g
    raise KeyError(name)


def learning_rate(config: TrainConfig, group: str, iteration: int, extent: float) -> float:
    if group == "position":
        frac = min(iteration / max(config.iterations, 1), 1.0)
        lr = np.exp((1.0 - frac) * np.log(config.lr_position) + frac * np.log(config.lr_position_final))
        return float(lr * extent)
    return {
        "scaling": config.lr_scaling,
        "rotation": config.lr_rotation,
        "opacity": config.lr_opacity,
        "sh": config.lr_sh,
        "tone_curves": config.lr_tone,
        "drcl": config.lr_tone,
    }[group]


def scene_extent(cameras) -> float:
    """Camera-ring radius times 1.1, the usual splatting position-lr scale."""
    centers = np.array([c.center for c in cameras])
    return float(1.1 * np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)) or 1.0)


def init_state(config: TrainConfig, manifest: Manifest) -> TrainState:
    rng = np.random.default_rng(config.seed)
    lo, hi = manifest.bounds
    cloud = Gaussian4DCloud.random(
        config.n_init, lo, hi, rng, config.sh_degree, config.n_fourier,
        time_scale=config.init_time_scale, opacity=config.init_opacity,
    )
    # log-uniform initial HDR colors so the shared tone curves see a spread of inputs
    lo_c, hi_c = np.log(config.init_color_min), np.log(config.init_color_max)
    color = np.exp(rng.uniform(lo_c, hi_c, (config.n_init, 3)))
    cloud.sh_coeffs[:, 0, 0, :] = (color - COLOR_OFFSET) / SH_C0
    times = sorted({r.time for r in manifest.records("train")})
    tone = ToneMapperState.create(times, rng, config.cell_kind, config.context_dim, config.k,
                                  momentum=config.bank_momentum)
    cams = {r.camera_id: r.camera for r in manifest.records()}
    state = TrainState(config, cloud, tone, extent=scene_extent(list(cams.values())))
    state.moments = {n: AdamMoments.like(state.get(n)) for n in state.param_names()}
    return state


def state_to_checkpoint(state: TrainState) -> tuple[dict, dict]:
    bank = state.tone.bank
    header = {
        "format": "hdr4dgs-checkpoint",
        "version": 1,
        "iteration": state.iteration,
        "seed": state.config.seed,
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "skipped": state.skipped,
        "extent": state.extent,
        "sh_degree": state.cloud.sh_degree,
        "n_fourier": state.cloud.n_fourier,
        "cell_kind": state.tone.drcl.kind,
        "context_dim": state.tone.drcl.hidden,
        "window": state.tone.window,
        "bank": {"times": bank.times.tolist(), "written": bank.written.tolist(), "momentum": bank.momentum},
        "adam_steps": {n: state.moments[n].step for n in state.param_names()},
    }
    arrays = {}
    for n in state.param_names():
        arrays[n] = state.get(n)
    arrays["bank.entries"] = bank.entries
    for n in state.param_names():
        arrays[f"adam.m.{n}"] = state.moments[n].m
        arrays[f"adam.v.{n}"] = state.moments[n].v
    return header, arrays


def state_from_checkpoint(header: dict, arrays: dict) -> TrainState:
    config = TrainConfig.from_dict(header["config"])
    a = {k: v.astype(np.float64) for k, v in arrays.items()}
    cloud = Gaussian4DCloud(**{n: a[f"cloud.{n}"] for n in PARAM_NAMES})
    b = header["bank"]
    bank = RadianceBank(a["bank.entries"], np.asarray(b["times"], dtype=np.float64),
                        np.asarray(b["written"], dtype=bool), float(b["momentum"]))
    drcl = {k[len("tone.drcl."):]: v for k, v in a.items() if k.startswith("tone.drcl.")}
    curves = {k[len("tone.curves."):]: v for k, v in a.items() if k.startswith("tone.curves.")}
    tone = ToneMapperState(bank, DRCLWeights(header["cell_kind"], int(header["context_dim"]), drcl),
                           ToneCurves(curves), int(header["window"]))
    state = TrainState(config, cloud, tone, iteration=int(header["iteration"]),
                       skipped=int(header["skipped"]), extent=float(header["extent"]))
    steps = header["adam_steps"]
    state.moments = {n: AdamMoments(a[f"adam.m.{n}"], a[f"adam.v.{n}"], int(steps[n])) for n in state.param_names()}
    return state


def save_checkpoint(path, state: TrainState) -> bytes:
    header, arrays = state_to_checkpoint(state)
    return ckpt.save(path, header, arrays)


def load_checkpoint(path) -> TrainState:
    return state_from_checkpoint(*ckpt.load(path))


# ---------------------------------------------------------------------------
# one optimization step


@dataclass
class StepResult:
    loss_total: float
    loss_ldr: float
    loss_hdr: float
    psnr_train: float
    grads: dict
    skipped: bool


def forward_backward(cloud, tone: ToneMapperState, camera, t: float, exposure: float, loss_fn,
                     pixel_level: bool = True, want_hdr: bool = True, t_index: int | None = None,
                     settings: RasterSettings = DEFAULT_SETTINGS):
    """Render both tone paths, apply ``loss_fn`` and backpropagate into every parameter.

    ``loss_fn(ldr2d, ldr3d, hdr)`` returns ``(value, g_ldr2d, g_ldr3d, g_hdr, aux)``; any
    gradient may be None.  ``ldr2d`` is None unless ``pixel_level``.  Returns
    ``(value, aux, ldr3d, grads)`` with gradients keyed like :class:`TrainState` names.
    """
    if t_index is None:
        t_index = tone.bank.nearest_index(t)
    ctx = ToneContext(tone, t_index, exposure)
    hdr, ldr3d, cache = render_frame(cloud, camera, t, want_hdr or pixel_level, ctx, settings)
    leaf2d = out2d = ldr2d = None
    if pixel_level:
        leaf2d, out2d = ctx.map_image(hdr)
        ldr2d = out2d.value
    value, g2d, g3d, g_hdr, aux = loss_fn(ldr2d, ldr3d, hdr)
    tone_g = None
    if out2d is not None and g2d is not None:
        g2 = ctx.tape.backward({out2d: g2d})
        g_img = g2[leaf2d]
        g_hdr = g_img if g_hdr is None else g_hdr + g_img
        tone_g = ctx.param_grads(g2)
    rg = render_backward(cache, g_hdr, g3d)
    grads = {f"cloud.{k}": v for k, v in rg.cloud.items()}
    for k, v in rg.tone.items():
        grads[f"tone.{k}"] = v if tone_g is None else v + tone_g[k]
    return value, aux, ldr3d, grads


def compute_grads(state: TrainState, rec: FrameRecord, ldr_gt, hdr_gt=None,
                  settings: RasterSettings = DEFAULT_SETTINGS):
    """Training loss for one frame; returns (LossResult, ldr3d, grads by state name)."""
    cfg = state.config
    weights = cfg.loss_weights()
    use_hdr = weights.alpha_hdr > 0.0 and hdr_gt is not None

    def loss_fn(ldr2d, ldr3d, hdr):
        res = total_loss(ldr2d, ldr3d, ldr_gt, hdr if use_hdr else None, hdr_gt if use_hdr else None, weights)
        return res.total, res.grad_ldr2d, res.grad_ldr3d, res.grad_hdr2d, res

    _, res, ldr3d, grads = forward_backward(state.cloud, state.tone, rec.camera, rec.time, rec.exposure, loss_fn,
                                            cfg.pixel_level, use_hdr, settings=settings)
    return res, ldr3d, grads


def apply_grads(state: TrainState, grads: dict) -> bool:
    """Adam step over every parameter; returns False (and counts a skip) on non-finite gradients."""
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("iteration %d: non-finite gradient, step skipped", state.iteration)
        return False
    cfg = state.config
    for name in state.param_names():
        if name.startswith("tone.") and state.iteration < cfg.tone_warmup:
            continue
        lr = learning_rate(cfg, group_of(name), state.iteration, state.extent)
        new = adam_step(state.get(name), grads[name], state.moments[name], lr, cfg.beta1, cfg.beta2, cfg.eps)
        state.set(name, new)
    return True


def warm_bank(state: TrainState):
    """One pass over every bank timestamp so no window is cold."""
    for i, t in enumerate(state.tone.bank.times):
        bank_update(state.tone.bank, i, radiance_signature(state.cloud, float(t)))


# ---------------------------------------------------------------------------
# training loop


class ImageCache:
    """Lazy per-record image cache; HDR files are only read when asked for."""

    def __init__(self):
        self._ldr = {}
        self._hdr = {}

    def ldr(self, rec: FrameRecord) -> np.ndarray:
        key = str(rec.ldr_path)
        if key not in self._ldr:
            self._ldr[key] = load_ldr(rec)
        return self._ldr[key]

    def hdr(self, rec: FrameRecord) -> np.ndarray:
        key = str(rec.hdr_path)
        if key not in self._hdr:
            self._hdr[key] = load_hdr(rec)
        return self._hdr[key]


@dataclass
class TrainResult:
    state: TrainState
    log_rows: list
    checkpoint_path: Path | None
    seconds: float


def train(
    manifest: Manifest,
    config: TrainConfig,
    out_dir=None,
    settings: RasterSettings = DEFAULT_SETTINGS,
    grad_hook=None,
    progress=None,
) -> TrainResult:
    """Optimize from a fresh random initialization.

    ``grad_hook(iteration, grads)`` may modify gradients in place (used by tests).
    Writes ``train_log.csv`` and checkpoints to ``out_dir`` when given.
    """
    records = manifest.records("train")
    if not records:
        raise ContractViolation("manifest has no training frames")
    state = init_state(config, manifest)
    use_hdr = config.effective_alpha > 0.0
    if use_hdr and any(r.hdr_path is None for r in records):
        raise ContractViolation("ldr+hdr supervision needs HDR ground truth for every training frame")
    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed + 1)
    images = ImageCache()
    warm_bank(state)

    rows = []
    acc = np.zeros(4)
    n_acc = 0
    start = time.perf_counter()
    last_ckpt = None
    for it in range(1, config.iterations + 1):
        state.iteration = it - 1
        rec = records[int(rng.integers(len(records)))]
        t_index = state.tone.bank.nearest_index(rec.time)
        bank_update(state.tone.bank, t_index, radiance_signature(state.cloud, rec.time))
        gt = images.ldr(rec)
        hdr_gt = images.hdr(rec) if use_hdr else None
        res, ldr3d, grads = compute_grads(state, rec, gt, hdr_gt, settings)
        if grad_hook is not None:
            grad_hook(it, grads)
        apply_grads(state, grads)
        state.iteration = it
        acc += (res.total, res.ldr, res.hdr, capped(psnr(ldr3d, gt)))
        n_acc += 1
        if it % config.log_every == 0 or it == config.iterations:
            m = acc / n_acc
            rows.append((it, *(float(x) for x in m)))
            acc[:] = 0.0
            n_acc = 0
            if progress is not None:
                progress(rows[-1])
        if out is not None and (it % config.checkpoint_every == 0 or it == config.iterations):
            last_ckpt = out / f"ckpt_{it:06d}.h4dg"
            save_checkpoint(last_ckpt, state)
    seconds = time.perf_counter() - start
    if out is not None:
        write_log(out / "train_log.csv", rows)
        final = out / "final.h4dg"
        save_checkpoint(final, state)
        last_ckpt = final
    return TrainResult(state, rows, last_ckpt, seconds)


def write_log(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    rows: list
    summary: dict


def _frame_name(rec: FrameRecord, root: Path) -> str:
    try:
        return rec.ldr_path.relative_to(root).as_posix()
    except ValueError:
        return rec.ldr_path.name


def render_record(state: TrainState, rec: FrameRecord, settings: RasterSettings = DEFAULT_SETTINGS):
    """(hdr, ldr3d) renders at a record's camera, time and exposure."""
    t_index = state.tone.bank.nearest_index(rec.time)
    ctx = ToneContext(state.tone, t_index, rec.exposure)
    hdr, ldr, _ = render_frame(state.cloud, rec.camera, rec.time, True, ctx, settings)
    return hdr, ldr


def evaluate(state: TrainState, manifest: Manifest, split: str = "test",
             settings: RasterSettings = DEFAULT_SETTINGS, mu: float | None = None) -> EvalResult:
    """Per-frame PSNR/SSIM in the LDR and mu-law HDR domains plus render fps."""
    records = manifest.records(split)
    if not records:
        raise ContractViolation(f"manifest has no {split} frames")
    mu = state.config.mu if mu is None else mu
    images = ImageCache()
    rows = []
    render_seconds = 0.0
    for rec in records:
        t0 = time.perf_counter()
        hdr, ldr = render_record(state, rec, settings)
        render_seconds += time.perf_counter() - t0
        name = _frame_name(rec, manifest.root)
        gt = images.ldr(rec)
        rows.append((manifest.scene_name, name, "ldr", capped(psnr(ldr, gt)), ssim(ldr, gt)))
        if rec.hdr_path is not None:
            a, b = mu_law(hdr, mu), mu_law(images.hdr(rec), mu)
            rows.append((manifest.scene_name, name, "hdr_mu", capped(psnr(a, b)), ssim(a, b)))
        else:
            rows.append((manifest.scene_name, name, "hdr_mu", float("nan"), float("nan")))
    summary = {"frames": len(records), "fps": len(records) / render_seconds if render_seconds > 0 else float("inf")}
    for dom in ("ldr", "hdr_mu"):
        vals = np.array([(r[3], r[4]) for r in rows if r[2] == dom])
        summary[f"{dom}_psnr"] = float(np.mean(vals[:, 0]))
        summary[f"{dom}_ssim"] = float(np.mean(vals[:, 1]))
    return EvalResult(rows, summary)


def write_eval(path, result: EvalResult):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        for r in result.rows:
            w.writerow([r[0], r[1], r[2], repr(float(r[3])), repr(float(r[4]))])


def write_summary(path, summary: dict):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("metric", "value"))
        for k, v in summary.items():
            w.writerow((k, repr(float(v)) if isinstance(v, float) else v))


# ---------------------------------------------------------------------------
# ablations


ABLATION_HEADER = ("axis", "value", "seed", "dataset_hash", "iterations", "train_seconds", "final_loss",
                   "ldr_psnr", "ldr_ssim", "hdr_mu_psnr", "hdr_mu_ssim")


def parse_axis_value(axis: str, text: str):
    if axis == "k":
        return int(text)
    if axis == "pixel_level":
        low = str(text).lower()
        if low in ("on", "true", "1", "yes"):
            return True
        if low in ("off", "false", "0", "no"):
            return False
        raise ContractViolation(f"pixel_level value must be on/off, got {text!r}")
    return str(text)


def format_axis_value(axis: str, value) -> str:
    if axis == "pixel_level":
        return "on" if value else "off"
    return str(value)


def ablate(manifest: Manifest, base: TrainConfig, axis: str, values=None,
           settings: RasterSettings = DEFAULT_SETTINGS, progress=None) -> list[tuple]:
    """Train and evaluate one variant per axis value, all with the base seed."""
    if axis not in ABLATION_AXES:
        raise ContractViolation(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    values = ABLATION_AXES[axis] if values is None else [parse_axis_value(axis, v) for v in values]
    data_hash = manifest.dataset_hash()
    rows = []
    for value in values:
        cfg = base.replace(**{axis: value})
        result = train(manifest, cfg, settings=settings)
        ev = evaluate(result.state, manifest, "test", settings)
        s = ev.summary
        final_loss = result.log_rows[-1][1] if result.log_rows else float("nan")
        rows.append((axis, format_axis_value(axis, value), cfg.seed, data_hash, cfg.iterations,
                     result.seconds, final_loss, s["ldr_psnr"], s["ldr_ssim"], s["hdr_mu_psnr"], s["hdr_mu_ssim"]))
        if progress is not None:
            progress(rows[-1])
    return rows


def write_ablation(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow(list(r[:5]) + [repr(float(x)) for x in r[5:]])
