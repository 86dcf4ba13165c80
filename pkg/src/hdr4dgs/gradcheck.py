"""Central finite-difference verification of every analytic gradient used in training.

The objective is a fixed random linear functional of the HDR render, the 3D-path
LDR render and the 2D-path LDR image, so all three backward chains are exercised
in the same run as training uses them.  Rendering uses the exact settings (no
culling, floor or early stop) so the function is smooth apart from relu kinks in
the tone curves; coordinates whose perturbation flips a relu are reported as
skipped rather than compared.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .losses import LossWeights, total_loss
from .rasterizer import EXACT_SETTINGS, render_frame
from .scene import Gaussian4DCloud
from .tonemap import ToneContext, ToneMapperState, bank_update, radiance_signature
from .trainer import forward_backward, group_of

GROUPS = ("position", "scaling", "rotation", "opacity", "sh", "tone_curves", "drcl")
TOLERANCE = 1e-3
STEP = 1e-4
ABS_FLOOR = 1e-6


@dataclass(frozen=True)
class Preset:
    n_gaussians: int = 5
    size: int = 8
    curve_samples: int = 400  # coordinates per tone-curve tensor beyond which we subsample
    directions: int = 3


PRESETS = {
    "default": Preset(),
    "quick": Preset(curve_samples=40, directions=1),
}


@dataclass
class GroupReport:
    max_rel: float = 0.0
    checked: int = 0
    skipped: int = 0
    worst: str = ""


@dataclass
class GradcheckReport:
    groups: dict = field(default_factory=dict)
    loss_max_rel: float = 0.0
    seconds: float = 0.0
    tolerance: float = TOLERANCE

    @property
    def failed(self) -> list[str]:
        bad = [g for g, r in self.groups.items() if not r.max_rel < self.tolerance or r.checked == 0]
        if not self.loss_max_rel < self.tolerance:
            bad.append("loss")
        return bad

    @property
    def passed(self) -> bool:
        return not self.failed

    def lines(self) -> list[str]:
        out = [f"{'group':<12} {'max_rel_err':>12} {'checked':>8} {'skipped':>8}  status"]
        for g, r in self.groups.items():
            status = "ok" if r.max_rel < self.tolerance and r.checked else "FAIL"
            out.append(f"{g:<12} {r.max_rel:12.3e} {r.checked:8d} {r.skipped:8d}  {status}  {r.worst}")
        status = "ok" if self.loss_max_rel < self.tolerance else "FAIL"
        out.append(f"{'loss':<12} {self.loss_max_rel:12.3e} {'':>8} {'':>8}  {status}")
        out.append(f"tolerance {self.tolerance:g}, step {STEP:g}, {self.seconds:.1f} s")
        return out


def _rel(a, n):
    return abs(a - n) / max(abs(a), abs(n), ABS_FLOOR)


def build_problem(preset: Preset, seed: int):
    """Small seeded scene, tone state and random objective weights."""
    rng = np.random.default_rng(seed)
    n = preset.n_gaussians
    cloud = Gaussian4DCloud.zeros(n, sh_degree=2, n_fourier=2)
    cloud.mean4[:, :3] = rng.uniform(-0.4, 0.4, (n, 3))
    cloud.mean4[:, 3] = rng.uniform(0.3, 0.5, n)
    cloud.log_scale4[:, :3] = np.log(rng.uniform(0.2, 0.4, (n, 3)))
    cloud.log_scale4[:, 3] = np.log(rng.uniform(0.3, 0.6, n))
    cloud.quat_left = rng.normal(size=(n, 4))
    cloud.quat_right = rng.normal(size=(n, 4))
    cloud.raw_opacity = rng.uniform(-1.0, 0.5, n)
    cloud.sh_coeffs = rng.normal(scale=0.03, size=cloud.sh_coeffs.shape)
    camera = Camera.look_at((0.3, 0.4, -3.0), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), 45.0, preset.size, preset.size)
    times = np.linspace(0.0, 1.0, 6)
    tone = ToneMapperState.create(times, rng, "gru", context_dim=2, window=3)
    for i, t in enumerate(times):
        bank_update(tone.bank, i, radiance_signature(cloud, float(t)))
    shape = (preset.size, preset.size, 3)
    weights = {k: rng.normal(size=shape) for k in ("ldr2d", "ldr3d", "hdr")}
    return cloud, tone, camera, 0.4, 2.0, weights


def _objective_value(cloud, tone, camera, t, exposure, weights):
    ctx = ToneContext(tone, tone.bank.nearest_index(t), exposure)
    hdr, ldr3d, _ = render_frame(cloud, camera, t, True, ctx, EXACT_SETTINGS)
    _, out2d = ctx.map_image(hdr)
    value = (np.sum(weights["hdr"] * hdr) + np.sum(weights["ldr3d"] * ldr3d)
             + np.sum(weights["ldr2d"] * out2d.value))
    return float(value), ctx.tape.kink_pattern()


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def analytic_grads(cloud, tone, camera, t, exposure, weights) -> dict:
    def loss_fn(ldr2d, ldr3d, hdr):
        value = np.sum(weights["hdr"] * hdr) + np.sum(weights["ldr3d"] * ldr3d) + np.sum(weights["ldr2d"] * ldr2d)
        return value, weights["ldr2d"], weights["ldr3d"], weights["hdr"], None

    _, _, _, grads = forward_backward(cloud, tone, camera, t, exposure, loss_fn, True, True,
                                      settings=EXACT_SETTINGS)
    return grads


class _Params:
    """Get/set access to cloud and tone tensors by state name."""

    def __init__(self, cloud, tone):
        self.cloud, self.tone = cloud, tone

    def names(self):
        from .scene import PARAM_NAMES
        return [f"cloud.{n}" for n in PARAM_NAMES] + [f"tone.{n}" for n in self.tone.params()]

    def get(self, name):
        group, key = name.split(".", 1)
        return getattr(self.cloud, key) if group == "cloud" else self.tone.params()[key]


def _coords(name, arr, preset, rng):
    size = arr.size
    if name.startswith("tone.curves.") and size > preset.curve_samples:
        return np.sort(rng.choice(size, preset.curve_samples, replace=False))
    return np.arange(size)


def run_gradcheck(preset: str | Preset = "default", seed: int = 0, inject_wrong_sign: str | None = None,
                  tolerance: float = TOLERANCE) -> GradcheckReport:
    """Compare analytic and central-difference gradients for every parameter group.

    ``inject_wrong_sign`` negates one group's analytic gradient (harness self-test).
    """
    if isinstance(preset, str):
        preset = PRESETS[preset]
    if inject_wrong_sign is not None and inject_wrong_sign not in GROUPS:
        raise ValueError(f"unknown group {inject_wrong_sign!r}; choose from {GROUPS}")
    start = time.perf_counter()
    cloud, tone, camera, t, exposure, weights = build_problem(preset, seed)
    grads = analytic_grads(cloud, tone, camera, t, exposure, weights)
    if inject_wrong_sign is not None:
        for name in grads:
            if group_of(name) == inject_wrong_sign:
                grads[name] = -grads[name]

    params = _Params(cloud, tone)
    _, base_pattern = _objective_value(cloud, tone, camera, t, exposure, weights)
    rng = np.random.default_rng(seed + 1)
    report = GradcheckReport(groups={g: GroupReport() for g in GROUPS}, tolerance=tolerance)

    def evaluate():
        return _objective_value(cloud, tone, camera, t, exposure, weights)

    for name in params.names():
        arr = params.get(name)
        flat = arr.reshape(-1)
        g = grads[name].reshape(-1)
        rep = report.groups[group_of(name)]
        for j in _coords(name, arr, preset, rng):
            old = flat[j]
            flat[j] = old + STEP
            fp, pat_p = evaluate()
            flat[j] = old - STEP
            fm, pat_m = evaluate()
            flat[j] = old
            if not (_same_pattern(pat_p, base_pattern) and _same_pattern(pat_m, base_pattern)):
                rep.skipped += 1
                continue
            num = (fp - fm) / (2.0 * STEP)
            err = _rel(g[j], num)
            rep.checked += 1
            if err > rep.max_rel or not rep.worst:
                rep.max_rel = max(rep.max_rel, err)
                rep.worst = f"{name}[{j}] analytic {g[j]:.6e} numeric {num:.6e}"
        # directional checks cover every coordinate of subsampled tensors
        for _ in range(preset.directions if name.startswith("tone.curves.") else 0):
            d = rng.normal(size=arr.shape)
            d /= np.linalg.norm(d)
            orig = arr.copy()
            arr += STEP * d
            fp, pat_p = evaluate()
            arr[...] = orig - STEP * d
            fm, pat_m = evaluate()
            arr[...] = orig
            if not (_same_pattern(pat_p, base_pattern) and _same_pattern(pat_m, base_pattern)):
                rep.skipped += 1
                continue
            num = (fp - fm) / (2.0 * STEP)
            ana = float(np.sum(grads[name] * d))
            err = _rel(ana, num)
            rep.checked += 1
            if err > rep.max_rel:
                rep.max_rel = err
                rep.worst = f"{name} direction analytic {ana:.6e} numeric {num:.6e}"

    report.loss_max_rel = loss_gradcheck(seed, preset.size)
    report.seconds = time.perf_counter() - start
    return report


def loss_gradcheck(seed: int = 0, size: int = 8) -> float:
    """Max relative error of total_loss image gradients against central differences.

    HDR coordinates at the image minimum or maximum are excluded because the mu-law
    normalization bounds are treated as constants in the analytic gradient.
    """
    rng = np.random.default_rng(seed + 2)
    shape = (size, size, 3)
    ldr_gt = rng.uniform(0.1, 0.9, shape)
    hdr_gt = rng.uniform(0.0, 20.0, shape)
    inputs = {
        "ldr2d": rng.uniform(0.1, 0.9, shape),
        "ldr3d": rng.uniform(0.1, 0.9, shape),
        "hdr": rng.uniform(0.0, 20.0, shape),
    }
    weights = LossWeights()

    def value():
        return total_loss(inputs["ldr2d"], inputs["ldr3d"], ldr_gt, inputs["hdr"], hdr_gt, weights).total

    res = total_loss(inputs["ldr2d"], inputs["ldr3d"], ldr_gt, inputs["hdr"], hdr_gt, weights)
    analytic = {"ldr2d": res.grad_ldr2d, "ldr3d": res.grad_ldr3d, "hdr": res.grad_hdr2d}
    worst = 0.0
    for key, arr in inputs.items():
        flat = arr.reshape(-1)
        g = analytic[key].reshape(-1)
        extremes = {int(np.argmin(flat)), int(np.argmax(flat))} if key == "hdr" else set()
        for j in range(flat.size):
            if j in extremes:
                continue
            old = flat[j]
            flat[j] = old + STEP
            fp = value()
            flat[j] = old - STEP
            fm = value()
            flat[j] = old
            worst = max(worst, _rel(g[j], (fp - fm) / (2.0 * STEP)))
    return worst
