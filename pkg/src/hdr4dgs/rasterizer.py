"""Projection, depth-sorted alpha compositing and analytic backward pass.

A frame is rendered by slicing every 4D Gaussian at time ``t``, projecting the
conditional 3D Gaussian through a pinhole camera (EWA linearization), sorting by
camera depth and compositing front to back:

    I = sum_i w_i c_i prod_{j<i} (1 - w_j) + T_final * background
    w_i = min(clamp, alpha_i * p_i(t) * exp(-0.5 d^T cov2^-1 d))

HDR and tone-mapped LDR colors share one geometry pass when both are requested.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .camera import Camera
from .errors import ContractViolation, NonFiniteParameter
from .scene import Gaussian4DCloud, SceneEval, evaluate, evaluate_backward
from .tonemap import ToneContext, ToneMapperState


@dataclass(frozen=True)
class RasterSettings:
    background: tuple = (0.0, 0.0, 0.0)
    temporal_cull: float = 1e-4
    weight_floor: float = 1e-7
    transmittance_stop: float = 1e-4
    weight_clamp: float = 0.99
    dilation: float = 0.3
    near: float = 0.01
    tile: int = 16

    def exact(self) -> "RasterSettings":
        """Same settings with every approximation (culls, floor, early stop) switched off."""
        return replace(self, temporal_cull=0.0, weight_floor=0.0, transmittance_stop=0.0)


DEFAULT_SETTINGS = RasterSettings()
EXACT_SETTINGS = DEFAULT_SETTINGS.exact()


@dataclass
class Splat2D:
    mean2: np.ndarray
    cov2: np.ndarray
    depth: float
    temporal_weight: float = 1.0
    color: np.ndarray = field(default_factory=lambda: np.ones(3))
    alpha: float = 1.0


def project(camera: Camera, mean3, cov3, dilation: float = 0.3, near: float = 0.01):
    """Project one 3D Gaussian; returns (mean2, cov2, depth) or None when culled."""
    xc = camera.to_camera(mean3)
    x, y, z = xc
    if z <= near:
        return None
    jac = np.array([
        [camera.fx / z, 0.0, -camera.fx * x / z**2],
        [0.0, camera.fy / z, -camera.fy * y / z**2],
    ])
    t = jac @ camera.rotation
    cov2 = t @ np.asarray(cov3, dtype=np.float64) @ t.T + dilation * np.eye(2)
    mean2 = np.array([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy])
    return mean2, 0.5 * (cov2 + cov2.T), float(z)


def splat_weight(splat: Splat2D, px: float, py: float, clamp: float = 0.99) -> float:
    cov = np.asarray(splat.cov2, dtype=np.float64)
    det = np.linalg.det(cov)
    if det < 1e-12:
        return 0.0
    d = np.array([px, py]) - splat.mean2
    g = np.exp(-0.5 * d @ np.linalg.solve(cov, d))
    return min(clamp, splat.temporal_weight * splat.alpha * g)


def composite_pixel(splats, pixel, background=(0.0, 0.0, 0.0), settings: RasterSettings = DEFAULT_SETTINGS):
    """Composite depth-sorted splats at integer pixel ``(u, v)``, sampled at its centre."""
    px, py = pixel[0] + 0.5, pixel[1] + 0.5
    out = np.zeros(3)
    trans = 1.0
    for s in splats:
        w = splat_weight(s, px, py, settings.weight_clamp)
        if w <= 0.0 or w < settings.weight_floor:
            continue
        out += w * trans * np.asarray(s.color, dtype=np.float64)
        trans *= 1.0 - w
        if trans < settings.transmittance_stop:
            break
    return out + trans * np.asarray(background, dtype=np.float64)


# ---------------------------------------------------------------------------
# batched projection


@dataclass
class Projection:
    xc: np.ndarray
    jac: np.ndarray
    tmat: np.ndarray
    cov2: np.ndarray
    conic: np.ndarray
    det: np.ndarray
    mean2: np.ndarray
    depth: np.ndarray


def project_batch(camera: Camera, mean3, cov3, dilation: float) -> Projection:
    xc = np.asarray(mean3) @ camera.rotation.T + camera.translation
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    z_safe = np.where(np.abs(z) > 1e-12, z, 1e-12)
    jac = np.zeros((len(z), 2, 3))
    jac[:, 0, 0] = camera.fx / z_safe
    jac[:, 0, 2] = -camera.fx * x / z_safe**2
    jac[:, 1, 1] = camera.fy / z_safe
    jac[:, 1, 2] = -camera.fy * y / z_safe**2
    tmat = jac @ camera.rotation
    cov2 = tmat @ cov3 @ np.swapaxes(tmat, 1, 2)
    cov2[:, 0, 0] += dilation
    cov2[:, 1, 1] += dilation
    p, q, r = cov2[:, 0, 0], 0.5 * (cov2[:, 0, 1] + cov2[:, 1, 0]), cov2[:, 1, 1]
    det = p * r - q * q
    det_safe = np.where(det > 1e-12, det, 1.0)
    conic = np.stack([r / det_safe, -q / det_safe, p / det_safe], axis=1)
    mean2 = np.stack([camera.fx * x / z_safe + camera.cx, camera.fy * y / z_safe + camera.cy], axis=1)
    return Projection(xc, jac, tmat, cov2, conic, det, mean2, z)


def project_backward(camera: Camera, pr: Projection, cov3, g_mean2, g_conic):
    """Gradients of (mean2, conic) w.r.t. (mean3, cov3)."""
    a, b, c = pr.conic[:, 0], pr.conic[:, 1], pr.conic[:, 2]
    q_mat = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    g_q = np.stack([
        np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1),
        np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1),
    ], -2)
    g_cov2 = -q_mat @ g_q @ q_mat
    g_cov3 = np.swapaxes(pr.tmat, 1, 2) @ g_cov2 @ pr.tmat
    g_t = 2.0 * g_cov2 @ pr.tmat @ cov3
    g_j = g_t @ camera.rotation.T

    x, y, z = pr.xc[:, 0], pr.xc[:, 1], pr.xc[:, 2]
    fx, fy = camera.fx, camera.fy
    gu, gv = g_mean2[:, 0], g_mean2[:, 1]
    g_x = g_j[:, 0, 2] * (-fx / z**2) + gu * fx / z
    g_y = g_j[:, 1, 2] * (-fy / z**2) + gv * fy / z
    g_z = (
        g_j[:, 0, 0] * (-fx / z**2)
        + g_j[:, 0, 2] * (2.0 * fx * x / z**3)
        + g_j[:, 1, 1] * (-fy / z**2)
        + g_j[:, 1, 2] * (2.0 * fy * y / z**3)
        - gu * fx * x / z**2
        - gv * fy * y / z**2
    )
    g_xc = np.stack([g_x, g_y, g_z], axis=1)
    return g_xc @ camera.rotation, g_cov3


# ---------------------------------------------------------------------------
# array-level compositing


@dataclass
class CompositeCache:
    mean2: np.ndarray
    conic: np.ndarray
    opac: np.ndarray
    colors: np.ndarray
    rects: np.ndarray
    offsets: np.ndarray
    items: np.ndarray
    t_final: np.ndarray
    n_used: np.ndarray
    width: int
    height: int
    background: np.ndarray
    settings: RasterSettings


def splat_rects(mean2, cov2, opac, width, height, floor):
    """Pixel boxes [x0, x1) x [y0, y1) outside which a splat's weight is below ``floor``."""
    n = len(opac)
    rects = np.zeros((n, 4), dtype=np.int64)
    if n == 0:
        return rects
    if floor <= 0.0:
        rects[:, 1] = width
        rects[:, 3] = height
        return rects
    ratio = np.where(opac > floor, opac / floor, 1.0)
    r2 = 2.0 * np.log(ratio)
    hx = np.sqrt(r2 * cov2[:, 0, 0])
    hy = np.sqrt(r2 * cov2[:, 1, 1])
    rects[:, 0] = np.clip(np.floor(mean2[:, 0] - hx - 0.5) - 1, 0, width)
    rects[:, 1] = np.clip(np.ceil(mean2[:, 0] + hx - 0.5) + 2, 0, width)
    rects[:, 2] = np.clip(np.floor(mean2[:, 1] - hy - 0.5) - 1, 0, height)
    rects[:, 3] = np.clip(np.ceil(mean2[:, 1] + hy - 0.5) + 2, 0, height)
    empty = opac <= floor
    rects[empty] = 0
    return rects


def composite(mean2, cov2, conic, opac, colors, width, height, settings=DEFAULT_SETTINGS, background=None):
    """Composite splats already sorted front to back. Returns (image, cache)."""
    colors = np.ascontiguousarray(colors, dtype=np.float64)
    nch = colors.shape[1]
    if background is None:
        background = np.zeros(nch)
        bg = np.asarray(settings.background, dtype=np.float64)
        background[: min(nch, 3)] = bg[: min(nch, 3)]
        if nch > 3:
            background[3:] = np.resize(bg, nch - 3)
    background = np.asarray(background, dtype=np.float64)
    rects = splat_rects(mean2, cov2, opac, width, height, settings.weight_floor)
    offsets, items = _kernels.bin_tiles(rects, width, height, settings.tile)
    mean2 = np.ascontiguousarray(mean2, dtype=np.float64)
    conic = np.ascontiguousarray(conic, dtype=np.float64)
    opac = np.ascontiguousarray(opac, dtype=np.float64)
    image, t_final, n_used = _kernels.composite_forward(
        mean2, conic, opac, colors, rects, offsets, items, width, height, settings.tile,
        background, settings.weight_floor, settings.weight_clamp, settings.transmittance_stop,
    )
    cache = CompositeCache(mean2, conic, opac, colors, rects, offsets, items, t_final, n_used,
                           width, height, background, settings)
    return image, cache


def composite_backward(cache: CompositeCache, grad_image):
    """Returns gradients w.r.t. (mean2, conic, opac, colors) of the sorted splats."""
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    expected = (cache.height, cache.width, cache.colors.shape[1])
    if grad_image.shape != expected:
        raise ContractViolation(f"gradient image shape {grad_image.shape} != {expected}")
    s = cache.settings
    slot = _kernels.composite_backward(
        cache.mean2, cache.conic, cache.opac, cache.colors, cache.rects, cache.offsets, cache.items,
        cache.width, cache.height, s.tile, cache.background, s.weight_floor, s.weight_clamp,
        cache.t_final, cache.n_used, grad_image,
    )
    g = _kernels.reduce_slots(slot, cache.items, len(cache.opac))
    return g[:, 0:2], g[:, 2:5], g[:, 5], g[:, 6:]


# ---------------------------------------------------------------------------
# frame rendering


@dataclass
class FrameCache:
    cloud: Gaussian4DCloud
    camera: Camera
    ev: SceneEval
    visible: np.ndarray
    order: np.ndarray
    proj: Projection
    comp: CompositeCache
    hdr_slice: slice | None
    ldr_slice: slice | None
    tone: ToneContext | None = None
    tone_leaf: object = None
    tone_out: object = None


@dataclass
class RenderGrads:
    cloud: dict
    tone: dict | None


def render_frame(
    cloud: Gaussian4DCloud,
    camera: Camera,
    t: float,
    want_hdr: bool = True,
    tone: ToneContext | None = None,
    settings: RasterSettings = DEFAULT_SETTINGS,
):
    """Render HDR and/or tone-mapped (3D path) LDR images in one compositing pass.

    Returns ``(hdr or None, ldr or None, cache)``.
    """
    if not want_hdr and tone is None:
        raise ContractViolation("nothing to render: need want_hdr or a tone context")
    ev = evaluate(cloud, t, camera.center)
    for name, arr in (("colors", ev.color), ("means", ev.mean3)):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteParameter(f"non-finite {name} at t={t}")
    proj_all = project_batch(camera, ev.mean3, ev.cov3, settings.dilation)
    opac_all = ev.alpha * ev.ptime
    keep = (proj_all.depth > settings.near) & (proj_all.det > 1e-12)
    if settings.temporal_cull > 0.0:
        keep &= ev.ptime >= settings.temporal_cull
    if settings.weight_floor > 0.0:
        keep &= opac_all > settings.weight_floor
    visible = np.nonzero(keep)[0]
    order = visible[np.argsort(proj_all.depth[visible], kind="stable")]
    proj = Projection(*(getattr(proj_all, f)[order] for f in
                        ("xc", "jac", "tmat", "cov2", "conic", "det", "mean2", "depth")))

    parts = []
    hdr_slice = ldr_slice = None
    if want_hdr:
        parts.append(ev.color[order])
        hdr_slice = slice(0, 3)
    leaf = out = None
    if tone is not None:
        leaf, out = tone.map_colors(ev.color[order])
        parts.append(out.value)
        ldr_slice = slice(3, 6) if want_hdr else slice(0, 3)
    colors = np.concatenate(parts, axis=1) if parts else np.zeros((0, 3))

    image, comp = composite(proj.mean2, proj.cov2, proj.conic, opac_all[order], colors,
                            camera.width, camera.height, settings)
    cache = FrameCache(cloud, camera, ev, visible, order, proj, comp, hdr_slice, ldr_slice, tone, leaf, out)
    hdr = image[..., hdr_slice] if hdr_slice is not None else None
    ldr = image[..., ldr_slice] if ldr_slice is not None else None
    return hdr, ldr, cache


def render(
    cloud: Gaussian4DCloud,
    camera: Camera,
    t: float,
    mode: str = "hdr",
    tone_state: ToneMapperState | None = None,
    exposure: float | None = None,
    t_index: int | None = None,
    settings: RasterSettings = DEFAULT_SETTINGS,
) -> np.ndarray:
    """Render one image. ``mode`` is ``"hdr"`` or ``"ldr3d"`` (tone-map Gaussians, then composite)."""
    mode = mode.lower()
    if mode == "hdr":
        hdr, _, _ = render_frame(cloud, camera, t, True, None, settings)
        return hdr
    if mode in ("ldr3d", "ldr_3d", "ldr"):
        if tone_state is None or exposure is None:
            raise ContractViolation("LDR_3D rendering needs a tone state and an exposure")
        if t_index is None:
            t_index = tone_state.bank.nearest_index(t)
        ctx = ToneContext(tone_state, t_index, exposure)
        _, ldr, _ = render_frame(cloud, camera, t, False, ctx, settings)
        return ldr
    raise ContractViolation(f"unknown render mode {mode!r}")


def render_backward(cache: FrameCache, g_hdr=None, g_ldr=None) -> RenderGrads:
    """Exact reverse pass of :func:`render_frame`."""
    h, w = cache.comp.height, cache.comp.width
    nch = cache.comp.colors.shape[1]
    g_img = np.zeros((h, w, nch))
    for sl, g, name in ((cache.hdr_slice, g_hdr, "hdr"), (cache.ldr_slice, g_ldr, "ldr")):
        if g is None:
            continue
        if sl is None:
            raise ContractViolation(f"no {name} image in this forward cache")
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (h, w, 3):
            raise ContractViolation(f"{name} gradient shape {g.shape} != {(h, w, 3)}")
        g_img[..., sl] = g
    g_mean2, g_conic, g_opac, g_col = composite_backward(cache.comp, g_img)

    n = cache.cloud.n
    order = cache.order
    ev = cache.ev
    g_color_sorted = np.zeros((len(order), 3))
    if cache.hdr_slice is not None:
        g_color_sorted += g_col[:, cache.hdr_slice]
    tone_grads = None
    if cache.ldr_slice is not None:
        grads = cache.tone.tape.backward({cache.tone_out: g_col[:, cache.ldr_slice]})
        g_color_sorted += grads[cache.tone_leaf]
        tone_grads = cache.tone.param_grads(grads)

    g_mean3_s, g_cov3_s = project_backward(cache.camera, cache.proj, ev.cov3[order], g_mean2, g_conic)
    g_mean3 = np.zeros((n, 3))
    g_cov3 = np.zeros((n, 3, 3))
    g_color = np.zeros((n, 3))
    g_ptime = np.zeros(n)
    g_alpha = np.zeros(n)
    g_mean3[order] = g_mean3_s
    g_cov3[order] = g_cov3_s
    g_color[order] = g_color_sorted
    g_ptime[order] = g_opac * ev.alpha[order]
    g_alpha[order] = g_opac * ev.ptime[order]
    cloud_grads = evaluate_backward(cache.cloud, ev, g_mean3, g_cov3, g_ptime, g_alpha, g_color)
    return RenderGrads(cloud_grads, tone_grads)
