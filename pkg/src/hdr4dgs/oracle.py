"""Brute-force reference renderer.

Evaluates the compositing sum pixel by pixel over every Gaussian using the
single-Gaussian functions from :mod:`hdr4dgs.scene`.  No temporal culling, no
weight floor, no early termination and no tiling; only points behind the near
plane are dropped since they have no projection.
"""

from __future__ import annotations

import numpy as np

from .camera import Camera
from .scene import Gaussian4DCloud, build_covariance4, conditional_spatial, eval_color_4dsh, temporal_weight
from .tonemap import ToneMapperState, drcl_forward, tone_map_colors


def reference_splats(cloud: Gaussian4DCloud, camera: Camera, t: float, dilation: float = 0.3, near: float = 0.01):
    """Per-Gaussian (depth, mean2, inverse cov2, opacity, hdr color), unsorted."""
    out = []
    center = camera.center
    for i in range(cloud.n):
        sigma = build_covariance4(cloud.log_scale4[i], cloud.quat_left[i], cloud.quat_right[i])
        pt = temporal_weight(sigma, cloud.mean4[i, 3], t)
        mean3, cov3 = conditional_spatial(sigma, cloud.mean4[i], t)
        xc = camera.rotation @ mean3 + camera.translation
        x, y, z = xc
        if z <= near:
            continue
        jac = np.array([
            [camera.fx / z, 0.0, -camera.fx * x / z**2],
            [0.0, camera.fy / z, -camera.fy * y / z**2],
        ])
        tm = jac @ camera.rotation
        cov2 = tm @ cov3 @ tm.T + dilation * np.eye(2)
        mean2 = np.array([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy])
        view = mean3 - center
        color = eval_color_4dsh(cloud.sh_coeffs[i], view / np.linalg.norm(view), t)
        alpha = 1.0 / (1.0 + np.exp(-cloud.raw_opacity[i]))
        out.append((z, mean2, np.linalg.inv(cov2), alpha * pt, color))
    return out


def brute_force_render(
    cloud: Gaussian4DCloud,
    camera: Camera,
    t: float,
    mode: str = "hdr",
    tone_state: ToneMapperState | None = None,
    exposure: float | None = None,
    t_index: int | None = None,
    background=(0.0, 0.0, 0.0),
    clamp: float = 0.99,
) -> np.ndarray:
    splats = reference_splats(cloud, camera, t)
    if mode != "hdr" and splats:
        if t_index is None:
            t_index = tone_state.bank.nearest_index(t)
        f_t = drcl_forward(tone_state.drcl, tone_state.bank.window(t_index, tone_state.window))
        ldr = tone_map_colors(tone_state.curves, np.array([s[4] for s in splats]), exposure, f_t)
        splats = [s[:4] + (c,) for s, c in zip(splats, ldr)]
    splats.sort(key=lambda s: s[0])
    bg = np.asarray(background, dtype=np.float64)
    image = np.zeros((camera.height, camera.width, 3))
    for v in range(camera.height):
        for u in range(camera.width):
            p = np.array([u + 0.5, v + 0.5])
            acc = np.zeros(3)
            trans = 1.0
            for _, mean2, inv_cov, opac, color in splats:
                d = p - mean2
                w = min(clamp, opac * np.exp(-0.5 * d @ inv_cov @ d))
                acc += w * trans * color
                trans *= 1.0 - w
            image[v, u] = acc + trans * bg
    return image
