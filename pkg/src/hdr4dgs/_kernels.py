"""Numba kernels for tile-binned alpha compositing and its exact reverse pass.

Splat arrays arrive already sorted front-to-back.  Tile lists keep that order, so
every pixel visits the same splats in the same order as a full-image loop would.
Gradients are accumulated per tile-list slot and reduced in slot order, which makes
the result independent of the thread count.
"""

import os

import numpy as np
from numba import config, njit, prange

if "NUMBA_THREADING_LAYER" not in os.environ:
    config.THREADING_LAYER = "omp"


@njit(cache=True)
def bin_tiles(rects, width, height, tile):
    n = rects.shape[0]
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    counts = np.zeros(ntx * nty, np.int64)
    for i in range(n):
        x0, x1, y0, y1 = rects[i, 0], rects[i, 1], rects[i, 2], rects[i, 3]
        if x1 <= x0 or y1 <= y0:
            continue
        for ty in range(y0 // tile, (y1 - 1) // tile + 1):
            for tx in range(x0 // tile, (x1 - 1) // tile + 1):
                counts[ty * ntx + tx] += 1
    offsets = np.zeros(ntx * nty + 1, np.int64)
    for k in range(ntx * nty):
        offsets[k + 1] = offsets[k] + counts[k]
    items = np.empty(offsets[-1], np.int64)
    fill = offsets[:-1].copy()
    for i in range(n):
        x0, x1, y0, y1 = rects[i, 0], rects[i, 1], rects[i, 2], rects[i, 3]
        if x1 <= x0 or y1 <= y0:
            continue
        for ty in range(y0 // tile, (y1 - 1) // tile + 1):
            for tx in range(x0 // tile, (x1 - 1) // tile + 1):
                k = ty * ntx + tx
                items[fill[k]] = i
                fill[k] += 1
    return offsets, items


@njit(inline="always")
def _weight(mean2, conic, opac, i, px, py, floor, clamp):
    dx = px - mean2[i, 0]
    dy = py - mean2[i, 1]
    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
    g = np.exp(power)
    w = opac[i] * g
    return w, g, dx, dy


@njit(parallel=True, cache=True)
def composite_forward(mean2, conic, opac, colors, rects, offsets, items,
                      width, height, tile, background, floor, clamp, t_stop):
    nch = colors.shape[1]
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    image = np.zeros((height, width, nch))
    t_final = np.ones((height, width))
    n_used = np.zeros((height, width), np.int64)
    for k in prange(ntx * nty):
        ty = k // ntx
        tx = k - ty * ntx
        start = offsets[k]
        stop = offsets[k + 1]
        for v in range(ty * tile, min((ty + 1) * tile, height)):
            for u in range(tx * tile, min((tx + 1) * tile, width)):
                px = u + 0.5
                py = v + 0.5
                trans = 1.0
                used = 0
                for j in range(start, stop):
                    i = items[j]
                    if u < rects[i, 0] or u >= rects[i, 1] or v < rects[i, 2] or v >= rects[i, 3]:
                        continue
                    w, g, dx, dy = _weight(mean2, conic, opac, i, px, py, floor, clamp)
                    if w < floor or w <= 0.0:
                        continue
                    if w > clamp:
                        w = clamp
                    for c in range(nch):
                        image[v, u, c] += w * trans * colors[i, c]
                    trans *= 1.0 - w
                    used = j - start + 1
                    if trans < t_stop:
                        break
                for c in range(nch):
                    image[v, u, c] += trans * background[c]
                t_final[v, u] = trans
                n_used[v, u] = used
    return image, t_final, n_used


@njit(parallel=True, cache=True)
def composite_backward(mean2, conic, opac, colors, rects, offsets, items,
                       width, height, tile, background, floor, clamp,
                       t_final, n_used, grad_image):
    nch = colors.shape[1]
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    n_slots = items.shape[0]
    # per-slot partials: mean2 (2), conic (3), opacity (1), colors (nch)
    slot_grad = np.zeros((n_slots, 6 + nch))
    for k in prange(ntx * nty):
        ty = k // ntx
        tx = k - ty * ntx
        start = offsets[k]
        behind = np.zeros(nch)
        for v in range(ty * tile, min((ty + 1) * tile, height)):
            for u in range(tx * tile, min((tx + 1) * tile, width)):
                px = u + 0.5
                py = v + 0.5
                trans = t_final[v, u]
                for c in range(nch):
                    behind[c] = trans * background[c]
                for j in range(start + n_used[v, u] - 1, start - 1, -1):
                    i = items[j]
                    if u < rects[i, 0] or u >= rects[i, 1] or v < rects[i, 2] or v >= rects[i, 3]:
                        continue
                    w, g, dx, dy = _weight(mean2, conic, opac, i, px, py, floor, clamp)
                    if w < floor or w <= 0.0:
                        continue
                    clamped = w > clamp
                    if clamped:
                        w = clamp
                    t_i = trans / (1.0 - w)
                    g_w = 0.0
                    for c in range(nch):
                        gi = grad_image[v, u, c]
                        g_w += gi * (colors[i, c] * t_i - behind[c] / (1.0 - w))
                        slot_grad[j, 6 + c] += gi * w * t_i
                        behind[c] += w * colors[i, c] * t_i
                    trans = t_i
                    if clamped:
                        continue
                    slot_grad[j, 5] += g_w * g
                    g_pow = g_w * w
                    a = conic[i, 0]
                    b = conic[i, 1]
                    cc = conic[i, 2]
                    slot_grad[j, 0] += g_pow * (a * dx + b * dy)
                    slot_grad[j, 1] += g_pow * (b * dx + cc * dy)
                    slot_grad[j, 2] += -0.5 * dx * dx * g_pow
                    slot_grad[j, 3] += -dx * dy * g_pow
                    slot_grad[j, 4] += -0.5 * dy * dy * g_pow
    return slot_grad


@njit(cache=True)
def reduce_slots(slot_grad, items, n_splats):
    out = np.zeros((n_splats, slot_grad.shape[1]))
    for j in range(items.shape[0]):
        i = items[j]
        for c in range(slot_grad.shape[1]):
            out[i, c] += slot_grad[j, c]
    return out
