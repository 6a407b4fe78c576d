"""Numba kernels for per-row splat compositing and its adjoint."""
from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

ALPHA_MAX = 0.99


@njit(cache=True)
def build_row_lists(order, ymin, ymax, height):
    """CSR lists of Gaussians touching each image row, in ``order`` (front to back)."""
    offsets = np.zeros(height + 1, dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        for y in range(ymin[g], ymax[g] + 1):
            offsets[y + 1] += 1
    for y in range(height):
        offsets[y + 1] += offsets[y]
    ids = np.empty(offsets[height], dtype=np.int64)
    fill = offsets[:height].copy()
    for k in range(order.shape[0]):
        g = order[k]
        for y in range(ymin[g], ymax[g] + 1):
            ids[fill[y]] = g
            fill[y] += 1
    return offsets, ids


@njit(parallel=True, cache=True)
def composite_forward(offsets, ids, means, conics, opac, colors, xmin, xmax, bg,
                      cutoff_sq, alpha_min, image, alpha_map, final_t, n_contrib):
    height, width = alpha_map.shape
    for y in prange(height):
        py = y + 0.5
        start = offsets[y]
        end = offsets[y + 1]
        for x in range(width):
            px = x + 0.5
            t = 1.0
            r = 0.0
            gr = 0.0
            b = 0.0
            last = start
            for k in range(start, end):
                g = ids[k]
                if x < xmin[g] or x > xmax[g]:
                    continue
                dx = px - means[g, 0]
                dy = py - means[g, 1]
                maha = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                if maha > cutoff_sq:
                    continue
                a = opac[g] * math.exp(-0.5 * maha)
                if a > ALPHA_MAX:
                    a = ALPHA_MAX
                if a < alpha_min:
                    continue
                w = a * t
                r += colors[g, 0] * w
                gr += colors[g, 1] * w
                b += colors[g, 2] * w
                t *= 1.0 - a
                last = k + 1
            image[y, x, 0] = r + t * bg[0]
            image[y, x, 1] = gr + t * bg[1]
            image[y, x, 2] = b + t * bg[2]
            alpha_map[y, x] = 1.0 - t
            final_t[y, x] = t
            n_contrib[y, x] = last


@njit(parallel=True, cache=True)
def composite_backward(offsets, ids, means, conics, opac, colors, xmin, xmax, bg,
                       cutoff_sq, alpha_min, final_t, n_contrib, d_image,
                       g_means, g_conics, g_opac, g_colors):
    """Adjoint of :func:`composite_forward`.

    Rows are split into ``g_means.shape[0]`` contiguous blocks, each with
    its own accumulation buffers; the caller reduces them in block order.
    """
    height, width = final_t.shape
    nblocks = g_means.shape[0]
    for blk in prange(nblocks):
        y0 = blk * height // nblocks
        y1 = (blk + 1) * height // nblocks
        for y in range(y0, y1):
            py = y + 0.5
            start = offsets[y]
            for x in range(width):
                dr = d_image[y, x, 0]
                dg = d_image[y, x, 1]
                db = d_image[y, x, 2]
                if dr == 0.0 and dg == 0.0 and db == 0.0:
                    continue
                px = x + 0.5
                t = final_t[y, x]
                # colour composited behind the current contributor, dotted with dC
                behind = t * (bg[0] * dr + bg[1] * dg + bg[2] * db)
                for k in range(n_contrib[y, x] - 1, start - 1, -1):
                    g = ids[k]
                    if x < xmin[g] or x > xmax[g]:
                        continue
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    maha = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                    if maha > cutoff_sq:
                        continue
                    gauss = math.exp(-0.5 * maha)
                    a = opac[g] * gauss
                    clamped = a > ALPHA_MAX
                    if clamped:
                        a = ALPHA_MAX
                    if a < alpha_min:
                        continue
                    t = t / (1.0 - a)
                    w = a * t
                    g_colors[blk, g, 0] += w * dr
                    g_colors[blk, g, 1] += w * dg
                    g_colors[blk, g, 2] += w * db
                    cdot = colors[g, 0] * dr + colors[g, 1] * dg + colors[g, 2] * db
                    d_alpha = t * cdot - behind / (1.0 - a)
                    behind += w * cdot
                    if clamped:
                        continue
                    g_opac[blk, g] += d_alpha * gauss
                    d_power = d_alpha * a
                    g_means[blk, g, 0] += d_power * (conics[g, 0] * dx + conics[g, 1] * dy)
                    g_means[blk, g, 1] += d_power * (conics[g, 1] * dx + conics[g, 2] * dy)
                    g_conics[blk, g, 0] += -0.5 * d_power * dx * dx
                    g_conics[blk, g, 1] += -d_power * dx * dy
                    g_conics[blk, g, 2] += -0.5 * d_power * dy * dy
