"""Slow, obviously-correct reference implementations.

These exist only to cross-check the fast paths. None of them share code with
the implementations they verify.
"""

from __future__ import annotations

import math

import numpy as np


def naive_conv2d(x, w, b=None, padding=0):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B, C, H, W = x.shape
    F, _, k, _ = w.shape
    p = padding
    xp = np.zeros((B, C, H + 2 * p, W + 2 * p))
    xp[:, :, p : p + H, p : p + W] = x
    Ho, Wo = H + 2 * p - k + 1, W + 2 * p - k + 1
    out = np.zeros((B, F, Ho, Wo))
    for n in range(B):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else float(b[f])
                    for c in range(C):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[n, c, i + di, j + dj] * w[f, c, di, dj]
                    out[n, f, i, j] = acc
    return out


def windowed_max(x):
    x = np.asarray(x)
    B, C, H, W = x.shape
    out = np.empty((B, C, H // 2, W // 2), dtype=x.dtype)
    for n in range(B):
        for c in range(C):
            for i in range(H // 2):
                for j in range(W // 2):
                    out[n, c, i, j] = max(x[n, c, 2 * i + a, 2 * j + bb] for a in (0, 1) for bb in (0, 1))
    return out


def lattice_shape_map(mask, factor):
    m = np.asarray(mask)
    h, w = m.shape[0] // factor, m.shape[1] // factor
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = m[i * factor, j * factor]
    return out


def brute_distance_to_background(shape_map, metric):
    """O(n^2) nearest-background search; a one-pixel ring outside the image is background."""
    m = np.asarray(shape_map)
    h, w = m.shape
    background = [(i, j) for i in range(-1, h + 1) for j in range(-1, w + 1)
                  if not (0 <= i < h and 0 <= j < w) or m[i, j] == 0]
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            if m[i, j] == 0:
                continue
            if metric == "euclidean":
                best = min((i - a) ** 2 + (j - c) ** 2 for a, c in background)
                out[i, j] = math.sqrt(best)
            else:
                out[i, j] = min(max(abs(i - a), abs(j - c)) for a, c in background)
    return out


def brute_center_map(mask, factor, metric):
    d = brute_distance_to_background(lattice_shape_map(mask, factor), metric)
    return d / d.max()


def dense_contour_map(mask, factor, sigma):
    """Direct 2-d convolution with the full (non-separable form) Gaussian kernel."""
    base = lattice_shape_map(mask, factor)
    r = math.ceil(3 * sigma)
    ker = np.zeros((2 * r + 1, 2 * r + 1))
    for a in range(-r, r + 1):
        for c in range(-r, r + 1):
            ker[a + r, c + r] = math.exp(-(a * a + c * c) / (2 * sigma * sigma))
    ker /= ker.sum()
    h, w = base.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(-r, r + 1):
                for c in range(-r, r + 1):
                    ii, jj = i + a, j + c
                    if 0 <= ii < h and 0 <= jj < w:
                        acc += base[ii, jj] * ker[a + r, c + r]
            out[i, j] = acc
    return out / out.max()


def _boundary_points(mask):
    m = np.asarray(mask)
    h, w = m.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            for a, c in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ii, jj = i + a, j + c
                if not (0 <= ii < h and 0 <= jj < w) or not m[ii, jj]:
                    pts.append((i, j))
                    break
    return pts


def brute_hd95(pred, gt):
    bp, bg = _boundary_points(pred), _boundary_points(gt)
    pooled = []
    for src, dst in ((bp, bg), (bg, bp)):
        for i, j in src:
            pooled.append(math.sqrt(min((i - a) ** 2 + (j - c) ** 2 for a, c in dst)))
    pooled.sort()
    rank = -(-95 * len(pooled) // 100)
    return pooled[rank - 1]
