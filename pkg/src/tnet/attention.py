"""Attention maps derived from binary masks.

Three transforms, all applied at the (downsampled) map resolution:

* shape:   nearest-neighbour lattice sampling of the mask, values in {0, 1}
* contour: shape map blurred with a unit-sum Gaussian, rescaled to max 1
* center:  distance to the nearest background pixel, divided by its maximum

Pixels outside the image count as background for the distance transform.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.ndimage import correlate1d

from .tensor import Tensor

KINDS = ("shape", "contour", "center")
METRICS = ("euclidean", "chebyshev")

DEFAULT_FACTOR = 4
DEFAULT_SIGMA = 2.0
DEFAULT_METRIC = "chebyshev"


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionMap:
    kind: str
    values: np.ndarray
    factor: int
    metric: Optional[str] = None
    sigma: Optional[float] = None
    status: str = "ok"

    @property
    def shape(self):
        return self.values.shape


def as_mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {m.shape}")
    if m.dtype == bool:
        return m.astype(np.uint8)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    return m.astype(np.uint8)


def _check_factor(shape, factor: int) -> None:
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor!r}")
    h, w = shape
    if h % factor or w % factor:
        raise ValueError(f"mask size {h}x{w} is not divisible by factor {factor}")


def downsample_nearest(mask, factor: int) -> np.ndarray:
    m = as_mask(mask)
    _check_factor(m.shape, factor)
    return m[::factor, ::factor].copy()


# ---------------------------------------------------------------------------
# distance transforms


def _column_distance(seeds: np.ndarray) -> np.ndarray:
    """Distance along each column to the nearest seed; -1 where a column has none."""
    h, w = seeds.shape
    rows = np.arange(h)[:, None]
    big = 4 * (h + w) + 4
    last = np.where(seeds, rows, -big)
    last = np.maximum.accumulate(last, axis=0)
    nxt = np.where(seeds, rows, 2 * big)
    nxt = np.minimum.accumulate(nxt[::-1], axis=0)[::-1]
    d = np.minimum(rows - last, nxt - rows)
    return np.where(d >= big, -1, d)


def _lower_envelope_row(f: Sequence[int], out: np.ndarray) -> None:
    """Exact 1-d squared distance transform of sampled function f (None = +inf)."""
    n = len(f)
    sites = [q for q in range(n) if f[q] is not None]
    if not sites:
        out[:] = -1
        return
    v = [sites[0]]
    z = [-math.inf, math.inf]
    for q in sites[1:]:
        while True:
            r = v[-1]
            s = ((f[q] + q * q) - (f[r] + r * r)) / (2 * q - 2 * r)
            if s <= z[-2] and len(v) > 1:
                v.pop()
                z.pop()
                continue
            break
        v.append(q)
        z[-1] = s
        z.append(math.inf)
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        r = v[k]
        out[q] = (q - r) * (q - r) + f[r]


def squared_distance_to(seeds) -> np.ndarray:
    """Exact squared Euclidean distance from every pixel to the nearest seed.

    Returns -1 everywhere if there are no seeds. Integer output.
    """
    s = np.asarray(seeds, dtype=bool)
    h, w = s.shape
    col = _column_distance(s)
    out = np.empty((h, w), dtype=np.int64)
    for i in range(h):
        f = [None if c < 0 else int(c) * int(c) for c in col[i]]
        _lower_envelope_row(f, out[i])
    return out


def chebyshev_distance_to(seeds) -> np.ndarray:
    """Chessboard distance to the nearest seed via two raster passes; -1 if no seeds."""
    s = np.asarray(seeds, dtype=bool)
    h, w = s.shape
    if not s.any():
        return np.full((h, w), -1, dtype=np.int64)
    inf = h + w + 2
    d = np.where(s, 0, inf).astype(np.int64)
    cols = np.arange(w)
    for sweep in range(2):
        rows = range(h) if sweep == 0 else range(h - 1, -1, -1)
        prev = None
        for i in rows:
            row = d[i]
            if prev is not None:
                up = prev + 1
                row = np.minimum(row, up)
                row[1:] = np.minimum(row[1:], up[:-1])
                row[:-1] = np.minimum(row[:-1], up[1:])
            # left-to-right and right-to-left chains within the row
            row = np.minimum(row, np.minimum.accumulate(row - cols) + cols)
            rr = row[::-1]
            row = np.minimum(row, (np.minimum.accumulate(rr - cols) + cols)[::-1])
            d[i] = row
            prev = row
    return d


def distance_to_background(shape_map, metric: str = DEFAULT_METRIC) -> np.ndarray:
    """Per-pixel distance to the nearest background pixel, border counted as background."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    m = as_mask(shape_map)
    padded = np.pad(m, 1, constant_values=0)
    bg = padded == 0
    if metric == "euclidean":
        d = np.sqrt(squared_distance_to(bg).astype(np.float64))
    else:
        d = chebyshev_distance_to(bg).astype(np.float64)
    return d[1:-1, 1:-1]


# ---------------------------------------------------------------------------
# maps


def shape_map(mask, factor: int = DEFAULT_FACTOR) -> AttentionMap:
    values = downsample_nearest(mask, factor).astype(np.float64)
    return AttentionMap("shape", values, factor)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def contour_map(mask, factor: int = DEFAULT_FACTOR, sigma: float = DEFAULT_SIGMA) -> AttentionMap:
    base = downsample_nearest(mask, factor).astype(np.float64)
    k = gaussian_kernel1d(sigma)
    blurred = correlate1d(base, k, axis=0, mode="constant", cval=0.0)
    blurred = correlate1d(blurred, k, axis=1, mode="constant", cval=0.0)
    peak = blurred.max()
    if peak <= 0:
        warnings.warn("contour map of an empty mask is all zeros; normalization skipped", RuntimeWarning)
        return AttentionMap("contour", np.zeros_like(base), factor, sigma=sigma, status="empty")
    return AttentionMap("contour", blurred / peak, factor, sigma=sigma)


def center_map(mask, factor: int = DEFAULT_FACTOR, metric: str = DEFAULT_METRIC) -> AttentionMap:
    base = downsample_nearest(mask, factor)
    if not base.any():
        raise EmptyMaskError(
            f"center map needs at least one foreground pixel after downsampling by {factor} "
            f"(mask {np.asarray(mask).shape} has {int(np.asarray(mask).sum())} foreground pixels)"
        )
    d = distance_to_background(base, metric)
    return AttentionMap("center", d / d.max(), factor, metric=metric)


def attention_map(mask, kind: str, factor: int = DEFAULT_FACTOR, sigma: float = DEFAULT_SIGMA,
                  metric: str = DEFAULT_METRIC) -> AttentionMap:
    if kind == "shape":
        return shape_map(mask, factor)
    if kind == "contour":
        return contour_map(mask, factor, sigma)
    if kind == "center":
        return center_map(mask, factor, metric)
    raise ValueError(f"unknown attention kind {kind!r}; choose from {', '.join(KINDS)}")


def build_supervision(masks: Sequence, kinds: Union[str, Sequence[str]], factor: int = DEFAULT_FACTOR,
                      sigma: float = DEFAULT_SIGMA, metric: str = DEFAULT_METRIC) -> Tensor:
    """Stack one attention map per mask into an [N, H/f, W/f] float32 tensor.

    Channel t is the transform of ``masks[t]``, matching bottleneck channel t.
    """
    masks = [as_mask(m) for m in masks]
    if not masks:
        raise ValueError("build_supervision needs at least one mask")
    shape = masks[0].shape
    for i, m in enumerate(masks):
        if m.shape != shape:
            raise ValueError(f"mask {i} has shape {m.shape}, expected {shape}")
    if isinstance(kinds, str):
        kinds = [kinds] * len(masks)
    if len(kinds) != len(masks):
        raise ValueError(f"got {len(kinds)} kinds for {len(masks)} masks")
    maps = [attention_map(m, k, factor, sigma, metric).values for m, k in zip(masks, kinds)]
    return Tensor(np.stack(maps).astype(np.float32))
