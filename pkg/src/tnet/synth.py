"""Deterministic synthetic (image, mask, centre) triples.

Randomness comes from xoshiro256** seeded through splitmix64, implemented on
Python integers so that every platform produces the same bits. Sample ``i``
draws from its own stream, seeded by ``splitmix64(seed ^ (i + 1) * PHI)``.
Mask rasterisation uses only +, -, *, / and comparisons in double precision.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .io import read_mask_pgm, read_tns, write_mask_pgm, write_tns

MASK64 = (1 << 64) - 1
PHI = 0x9E3779B97F4A7C15
FAMILIES = ("ellipse", "rectangle", "blob")


def splitmix64(state: int) -> Tuple[int, int]:
    """Returns (next_state, output)."""
    state = (state + PHI) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** 1.0."""

    def __init__(self, seed: int):
        sm = seed & MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self.s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normals(self, count: int) -> np.ndarray:
        """Box-Muller pairs; the first uniform is mapped to (0, 1] to keep log finite."""
        out = np.empty(count, dtype=np.float64)
        for i in range(0, count, 2):
            u1 = 1.0 - self.random()
            u2 = self.random()
            r = math.sqrt(-2.0 * math.log(u1))
            out[i] = r * math.cos(2.0 * math.pi * u2)
            if i + 1 < count:
                out[i + 1] = r * math.sin(2.0 * math.pi * u2)
        return out


def sample_stream(seed: int, index: int) -> Xoshiro256:
    return Xoshiro256((seed ^ ((index + 1) * PHI)) & MASK64)


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    count: int = 250
    size: int = 64
    family: str = "ellipse"
    radius_min: float = 5.0
    radius_max: float = 12.0
    noise_sigma: float = 0.15
    fg_mean: float = 0.7
    bg_mean: float = 0.3

    @property
    def margin(self) -> float:
        return self.size / 8

    def validate(self) -> None:
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.size < 8:
            raise ValueError(f"size must be >= 8, got {self.size}")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}; choose from {FAMILIES}")
        if not 1.0 <= self.radius_min <= self.radius_max:
            raise ValueError(f"need 1 <= radius_min <= radius_max, got ({self.radius_min}, {self.radius_max})")
        if 2 * (self.margin + self.radius_max) > self.size - 1:
            raise ValueError(
                f"radius_max={self.radius_max} cannot fit inside a {self.margin:g}-pixel margin "
                f"on a {self.size}x{self.size} image"
            )
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        for name in ("fg_mean", "bg_mean"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj) -> "SynthSpec":
        return cls(**obj)


@dataclass
class Sample:
    image: np.ndarray  # [1, size, size] float32 in [0, 1]
    mask: np.ndarray  # [size, size] uint8
    center: Tuple[float, float]  # (cx, cy) foreground centroid in pixel indices


def _rasterize(spec: SynthSpec, rng: Xoshiro256) -> np.ndarray:
    size, rmax = spec.size, spec.radius_max
    lo, hi = spec.margin + rmax, size - 1 - spec.margin - rmax
    cx = rng.uniform(lo, hi)
    cy = rng.uniform(lo, hi)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    if spec.family == "ellipse":
        a = rng.uniform(spec.radius_min, rmax)
        b = rng.uniform(spec.radius_min, rmax)
        return ((dx / a) * (dx / a) + (dy / b) * (dy / b) <= 1.0).astype(np.uint8)
    if spec.family == "rectangle":
        a = rng.uniform(spec.radius_min, rmax)
        b = rng.uniform(spec.radius_min, rmax)
        return ((np.abs(dx) <= a) & (np.abs(dy) <= b)).astype(np.uint8)
    # blob: union of three discs whose extent stays within radius_max
    mask = np.zeros((size, size), dtype=bool)
    spread = rmax / 4
    rlo = max(spec.radius_min / 2, 1.0)
    rhi = max(rmax / 2, rlo)
    for _ in range(3):
        ox = rng.uniform(-spread, spread)
        oy = rng.uniform(-spread, spread)
        r = rng.uniform(rlo, rhi)
        ex, ey = dx - ox, dy - oy
        mask |= ex * ex + ey * ey <= r * r
    return mask.astype(np.uint8)


def centroid(mask) -> Tuple[float, float]:
    ys, xs = np.nonzero(np.asarray(mask))
    if xs.size == 0:
        raise ValueError("centroid of an empty mask is undefined")
    return float(xs.mean()), float(ys.mean())


def generate_one(spec: SynthSpec, index: int) -> Sample:
    rng = sample_stream(spec.seed, index)
    mask = _rasterize(spec, rng)
    if not mask.any():
        raise RuntimeError(f"sample {index} rasterised to an empty mask")
    img = np.where(mask == 1, spec.fg_mean, spec.bg_mean).astype(np.float64)
    if spec.noise_sigma > 0:
        img = img + spec.noise_sigma * rng.normals(spec.size * spec.size).reshape(spec.size, spec.size)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)[None]
    return Sample(image=img, mask=mask, center=centroid(mask))


def generate(spec: SynthSpec, threads: int = 1) -> List[Sample]:
    spec.validate()
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda i: generate_one(spec, i), range(spec.count)))
    return [generate_one(spec, i) for i in range(spec.count)]


def split(samples: Sequence, train_fraction: float, seed: int = 0):
    """Seeded Fisher-Yates shuffle, then a prefix split."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(samples)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"train_fraction={train_fraction} leaves one side empty for {n} samples")
    order = list(range(n))
    rng = Xoshiro256(seed)
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        order[i], order[j] = order[j], order[i]
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    return train, test


# ---------------------------------------------------------------------------
# on-disk layout: NNNN_img.tns, NNNN_mask.pgm, centers.csv, spec.json


def save_dataset(samples: Sequence[Sample], spec: SynthSpec, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = ["index,cx,cy"]
    for i, s in enumerate(samples):
        write_tns(root / f"{i:04d}_img.tns", s.image)
        write_mask_pgm(root / f"{i:04d}_mask.pgm", s.mask)
        rows.append(f"{i},{s.center[0]!r},{s.center[1]!r}")
    (root / "centers.csv").write_text("\n".join(rows) + "\n")
    (root / "spec.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n")


def load_dataset(root):
    root = Path(root)
    spec_path = root / "spec.json"
    if not spec_path.exists():
        raise FileNotFoundError(f"{root} is not a dataset directory (no spec.json)")
    spec = SynthSpec.from_json(json.loads(spec_path.read_text()))
    lines = (root / "centers.csv").read_text().strip().splitlines()[1:]
    samples = []
    for line in lines:
        idx, cx, cy = line.split(",")
        i = int(idx)
        samples.append(Sample(image=read_tns(root / f"{i:04d}_img.tns"),
                              mask=read_mask_pgm(root / f"{i:04d}_mask.pgm"),
                              center=(float(cx), float(cy))))
    return spec, samples
