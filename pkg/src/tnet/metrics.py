"""Evaluation metrics: Dice, HD95, the averaged S score, centre distance."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import binary_erosion

from .attention import as_mask, squared_distance_to

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def dice_score(pred_mask, gt_mask) -> float:
    p = as_mask(pred_mask).astype(bool)
    g = as_mask(gt_mask).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"dice_score: shapes {p.shape} and {g.shape} differ")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def boundary(mask) -> np.ndarray:
    """Foreground pixels removed by a 4-connected erosion (outside counts as background)."""
    m = as_mask(mask).astype(bool)
    return m & ~binary_erosion(m, structure=_CROSS, border_value=0)


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return np.sqrt(squared_distance_to(dst)[src].astype(np.float64))


def hausdorff95(pred_mask, gt_mask) -> float:
    """Symmetric 95th-percentile Hausdorff distance in pixels.

    Both directed boundary-to-boundary distance sets are pooled and the
    nearest-rank 95th percentile of the pool is returned.
    """
    p, g = as_mask(pred_mask), as_mask(gt_mask)
    if p.shape != g.shape:
        raise ValueError(f"hausdorff95: shapes {p.shape} and {g.shape} differ")
    if not p.any() or not g.any():
        raise ValueError("hausdorff95 is undefined when either mask is empty "
                         f"(pred has {int(p.sum())} foreground pixels, gt has {int(g.sum())})")
    bp, bg = boundary(p), boundary(g)
    pooled = np.sort(np.concatenate([_directed(bp, bg), _directed(bg, bp)]))
    rank = -(-95 * pooled.size // 100)
    return float(pooled[rank - 1])


def s_score(dice_percent: Sequence[float], hausdorff: Sequence[float]) -> float:
    """Sum over classes of dice/200 - hausdorff/60, dice given in percent."""
    if len(dice_percent) != len(hausdorff):
        raise ValueError("s_score needs one hausdorff value per dice value")
    return float(sum(d / 200.0 for d in dice_percent) - sum(h / 60.0 for h in hausdorff))


def euclidean_distance(pred_center, gt_center) -> float:
    (px, py), (gx, gy) = pred_center, gt_center
    return math.hypot(px - gx, py - gy)


@dataclass
class EvalReport:
    dice: list = field(default_factory=list)
    hausdorff95: list = field(default_factory=list)
    s: Optional[float] = None
    ed: Optional[float] = None
    n: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj) -> "EvalReport":
        return cls(**{k: obj.get(k) for k in ("dice", "hausdorff95", "s", "ed", "n")})

    def table(self) -> str:
        lines = [f"{'metric':<14}{'value':>12}", "-" * 26]
        for i, d in enumerate(self.dice):
            lines.append(f"{'Dice[' + str(i) + '] %':<14}{100 * d:>12.2f}")
        for i, h in enumerate(self.hausdorff95):
            lines.append(f"{'HD95[' + str(i) + ']':<14}{h:>12.2f}")
        if self.s is not None:
            lines.append(f"{'S':<14}{self.s:>12.4f}")
        if self.ed is not None:
            lines.append(f"{'ED (px)':<14}{self.ed:>12.3f}")
        lines.append(f"{'n':<14}{self.n:>12d}")
        return "\n".join(lines)


def segmentation_report(pred_masks, gt_masks) -> EvalReport:
    """Single-class report. An empty prediction gets the image diagonal as its HD95."""
    dices, hds = [], []
    for p, g in zip(pred_masks, gt_masks):
        dices.append(dice_score(p, g))
        if np.asarray(p).any() and np.asarray(g).any():
            hds.append(hausdorff95(p, g))
        else:
            h, w = np.asarray(g).shape
            hds.append(math.hypot(h, w))
    dice = float(np.mean(dices)) if dices else 0.0
    hd = float(np.mean(hds)) if hds else 0.0
    return EvalReport(dice=[dice], hausdorff95=[hd], s=s_score([100 * dice], [hd]), n=len(dices))


def localization_report(pred_centers, gt_centers) -> EvalReport:
    eds = [euclidean_distance(p, g) for p, g in zip(pred_centers, gt_centers)]
    return EvalReport(ed=float(np.mean(eds)) if eds else 0.0, n=len(eds))
