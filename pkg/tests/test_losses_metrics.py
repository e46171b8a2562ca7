import math

import numpy as np
import pytest

from tnet import oracles
from tnet.losses import DICE_EPS, dice_loss, loc_loss
from tnet.metrics import (
    EvalReport,
    dice_score,
    euclidean_distance,
    hausdorff95,
    localization_report,
    s_score,
    segmentation_report,
)
from tnet.tensor import ShapeError, Tensor
from conftest import random_blob_mask


def half_target():
    g = np.zeros((1, 1, 8, 8))
    g[..., :4, :] = 1.0
    return g


# dice loss

def test_dice_loss_half_foreground_hand_value():
    # sum(p*g) = 32*0.5 = 16, sum(p^2) = 64*0.25 = 16, sum(g^2) = 32
    expected = 1.0 - 32.0 / (48.0 + 1e-6)
    got = dice_loss(Tensor(np.full((1, 1, 8, 8), 0.5)), half_target()).item()
    assert abs(got - expected) < 1e-6
    assert got == pytest.approx(1.0 / 3.0, abs=1e-6)


def test_dice_loss_perfect_overlap(rng):
    p = (rng.uniform(size=(3, 4, 8, 8)) > 0.5).astype(np.float64)
    p[:, :, 0, 0] = 1.0
    assert dice_loss(Tensor(p), p).item() < 1e-5


def test_dice_loss_empty_pair_is_one():
    z = np.zeros((2, 3, 4, 4))
    assert dice_loss(Tensor(z), z, eps=1e-6).item() == 1.0


def test_dice_loss_symmetric_bit_exact(rng):
    for _ in range(20):
        p = rng.uniform(size=(2, 4, 8, 8))
        g = rng.uniform(size=(2, 4, 8, 8))
        assert dice_loss(Tensor(p), g).item() == dice_loss(Tensor(g), p).item()


def test_dice_loss_monotone_under_interpolation(rng):
    g = (rng.uniform(size=(2, 4, 8, 8)) > 0.6).astype(np.float64)
    noise = rng.uniform(size=g.shape)
    vals = [dice_loss(Tensor((1 - t) * noise + t * g), g).item() for t in np.linspace(0, 1, 21)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_dice_loss_range_and_shape_errors(rng):
    v = dice_loss(Tensor(rng.uniform(size=(2, 2, 4, 4))), rng.uniform(size=(2, 2, 4, 4))).item()
    assert 0.0 <= v <= 1.0 + DICE_EPS
    with pytest.raises(ShapeError):
        dice_loss(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((1, 2, 4, 4)))


# localization loss

def test_loc_loss_values():
    assert loc_loss(Tensor(np.zeros((1, 2))), np.ones((1, 2))).item() == 1.0
    x = np.array([[0.2, 0.7], [0.1, 0.9]])
    assert loc_loss(Tensor(x), x).item() == 0.0


def test_loc_loss_gradient_formula(rng):
    p = rng.uniform(size=(3, 2))
    t = rng.uniform(size=(3, 2))
    leaf = Tensor(p, requires_grad=True)
    loc_loss(leaf, t).backward()
    assert np.allclose(leaf.grad, 2 * (p - t) / (2 * 3), rtol=1e-12)


# dice score

def test_dice_score_examples():
    g = np.zeros((8, 8), np.uint8)
    g[2:6, 2:6] = 1
    p = np.zeros_like(g)
    p[3:5, 3:5] = 1
    assert dice_score(p, g) == pytest.approx(0.4, abs=1e-15)
    assert dice_score(g, g) == 1.0
    q = np.zeros_like(g)
    q[0, 0] = 1
    assert dice_score(q, g) == 0.0
    assert dice_score(np.zeros_like(g), np.zeros_like(g)) == 1.0


def test_dice_score_in_unit_interval(rng):
    for _ in range(50):
        a, b = random_blob_mask(rng, 12, 12), random_blob_mask(rng, 12, 12)
        assert 0.0 <= dice_score(a, b) <= 1.0


# hausdorff

def test_hd95_identical_and_point_pair(rng):
    m = random_blob_mask(rng, 16, 16, p=0.7)
    m[8, 8] = 1
    assert hausdorff95(m, m) == 0.0
    a = np.zeros((5, 9), np.uint8)
    b = np.zeros((5, 9), np.uint8)
    a[2, 2] = 1
    b[2, 5] = 1
    assert hausdorff95(a, b) == 3.0


def test_hd95_matches_brute_force_and_is_symmetric():
    rng = np.random.default_rng(5)
    done = 0
    while done < 200:
        h, w = rng.integers(2, 33, size=2)
        a = random_blob_mask(rng, h, w, p=rng.uniform(0.3, 0.8), smooth=bool(rng.integers(2)))
        b = random_blob_mask(rng, h, w, p=rng.uniform(0.3, 0.8), smooth=bool(rng.integers(2)))
        if not a.any() or not b.any():
            continue
        assert hausdorff95(a, b) == oracles.brute_hd95(a, b)
        assert hausdorff95(a, b) == hausdorff95(b, a)
        done += 1


def test_hd95_empty_rejected():
    with pytest.raises(ValueError, match="empty"):
        hausdorff95(np.zeros((4, 4), np.uint8), np.ones((4, 4), np.uint8))


# combined score and distances

@pytest.mark.parametrize("dice,hd,expected", [
    ((88.9, 76.7, 71.5), (4.86, 8.20, 4.46), 0.89),
    ((89.6, 79.7, 73.2), (6.97, 9.48, 4.55), 0.86),
    ((88.2, 73.2, 73.0), (8.12, 11.4, 6.17), 0.74),
    ((89.9, 75.1, 71.3), (4.16, 8.65, 6.98), 0.85),
])
def test_s_score_reference_rows(dice, hd, expected):
    assert abs(s_score(dice, hd) - expected) <= 0.005


def test_s_score_exact_and_zero():
    assert s_score((88.9, 76.7, 71.5), (4.86, 8.20, 4.46)) == pytest.approx(0.8935, abs=1e-12)
    assert s_score((0, 0, 0), (0, 0, 0)) == 0.0


def test_euclidean_distance():
    assert euclidean_distance((0, 0), (3, 4)) == 5.0
    assert euclidean_distance((1.5, 2.5), (1.5, 2.5)) == 0.0
    pts = [((0, 0), (3, 4)), ((1, 1), (1, 2))]
    assert localization_report([p for p, _ in pts], [g for _, g in pts]).ed == 3.0


def test_segmentation_report_and_json_roundtrip(rng):
    g = [random_blob_mask(rng, 16, 16, p=0.7) for _ in range(3)]
    for m in g:
        m[8, 8] = 1
    rep = segmentation_report(g, g)
    assert rep.dice == [1.0] and rep.hausdorff95 == [0.0] and rep.s == 0.5 and rep.n == 3
    assert EvalReport.from_json(rep.to_json()) == rep
    empty = segmentation_report([np.zeros((16, 16), np.uint8)], [g[0]])
    assert empty.hausdorff95 == [math.hypot(16, 16)]
    assert "S" in rep.table()
