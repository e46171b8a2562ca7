"""Central finite-difference verification of the autodiff engine.

Every check runs in float64. Non-scalar outputs are reduced with a fixed
random projection so that all output elements contribute to the gradient.
A coordinate passes when |analytic - numeric| <= atol or
|analytic - numeric| <= rtol * max(|analytic|, |numeric|).

Coordinates where the function has a kink inside [x - step, x + step] (a ReLU
input or a pooling tie crossing over) have no derivative for the central
difference to estimate. They are detected without looking at the analytic
gradient: the forward and backward one-sided slopes disagree by more than
the tolerance. Such coordinates are skipped, replaced by fresh draws where the
sampling allows it, and counted; a check with more skipped than checked
coordinates fails.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .losses import dice_loss, loc_loss
from .model import (
    ModelConfig,
    encoder_forward,
    init_encoder,
    init_loc_head,
    init_seg_decoder,
    loc_head_forward,
    seg_decoder_forward,
)
from .tensor import Tensor

RTOL = 1e-4
ATOL = 1e-6
STEP = 1e-6


@dataclass
class GradCheckResult:
    name: str
    seed: int
    checked: int
    max_abs_error: float
    max_rel_error: float
    passed: bool
    skipped: int = 0

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} {self.name:<28} seed={self.seed:<3d} n={self.checked:<5d} skipped={self.skipped:<3d} "
                f"max_rel={self.max_rel_error:.3e} max_abs={self.max_abs_error:.3e}")


def _compare(name, seed, analytic, numeric, rtol, atol, skipped=0) -> GradCheckResult:
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    err = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    ok = (err <= atol) | (err <= rtol * scale)
    rel = np.where(scale > atol, err / np.maximum(scale, atol), 0.0)
    passed = bool(ok.all()) and a.size > 0 and skipped <= a.size
    return GradCheckResult(name, seed, int(a.size), float(err.max(initial=0.0)), float(rel.max(initial=0.0)),
                           passed, skipped)


def _probe(value, x, pos, f0, step, rtol, atol):
    """Central difference at ``x[pos]``, or None when a kink lies within the step."""
    orig = x[pos]
    x[pos] = orig + step
    fp = value()
    x[pos] = orig - step
    fm = value()
    x[pos] = orig
    fwd, bwd = (fp - f0) / step, (f0 - fm) / step
    if abs(fwd - bwd) > max(atol, rtol * max(abs(fwd), abs(bwd))):
        return None
    return (fp - fm) / (2 * step)


def check_function(name: str, fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
                   max_coords: Optional[int] = None, rtol: float = RTOL, atol: float = ATOL,
                   step: float = STEP) -> GradCheckResult:
    """Compare backward() of ``fn(*inputs)`` against central differences.

    ``max_coords`` caps the coordinates probed per input (sampled with ``seed``).
    """
    rng = np.random.default_rng((seed, 7))
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    probe = fn(*[Tensor(x) for x in arrays])
    proj = rng.standard_normal(probe.shape) if probe.data.size > 1 else np.ones(probe.shape)

    def scalar(values) -> float:
        return float(np.sum(fn(*[Tensor(v) for v in values]).data * proj))

    leaves = [Tensor(x.copy(), requires_grad=True) for x in arrays]
    out = fn(*leaves)
    T.tsum(T.mul(out, Tensor(proj))).backward()

    f0 = scalar(arrays)
    analytic, numeric, skipped = [], [], 0
    for k, x in enumerate(arrays):
        want = x.size if max_coords is None else min(max_coords, x.size)
        taken = 0
        for idx in rng.permutation(x.size):
            if taken == want:
                break
            pos = np.unravel_index(idx, x.shape)
            num = _probe(lambda: scalar(arrays), x, pos, f0, step, rtol, atol)
            if num is None:
                skipped += 1
                continue
            numeric.append(num)
            analytic.append(leaves[k].grad[pos])
            taken += 1
    return _compare(name, seed, analytic, numeric, rtol, atol, skipped)


def check_state(name: str, forward: Callable[[dict], Tensor], params: Dict[str, np.ndarray], seed: int = 0,
                per_tensor: int = 3, rtol: float = RTOL, atol: float = ATOL,
                step: float = STEP) -> GradCheckResult:
    """Finite-difference sweep over sampled coordinates of every named parameter."""
    rng = np.random.default_rng((seed, 11))
    arrays = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    loss = forward(leaves)
    if loss.data.size != 1:
        raise ValueError("check_state needs a scalar-valued forward")
    loss.backward()

    def value() -> float:
        return float(forward({k: Tensor(v) for k, v in arrays.items()}).data)

    f0 = value()
    analytic, numeric, skipped = [], [], 0
    for k, x in arrays.items():
        taken = 0
        for idx in rng.permutation(x.size):
            if taken == min(per_tensor, x.size):
                break
            pos = np.unravel_index(idx, x.shape)
            num = _probe(value, x, pos, f0, step, rtol, atol)
            if num is None:
                skipped += 1
                continue
            numeric.append(num)
            analytic.append(leaves[k].grad[pos])
            taken += 1
    return _compare(name, seed, analytic, numeric, rtol, atol, skipped)


# ---------------------------------------------------------------------------
# catalogue


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.uniform(-2, 2, size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


def _op_cases(rng) -> Dict[str, tuple]:
    x4 = rng.standard_normal((2, 3, 6, 6))
    return {
        "conv2d_same": (lambda x, w, b: T.conv2d(x, w, b, padding=1),
                        [x4, rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)]),
        "conv2d_valid": (lambda x, w: T.conv2d(x, w, padding=0), [x4, rng.standard_normal((2, 3, 3, 3))]),
        "conv2d_1x1": (lambda x, w, b: T.conv2d(x, w, b), [x4, rng.standard_normal((5, 3, 1, 1)), rng.standard_normal(5)]),
        "maxpool2": (T.maxpool2, [x4]),
        "upsample2_nearest": (T.upsample2_nearest, [rng.standard_normal((2, 3, 3, 4))]),
        "sigmoid": (T.sigmoid, [rng.uniform(-6, 6, (3, 5))]),
        "relu": (T.relu, [_away_from_zero(rng, (3, 5))]),
        "concat_channels": (T.concat_channels, [rng.standard_normal((2, 2, 4, 4)), rng.standard_normal((2, 3, 4, 4))]),
        "add": (T.add, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        "sub": (T.sub, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        "mul": (T.mul, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        "div": (T.div, [rng.standard_normal((3, 4)), rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4))]),
        "sum_axes": (lambda x: T.tsum(x, axis=(2, 3)), [x4]),
        "mean": (T.mean, [x4]),
        "reshape": (lambda x: T.reshape(x, (2, -1)), [x4]),
        "matmul": (T.matmul, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]),
        "linear": (T.linear, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)]),
        "softmax": (T.softmax, [rng.standard_normal((3, 7))]),
        "dice_loss": (dice_loss, [rng.uniform(0.05, 1, (2, 3, 4, 4)), rng.uniform(0, 1, (2, 3, 4, 4))]),
        "loc_loss": (loc_loss, [rng.uniform(0, 1, (4, 2)), rng.uniform(0, 1, (4, 2))]),
    }


OP_NAMES = tuple(_op_cases(np.random.default_rng(0)).keys())


def _faulty_sigmoid(x: Tensor) -> Tensor:
    """Deliberately wrong backward (10% too large); used to prove the harness can fail."""
    s = 1.0 / (1.0 + np.exp(-x.data))

    def grad_fn(g):
        return (1.1 * g * s * (1 - s),)

    return T._record(s, (x,), grad_fn, "faulty_sigmoid")


def check_ops(seeds: Sequence[int] = range(10), names: Optional[Sequence[str]] = None,
              inject_fault: bool = False) -> List[GradCheckResult]:
    results = []
    for seed in seeds:
        rng = np.random.default_rng((seed, 3))
        cases = _op_cases(rng)
        if inject_fault:
            cases["faulty_sigmoid"] = (_faulty_sigmoid, [rng.uniform(-3, 3, (3, 5))])
        for name, (fn, inputs) in cases.items():
            if names is not None and name not in names and name != "faulty_sigmoid":
                continue
            results.append(check_function(name, fn, inputs, seed))
    return results


def tiny_config(**overrides) -> ModelConfig:
    """Small but structurally complete config for 16x16 checks."""
    base = dict(growth_rate=2, bottleneck_channels=2, level_channels=(3, 4, 5), layers_per_block=2,
                decoder_channels=(3, 2), loc_hidden=3)
    base.update(overrides)
    return ModelConfig(**base)


def _prefixed(state, prefix):
    return {f"{prefix}:{k}": v.data for k, v in state.params.items()}


def _split(params, prefix, like):
    return type(like)(like.config, {k.split(":", 1)[1]: v for k, v in params.items() if k.startswith(prefix + ":")},
                      like.kind)


def model_cases(config: Optional[ModelConfig] = None, seed: int = 0, size: int = 16):
    """Scalar-valued model compositions: name -> (forward(params), params)."""
    rng = np.random.default_rng((seed, 5))
    cfg = config or tiny_config()
    enc = init_encoder(cfg, rng, dtype=np.float64)
    dec = init_seg_decoder(cfg, rng, dtype=np.float64)
    head_sa = init_loc_head(cfg, rng, dtype=np.float64)
    cfg_gap = ModelConfig(**{**cfg.to_json(), "loc_head": "gap"})
    head_gap = init_loc_head(cfg_gap, rng, dtype=np.float64)
    # Biases away from zero keep ReLU pre-activations off their kinks.
    for state in (enc, dec, head_sa, head_gap):
        for k, t in state.params.items():
            if k.endswith(".b"):
                t.data[...] = rng.uniform(0.05, 0.2, t.shape)
    img = Tensor(rng.uniform(0, 1, (1, cfg.input_channels, size, size)))
    sup_t = rng.uniform(0, 1, (1, cfg.bottleneck_channels, size // 4, size // 4))
    seg_t = (rng.uniform(0, 1, (1, cfg.bottleneck_channels, size, size)) > 0.5).astype(np.float64)
    ctr = rng.uniform(0.2, 0.8, (1, 2))

    def encoder_only(p):
        *_, sup = encoder_forward(_split(p, "enc", enc), img)
        return dice_loss(sup, sup_t)

    def decoder_only(p):
        f1, f2, f4, _ = encoder_forward(enc.freeze(), img)
        return T.mean(seg_decoder_forward(_split(p, "dec", dec), f1, f2, f4))

    def loc_only(p, head=head_sa):
        *_, f4, _ = encoder_forward(enc.freeze(), img)
        return loc_loss(loc_head_forward(_split(p, "loc", head), f4), ctr)

    def full_segmentation(p):
        f1, f2, f4, _ = encoder_forward(_split(p, "enc", enc), img)
        return dice_loss(seg_decoder_forward(_split(p, "dec", dec), f1, f2, f4), seg_t)

    def full_localization(p):
        f1, f2, f4, _ = encoder_forward(_split(p, "enc", enc), img)
        seg = dice_loss(seg_decoder_forward(_split(p, "dec", dec), f1, f2, f4), seg_t)
        return seg + loc_loss(loc_head_forward(_split(p, "loc", head_sa), f4), ctr)

    return {
        "encoder+dice": (encoder_only, _prefixed(enc, "enc")),
        "seg_decoder_mean": (decoder_only, _prefixed(dec, "dec")),
        "loc_head_softargmax": (loc_only, _prefixed(head_sa, "loc")),
        "loc_head_gap": (lambda p: loc_only(p, head_gap), _prefixed(head_gap, "loc")),
        "encoder+decoder+dice": (full_segmentation, {**_prefixed(enc, "enc"), **_prefixed(dec, "dec")}),
        "encoder+decoder+loc": (full_localization,
                                {**_prefixed(enc, "enc"), **_prefixed(dec, "dec"), **_prefixed(head_sa, "loc")}),
    }


def check_model(seeds: Sequence[int] = range(10), config: Optional[ModelConfig] = None,
                per_tensor: int = 3) -> List[GradCheckResult]:
    results = []
    for seed in seeds:
        for name, (fwd, params) in model_cases(config, seed).items():
            results.append(check_state(name, fwd, params, seed, per_tensor=per_tensor))
    return results


def summarize(results: Sequence[GradCheckResult]) -> List[str]:
    """One line per check name: worst relative error across seeds."""
    by_name: Dict[str, List[GradCheckResult]] = {}
    for r in results:
        by_name.setdefault(r.name, []).append(r)
    lines = []
    for name, rs in by_name.items():
        ok = all(r.passed for r in rs)
        worst = max(r.max_rel_error for r in rs)
        skipped = sum(r.skipped for r in rs)
        checked = sum(r.checked for r in rs)
        lines.append(f"{'PASS' if ok else 'FAIL'} {name:<28} seeds={len(rs):<3d} checked={checked:<5d} "
                     f"skipped={skipped:<3d} max_rel_error={worst:.3e}")
    return lines
