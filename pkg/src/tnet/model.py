"""Dense-block encoder with a sigmoid bottleneck, plus the two posterior heads.

Encoder layout for the default config (input 1 x H x W)::

    top 3x3 conv -> 16 ch
    dense block 1 (4 x [3x3 conv K=8, ReLU]) -> 48 ch -> 1x1 transition -> f1: 16 ch @ H
    maxpool, dense block 2 -> 1x1 transition -> f2: 32 ch @ H/2
    maxpool, dense block 3 -> 1x1 transition -> f4: 64 ch @ H/4
    bottleneck 1x1 conv -> N ch, sigmoid -> supervision output @ H/4

There is no normalisation layer anywhere.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    concat_channels,
    conv2d,
    linear,
    maxpool2,
    mean,
    relu,
    reshape,
    sigmoid,
    softmax,
    upsample2_nearest,
)

LOC_HEADS = ("softargmax", "gap")


@dataclass(frozen=True)
class ModelConfig:
    growth_rate: int = 8
    bottleneck_channels: int = 4
    level_channels: Tuple[int, int, int] = (16, 32, 64)
    layers_per_block: int = 4
    input_channels: int = 1
    decoder_channels: Tuple[int, int] = (32, 16)
    loc_hidden: int = 32
    loc_head: str = "softargmax"

    def __post_init__(self):
        object.__setattr__(self, "level_channels", tuple(self.level_channels))
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        if self.growth_rate < 1 or self.bottleneck_channels < 1 or self.layers_per_block < 1:
            raise ValueError("growth_rate, bottleneck_channels and layers_per_block must be >= 1")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        lc = self.level_channels
        if len(lc) != 3 or any(c < 1 for c in lc) or not (lc[0] < lc[1] < lc[2]):
            raise ValueError(f"level_channels must be three strictly increasing positive counts, got {lc}")
        if len(self.decoder_channels) != 2 or min(self.decoder_channels) < 1:
            raise ValueError(f"decoder_channels must be two positive counts, got {self.decoder_channels}")
        if self.loc_head not in LOC_HEADS:
            raise ValueError(f"loc_head must be one of {LOC_HEADS}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["level_channels"] = list(self.level_channels)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_json(cls, obj) -> "ModelConfig":
        return cls(**obj)


@dataclass
class ParamState:
    config: ModelConfig
    params: Dict[str, Tensor] = field(default_factory=dict)
    kind: str = "encoder"

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "ParamState":
        """Independent copy with every parameter cast to ``dtype``."""
        return type(self)(self.config, {k: Tensor(v.data.astype(dtype or v.dtype), requires_grad=True)
                                        for k, v in self.params.items()}, self.kind)

    def copy(self) -> "ParamState":
        return self.astype(None)

    def freeze(self) -> "ParamState":
        """Copy whose tensors do not track gradients (shares no buffers with self)."""
        return type(self)(self.config, {k: Tensor(v.data.copy()) for k, v in self.params.items()}, self.kind)


class EncoderState(ParamState):
    pass


class PosteriorState(ParamState):
    pass


def _conv_param(params, name, rng, c_in, c_out, k, dtype, gain=2.0):
    std = np.sqrt(gain / (c_in * k * k))
    params[f"{name}.w"] = Tensor((rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)


def _block_channels(config: ModelConfig):
    lc = config.level_channels
    return [lc[0], lc[0], lc[1]]


def init_encoder(config: ModelConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32) -> EncoderState:
    rng = rng if rng is not None else np.random.default_rng(0)
    params: Dict[str, Tensor] = {}
    K, L = config.growth_rate, config.layers_per_block
    _conv_param(params, "top", rng, config.input_channels, config.level_channels[0], 3, dtype)
    for b, (c_in, c_out) in enumerate(zip(_block_channels(config), config.level_channels), start=1):
        for layer in range(L):
            _conv_param(params, f"block{b}.layer{layer}", rng, c_in + layer * K, K, 3, dtype)
        _conv_param(params, f"trans{b}", rng, c_in + L * K, c_out, 1, dtype)
    _conv_param(params, "bottleneck", rng, config.level_channels[2], config.bottleneck_channels, 1, dtype, gain=1.0)
    return EncoderState(config, params, "encoder")


def _dense_block(state: ParamState, prefix: str, x: Tensor) -> Tensor:
    feats = x
    for layer in range(state.config.layers_per_block):
        name = f"{prefix}.layer{layer}"
        out = relu(conv2d(feats, state[f"{name}.w"], state[f"{name}.b"], padding=1))
        feats = concat_channels(feats, out)
    return feats


def encoder_forward(state: EncoderState, image: Tensor):
    """Returns (f1, f2, f4, supervision_out)."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.data.ndim != 4:
        raise ShapeError(f"encoder expects [B,C,H,W], got {image.shape}")
    _, C, H, W = image.shape
    if C != state.config.input_channels:
        raise ShapeError(f"encoder expects {state.config.input_channels} input channels, got {C}")
    if H % 4 or W % 4:
        raise ShapeError(f"encoder input H and W must be divisible by 4, got {H}x{W}")
    x = conv2d(image, state["top.w"], state["top.b"], padding=1)
    f1 = conv2d(_dense_block(state, "block1", x), state["trans1.w"], state["trans1.b"])
    f2 = conv2d(_dense_block(state, "block2", maxpool2(f1)), state["trans2.w"], state["trans2.b"])
    f4 = conv2d(_dense_block(state, "block3", maxpool2(f2)), state["trans3.w"], state["trans3.b"])
    sup = sigmoid(conv2d(f4, state["bottleneck.w"], state["bottleneck.b"]))
    return f1, f2, f4, sup


# ---------------------------------------------------------------------------
# posterior networks


def init_seg_decoder(config: ModelConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32,
                     zero: bool = False) -> PosteriorState:
    rng = rng if rng is not None else np.random.default_rng(0)
    lc, dc = config.level_channels, config.decoder_channels
    params: Dict[str, Tensor] = {}
    _conv_param(params, "dec2", rng, lc[2] + lc[1], dc[0], 3, dtype)
    _conv_param(params, "dec1", rng, dc[0] + lc[0], dc[1], 3, dtype)
    _conv_param(params, "head", rng, dc[1], config.bottleneck_channels, 1, dtype, gain=1.0)
    state = PosteriorState(config, params, "segmentation")
    if zero:
        for t in state.parameters():
            t.data[...] = 0
    return state


def seg_decoder_forward(state: PosteriorState, f1: Tensor, f2: Tensor, f4: Tensor) -> Tensor:
    lc = state.config.level_channels
    for name, t, c in (("f1", f1, lc[0]), ("f2", f2, lc[1]), ("f4", f4, lc[2])):
        if t.data.ndim != 4 or t.shape[1] != c:
            raise ShapeError(f"decoder input {name} must be [B,{c},h,w], got {t.shape}")
    B, _, H, W = f1.shape
    if f2.shape[0] != B or f4.shape[0] != B or f2.shape[2:] != (H // 2, W // 2) or f4.shape[2:] != (H // 4, W // 4):
        raise ShapeError(f"inconsistent feature shapes {f1.shape}, {f2.shape}, {f4.shape}")
    d2 = concat_channels(upsample2_nearest(f4), f2)
    d2 = relu(conv2d(d2, state["dec2.w"], state["dec2.b"], padding=1))
    d1 = concat_channels(upsample2_nearest(d2), f1)
    d1 = relu(conv2d(d1, state["dec1.w"], state["dec1.b"], padding=1))
    return sigmoid(conv2d(d1, state["head.w"], state["head.b"]))


def init_loc_head(config: ModelConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32,
                  zero: bool = False) -> PosteriorState:
    rng = rng if rng is not None else np.random.default_rng(0)
    params: Dict[str, Tensor] = {}
    _conv_param(params, "loc.conv", rng, config.level_channels[2], config.loc_hidden, 3, dtype)
    if config.loc_head == "softargmax":
        _conv_param(params, "loc.score", rng, config.loc_hidden, 1, 1, dtype, gain=1.0)
    else:
        std = np.sqrt(1.0 / config.loc_hidden)
        params["loc.fc.w"] = Tensor((rng.standard_normal((config.loc_hidden, 2)) * std).astype(dtype), requires_grad=True)
        params["loc.fc.b"] = Tensor(np.zeros(2, dtype=dtype), requires_grad=True)
    state = PosteriorState(config, params, "localization")
    if zero:
        for t in state.parameters():
            t.data[...] = 0
    return state


def cell_centers(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """[h*w, 2] normalised (x, y) centres of the cells of an h x w grid, row-major."""
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([(xs.ravel() + 0.5) / w, (ys.ravel() + 0.5) / h], axis=1).astype(dtype)


def loc_head_forward(state: PosteriorState, f4: Tensor) -> Tensor:
    """Predicted (cx, cy) in normalised image coordinates, inside the unit square.

    ``softargmax``: per-cell scores, spatial softmax, expected cell centre.
    ``gap``: global average pool, affine map, sigmoid.
    """
    c = state.config.level_channels[2]
    if f4.data.ndim != 4 or f4.shape[1] != c:
        raise ShapeError(f"localization head expects [B,{c},h,w], got {f4.shape}")
    B, _, h, w = f4.shape
    hidden = relu(conv2d(f4, state["loc.conv.w"], state["loc.conv.b"], padding=1))
    if state.config.loc_head == "gap":
        pooled = mean(hidden, axis=(2, 3))
        return sigmoid(linear(pooled, state["loc.fc.w"], state["loc.fc.b"]))
    scores = conv2d(hidden, state["loc.score.w"], state["loc.score.b"])
    probs = softmax(reshape(scores, (B, h * w)))
    return probs @ cell_centers(h, w, probs.dtype)


def init_posterior(task: str, config: ModelConfig, rng=None, dtype=np.float32) -> PosteriorState:
    if task == "segmentation":
        return init_seg_decoder(config, rng, dtype)
    if task == "localization":
        return init_loc_head(config, rng, dtype)
    raise ValueError(f"unknown task {task!r}")


def count_parameters(state: ParamState) -> int:
    return int(sum(t.data.size for t in state.params.values()))


def encoder_parameter_count(config: ModelConfig) -> int:
    """Closed form for the encoder parameter count."""
    K, L, cin = config.growth_rate, config.layers_per_block, config.input_channels
    lc = config.level_channels
    total = 9 * cin * lc[0] + lc[0]
    for c_in, c_out in zip(_block_channels(config), lc):
        # sum over layers of 9*(c_in + l*K)*K + K
        total += 9 * K * (L * c_in + K * L * (L - 1) // 2) + L * K
        total += (c_in + L * K) * c_out + c_out
    total += lc[2] * config.bottleneck_channels + config.bottleneck_channels
    return total
