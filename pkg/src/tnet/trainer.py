"""Training regimes and the supervision ablation.

``tnet`` mode trains the encoder alone against attention maps, then trains a
posterior head on the frozen encoder's features. ``baseline`` mode trains
encoder and decoder jointly from the masks, for the same number of optimizer
steps as the two tnet stages combined.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .attention import DEFAULT_FACTOR, DEFAULT_METRIC, DEFAULT_SIGMA, KINDS, build_supervision
from .losses import dice_loss, loc_loss
from .metrics import EvalReport, localization_report, segmentation_report
from .model import (
    EncoderState,
    ModelConfig,
    PosteriorState,
    encoder_forward,
    init_encoder,
    init_loc_head,
    init_seg_decoder,
    loc_head_forward,
    seg_decoder_forward,
)
from .optim import Adam
from .synth import Sample
from .tensor import Tensor

log = logging.getLogger(__name__)

MODES = ("tnet", "baseline")
SUPERVISION = KINDS + ("none",)
TASKS = ("segmentation", "localization")
ROW_LABELS = {"none": "-", "shape": "Shape-Aware", "contour": "Contour-Aware", "center": "Center-Aware"}
TASK_METRIC = {"segmentation": "Dice", "localization": "ED"}
TASK_ABBREV = {"segmentation": "Seg", "localization": "Loc"}

# stream ids for np.random.default_rng((seed, stream))
_INIT_ENCODER, _SHUFFLE_ENCODER, _INIT_POSTERIOR, _SHUFFLE_POSTERIOR, _INIT_AUX = range(5)


class TrainingDiverged(RuntimeError):
    def __init__(self, stage: str, epoch: int, losses: List[float]):
        super().__init__(f"{stage} loss became non-finite at epoch {epoch} (losses so far: {losses})")
        self.stage, self.epoch, self.losses = stage, epoch, losses


@dataclass(frozen=True)
class ExperimentSpec:
    mode: str = "tnet"
    supervision: str = "shape"
    task: str = "segmentation"
    encoder_epochs: int = 10
    posterior_epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    factor: int = DEFAULT_FACTOR
    sigma: float = DEFAULT_SIGMA
    metric: str = DEFAULT_METRIC
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.supervision not in SUPERVISION:
            raise ValueError(f"supervision must be one of {SUPERVISION}, got {self.supervision!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.mode == "baseline" and self.supervision != "none":
            raise ValueError("baseline mode trains without attention maps; use supervision 'none'")
        if self.mode == "tnet" and self.supervision == "none":
            raise ValueError("tnet mode needs an attention-map supervision kind")
        if self.encoder_epochs < 0 or self.posterior_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1 or not self.lr > 0:
            raise ValueError("batch_size must be >= 1 and lr > 0")

    @property
    def label(self) -> str:
        return f"{self.mode}/{self.supervision}/{self.task}"

    def to_json(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_json()
        return d

    @classmethod
    def from_json(cls, obj) -> "ExperimentSpec":
        obj = dict(obj)
        obj["model"] = ModelConfig.from_json(obj.get("model", {}))
        return cls(**obj)


@dataclass
class Data:
    images: np.ndarray  # [n,1,H,W] float32
    masks: np.ndarray  # [n,H,W] uint8
    centers: np.ndarray  # [n,2] (cx, cy) pixels

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "Data":
        if not samples:
            raise ValueError("no samples")
        return cls(np.stack([s.image for s in samples]).astype(np.float32),
                   np.stack([s.mask for s in samples]).astype(np.uint8),
                   np.array([s.center for s in samples], dtype=np.float64))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def size(self) -> Tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def normalized_centers(self) -> np.ndarray:
        h, w = self.size
        return (self.centers / np.array([w, h])).astype(np.float32)


@dataclass
class RunRecord:
    spec: dict
    encoder_losses: List[float] = field(default_factory=list)
    posterior_losses: List[float] = field(default_factory=list)
    report: Optional[dict] = None
    supervision_test_loss: Optional[float] = None
    encoder_checksum: Optional[str] = None
    posterior_checksum: Optional[str] = None
    steps: int = 0
    wall_time: float = 0.0
    status: str = "ok"
    error: Optional[str] = None
    warnings: List[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj) -> "RunRecord":
        return cls(**obj)

    @property
    def cell(self) -> Tuple[str, str]:
        return self.spec["supervision"], self.spec["task"]


def supervision_targets(data: Data, spec: ExperimentSpec) -> np.ndarray:
    """[n, N, H/f, W/f] attention maps; the single object class feeds every channel."""
    n_ch = spec.model.bottleneck_channels
    return np.stack([build_supervision([m] * n_ch, spec.supervision, spec.factor, spec.sigma, spec.metric).data
                     for m in data.masks])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _check(stage: str, epoch: int, losses: List[float]) -> None:
    if not math.isfinite(losses[-1]):
        raise TrainingDiverged(stage, epoch, losses)


def _fit(params, epochs, n, spec, rng, loss_fn, stage) -> Tuple[List[float], int]:
    opt = Adam(params, lr=spec.lr)
    losses: List[float] = []
    for epoch in range(epochs):
        total = 0.0
        for idx in _batches(n, spec.batch_size, rng):
            loss = loss_fn(idx)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / n)
        _check(stage, epoch, losses)
        log.info("%s epoch %d/%d loss %.5f", stage, epoch + 1, epochs, losses[-1])
    return losses, opt.step_count


def train_encoder(spec: ExperimentSpec, data: Data, targets: Optional[np.ndarray] = None):
    """Deep supervision of the encoder with dice loss against attention maps.

    Returns (encoder, per-epoch losses, optimizer steps).
    """
    spec.validate()
    if spec.mode != "tnet":
        raise ValueError("train_encoder is the tnet stage-1 regime")
    targets = supervision_targets(data, spec) if targets is None else np.asarray(targets, dtype=np.float32)
    encoder = init_encoder(spec.model, np.random.default_rng((spec.seed, _INIT_ENCODER)))
    rng = np.random.default_rng((spec.seed, _SHUFFLE_ENCODER))

    def loss_fn(idx):
        *_, sup = encoder_forward(encoder, Tensor(data.images[idx]))
        return dice_loss(sup, targets[idx])

    losses, steps = _fit(encoder.parameters(), spec.encoder_epochs, len(data), spec, rng, loss_fn, "encoder")
    return encoder, losses, steps


def extract_features(encoder: EncoderState, images: np.ndarray, batch_size: int = 16):
    """Multi-level features and supervision output, computed without a graph."""
    frozen = encoder.freeze()
    outs = [[], [], [], []]
    for start in range(0, len(images), batch_size):
        for acc, t in zip(outs, encoder_forward(frozen, Tensor(images[start : start + batch_size]))):
            acc.append(t.data)
    return tuple(np.concatenate(o) for o in outs)


def segmentation_targets(data: Data, n_ch: int) -> np.ndarray:
    return np.repeat(data.masks[:, None].astype(np.float32), n_ch, axis=1)


def train_posterior(spec: ExperimentSpec, encoder: EncoderState, data: Data, features=None):
    """Train the task head on frozen encoder features.

    Returns (posterior, per-epoch losses, optimizer steps). The encoder is
    never touched: features are computed once from a frozen copy.
    """
    spec.validate()
    before = encoder.checksum()
    f1, f2, f4, _ = extract_features(encoder, data.images) if features is None else features
    rng_init = np.random.default_rng((spec.seed, _INIT_POSTERIOR))
    rng = np.random.default_rng((spec.seed, _SHUFFLE_POSTERIOR))
    if spec.task == "segmentation":
        head = init_seg_decoder(spec.model, rng_init)
        target = segmentation_targets(data, spec.model.bottleneck_channels)

        def loss_fn(idx):
            out = seg_decoder_forward(head, Tensor(f1[idx]), Tensor(f2[idx]), Tensor(f4[idx]))
            return dice_loss(out, target[idx])
    else:
        head = init_loc_head(spec.model, rng_init)
        target = data.normalized_centers()

        def loss_fn(idx):
            return loc_loss(loc_head_forward(head, Tensor(f4[idx])), target[idx])

    losses, steps = _fit(head.parameters(), spec.posterior_epochs, len(data), spec, rng, loss_fn, "posterior")
    if encoder.checksum() != before:
        raise RuntimeError("encoder parameters changed during posterior training")
    return head, losses, steps


def train_baseline(spec: ExperimentSpec, data: Data):
    """Joint encoder-decoder training from the masks, no attention maps.

    For localization the mask decoder is kept as a second loss next to the
    coordinate head, so the encoder still learns from pixel annotations.
    Returns (encoder, posterior, aux_decoder_or_None, losses, steps).
    """
    spec.validate()
    if spec.mode != "baseline":
        raise ValueError("train_baseline needs mode 'baseline'")
    encoder = init_encoder(spec.model, np.random.default_rng((spec.seed, _INIT_ENCODER)))
    rng = np.random.default_rng((spec.seed, _SHUFFLE_ENCODER))
    n_ch = spec.model.bottleneck_channels
    seg_target = segmentation_targets(data, n_ch)
    if spec.task == "segmentation":
        head = init_seg_decoder(spec.model, np.random.default_rng((spec.seed, _INIT_POSTERIOR)))
        aux = None
        params = encoder.parameters() + head.parameters()

        def loss_fn(idx):
            f1, f2, f4, _ = encoder_forward(encoder, Tensor(data.images[idx]))
            return dice_loss(seg_decoder_forward(head, f1, f2, f4), seg_target[idx])
    else:
        head = init_loc_head(spec.model, np.random.default_rng((spec.seed, _INIT_POSTERIOR)))
        aux = init_seg_decoder(spec.model, np.random.default_rng((spec.seed, _INIT_AUX)))
        loc_target = data.normalized_centers()
        params = encoder.parameters() + aux.parameters() + head.parameters()

        def loss_fn(idx):
            f1, f2, f4, _ = encoder_forward(encoder, Tensor(data.images[idx]))
            seg = dice_loss(seg_decoder_forward(aux, f1, f2, f4), seg_target[idx])
            return seg + loc_loss(loc_head_forward(head, f4), loc_target[idx])

    epochs = spec.encoder_epochs + spec.posterior_epochs
    losses, steps = _fit(params, epochs, len(data), spec, rng, loss_fn, "baseline")
    return encoder, head, aux, losses, steps


# ---------------------------------------------------------------------------
# evaluation


def predict(encoder: EncoderState, head: PosteriorState, images: np.ndarray, task: str, batch_size: int = 16):
    """Binary masks [n,H,W] (channel 0 > 0.5) or pixel centres [n,2]."""
    f1, f2, f4, _ = extract_features(encoder, images, batch_size)
    frozen = head.freeze()
    outs = []
    for s in range(0, len(images), batch_size):
        sl = slice(s, s + batch_size)
        if task == "segmentation":
            out = seg_decoder_forward(frozen, Tensor(f1[sl]), Tensor(f2[sl]), Tensor(f4[sl])).data
            outs.append((out[:, 0] > 0.5).astype(np.uint8))
        else:
            outs.append(loc_head_forward(frozen, Tensor(f4[sl])).data.astype(np.float64))
    out = np.concatenate(outs)
    if task == "localization":
        h, w = images.shape[2:]
        out = out * np.array([w, h])
    return out


def evaluate(encoder: EncoderState, head: PosteriorState, data: Data, task: str) -> EvalReport:
    pred = predict(encoder, head, data.images, task)
    if task == "segmentation":
        return segmentation_report(list(pred), list(data.masks))
    return localization_report([tuple(p) for p in pred], [tuple(c) for c in data.centers])


def supervision_loss(encoder: EncoderState, data: Data, spec: ExperimentSpec) -> float:
    *_, sup = extract_features(encoder, data.images)
    return dice_loss(Tensor(sup), supervision_targets(data, spec)).item()


def trend_warnings(losses: Sequence[float], window: int = 10) -> List[str]:
    """Flags any rise of the moving-average loss; empty when the trend is monotone."""
    if len(losses) < window + 1:
        return []
    ma = np.convolve(np.asarray(losses, dtype=np.float64), np.ones(window) / window, mode="valid")
    rises = [i for i in range(1, len(ma)) if ma[i] > ma[i - 1]]
    return [f"{window}-epoch moving average rose at epoch {i + window}" for i in rises]


# ---------------------------------------------------------------------------
# whole runs and the ablation grid


@dataclass
class RunResult:
    record: RunRecord
    encoder: Optional[EncoderState] = None
    posterior: Optional[PosteriorState] = None
    aux: Optional[PosteriorState] = None


def _encoder_key(spec: ExperimentSpec):
    return (spec.supervision, spec.seed, spec.encoder_epochs, spec.batch_size, spec.lr, spec.factor,
            spec.sigma, spec.metric, spec.model)


def run_experiment(spec: ExperimentSpec, train: Data, test: Data, encoder_cache: Optional[dict] = None,
                   targets: Optional[np.ndarray] = None) -> RunResult:
    spec.validate()
    t0 = time.perf_counter()
    record = RunRecord(spec=spec.to_json())
    if spec.mode == "tnet":
        key = _encoder_key(spec)
        if encoder_cache is not None and key in encoder_cache:
            encoder, enc_losses, enc_steps = encoder_cache[key]
        else:
            encoder, enc_losses, enc_steps = train_encoder(spec, train, targets)
            if encoder_cache is not None:
                encoder_cache[key] = (encoder, enc_losses, enc_steps)
        head, post_losses, post_steps = train_posterior(spec, encoder, train)
        aux = None
        record.encoder_losses, record.posterior_losses = list(enc_losses), list(post_losses)
        record.steps = enc_steps + post_steps
        record.supervision_test_loss = supervision_loss(encoder, test, spec)
        record.warnings = trend_warnings(enc_losses) + trend_warnings(post_losses)
    else:
        encoder, head, aux, losses, steps = train_baseline(spec, train)
        record.posterior_losses = list(losses)
        record.steps = steps
        record.warnings = trend_warnings(losses)
    record.report = evaluate(encoder, head, test, spec.task).to_json()
    record.encoder_checksum = encoder.checksum()
    record.posterior_checksum = head.checksum()
    record.wall_time = time.perf_counter() - t0
    return RunResult(record, encoder, head, aux)


def default_grid(base: ExperimentSpec, tasks: Iterable[str] = TASKS,
                 kinds: Iterable[str] = ("none",) + KINDS) -> List[ExperimentSpec]:
    from dataclasses import replace

    grid = []
    for kind in kinds:
        for task in tasks:
            mode = "baseline" if kind == "none" else "tnet"
            grid.append(replace(base, mode=mode, supervision=kind, task=task))
    return grid


def run_ablation(grid: Sequence[ExperimentSpec], train: Data, test: Data,
                 on_record: Optional[Callable[[RunRecord], None]] = None,
                 skip: Iterable[Tuple[str, str]] = ()) -> List[RunRecord]:
    """One RunRecord per grid cell; failures are recorded and the grid continues."""
    skip = set(skip)
    cache: Dict = {}
    records = []
    for spec in grid:
        if (spec.supervision, spec.task) in skip:
            continue
        try:
            record = run_experiment(spec, train, test, cache).record
        except Exception as exc:  # one bad cell must not sink the grid
            log.exception("cell %s failed", spec.label)
            record = RunRecord(spec=spec.to_json(), status="failed", error=f"{type(exc).__name__}: {exc}")
        records.append(record)
        if on_record is not None:
            on_record(record)
    return records


def summary_rows(records: Sequence[RunRecord], tasks: Sequence[str] = TASKS):
    """Rows in the order (-, Shape, Contour, Center); cells are the task metric or None."""
    by_cell = {r.cell: r for r in records}
    rows = []
    for kind in ("none",) + KINDS:
        row = [ROW_LABELS[kind]]
        for task in tasks:
            r = by_cell.get((kind, task))
            if r is None or r.status != "ok" or r.report is None:
                row.append(None)
            elif task == "segmentation":
                row.append(r.report["dice"][0])
            else:
                row.append(r.report["ed"])
        rows.append(row)
    return rows


def summary_csv(records, tasks=TASKS) -> str:
    header = ["attention_map"] + [f"{t}_{TASK_METRIC[t].lower()}" for t in tasks]
    lines = [",".join(header)]
    for row in summary_rows(records, tasks):
        lines.append(",".join([row[0]] + ["" if v is None else f"{v:.6f}" for v in row[1:]]))
    return "\n".join(lines) + "\n"


def summary_text(records, tasks=TASKS) -> str:
    cols = [f"{TASK_ABBREV[t]} {TASK_METRIC[t]}" for t in tasks]
    lines = [f"{'Attention Map':<16}" + "".join(f"{c:>14}" for c in cols), "-" * (16 + 14 * len(cols))]
    for row in summary_rows(records, tasks):
        cells = []
        for task, v in zip(tasks, row[1:]):
            if v is None:
                cells.append(f"{'n/a':>14}")
            elif task == "segmentation":
                cells.append(f"{v:>14.4f}")
            else:
                cells.append(f"{v:>14.2f}")
        lines.append(f"{row[0]:<16}" + "".join(cells))
    return "\n".join(lines) + "\n"
