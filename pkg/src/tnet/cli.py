"""Command-line entry point.

    tnet [--workspace DIR] [--seed N] [-v] [--threads N] [--config FILE] <command> ...

Commands: synth, genmaps, train, eval, ablation, gradcheck. Paths are relative
to the workspace. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .attention import DEFAULT_FACTOR, DEFAULT_METRIC, DEFAULT_SIGMA, KINDS, METRICS, attention_map
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import check_model, check_ops, summarize, tiny_config
from .io import map_preview, encode_pgm, read_json, read_tns, write_json, write_tns
from .metrics import EvalReport
from .model import LOC_HEADS, ModelConfig
from .synth import FAMILIES, SynthSpec, generate, load_dataset, save_dataset, split
from .trainer import (
    TASKS,
    Data,
    ExperimentSpec,
    RunRecord,
    TrainingDiverged,
    default_grid,
    evaluate,
    run_ablation,
    run_experiment,
    summary_csv,
    summary_text,
)

log = logging.getLogger("tnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _fraction(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {v}")
    return v


# ---------------------------------------------------------------------------
# helpers


def _ws(args) -> Path:
    return Path(args.workspace)


def _load_data(args):
    root = _ws(args) / args.data
    try:
        spec, samples = load_dataset(root)
    except FileNotFoundError as exc:
        raise UsageError(f"{exc}; create it with `tnet synth --out {args.data}`") from None
    if not samples:
        raise UsageError(f"dataset {root} is empty")
    return spec, samples


def _split_indices(n: int, fraction: float, seed: int):
    try:
        train, test = split(list(range(n)), fraction, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return train, test


def _model_config(args) -> ModelConfig:
    return ModelConfig(loc_head=args.loc_head)


def _append_jsonl(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        fh.write(json.dumps(obj, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> List[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _map_all(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# ---------------------------------------------------------------------------
# synth

_DATASET_FILES = ("*_img.tns", "*_mask.pgm", "centers.csv", "spec.json")


def cmd_synth(args) -> int:
    spec = SynthSpec(seed=args.seed, count=args.count, size=args.size, family=args.family,
                     radius_min=args.radius_min, radius_max=args.radius_max, noise_sigma=args.noise_sigma,
                     fg_mean=args.fg_mean, bg_mean=args.bg_mean)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _ws(args) / args.out
    if out.exists() and any(out.iterdir()):
        spec_path = out / "spec.json"
        if spec_path.exists() and read_json(spec_path) == spec.to_json() and not args.force:
            print(f"{out}: up to date ({spec.count} samples)")
            return EXIT_OK
        if not args.force:
            raise UsageError(f"{out} is not empty and holds a different dataset; pass --force to overwrite")
        for pattern in _DATASET_FILES:
            for f in out.glob(pattern):
                f.unlink()
    samples = generate(spec, threads=args.threads)
    save_dataset(samples, spec, out)
    print(f"wrote {len(samples)} samples to {out}")
    print(json.dumps(spec.to_json(), sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# genmaps


def maps_dir(args, kind: str) -> Path:
    return _ws(args) / args.maps / kind


def cmd_genmaps(args) -> int:
    spec, samples = _load_data(args)
    if spec.size % args.factor:
        raise UsageError(f"factor {args.factor} does not divide the image size {spec.size}")
    out = maps_dir(args, args.kind)
    out.mkdir(parents=True, exist_ok=True)
    config = {"kind": args.kind, "factor": args.factor, "sigma": args.sigma, "metric": args.metric,
              "data": args.data, "count": len(samples), "dataset_spec": spec.to_json()}

    def one(i):
        am = attention_map(samples[i].mask, args.kind, args.factor, args.sigma, args.metric)
        write_tns(out / f"{i:04d}_map.tns", am.values)
        if args.preview:
            (out / f"{i:04d}_map.pgm").write_bytes(encode_pgm(map_preview(am.values)))
        return am.status

    statuses = _map_all(one, range(len(samples)), args.threads)
    config["empty_maps"] = [i for i, s in enumerate(statuses) if s != "ok"]
    write_json(out / "config.json", config)
    print(f"wrote {len(samples)} {args.kind} maps to {out}")
    print(json.dumps(config, sort_keys=True))
    return EXIT_OK


def load_maps(args, kind: str, count: int):
    root = maps_dir(args, kind)
    cfg_path = root / "config.json"
    if not cfg_path.exists():
        raise UsageError(f"no {kind} attention maps under {root}; run `tnet genmaps --kind {kind}` first")
    config = read_json(cfg_path)
    if config.get("count") != count:
        raise UsageError(f"{root} holds maps for {config.get('count')} samples but the dataset has {count}; "
                         f"rerun `tnet genmaps --kind {kind}`")
    maps = np.stack([read_tns(root / f"{i:04d}_map.tns") for i in range(count)])
    return config, maps


# ---------------------------------------------------------------------------
# train / eval


def _experiment(args, **override) -> ExperimentSpec:
    enc = args.encoder_epochs if args.epochs is None else args.epochs
    post = args.posterior_epochs if args.epochs is None else args.epochs
    fields = dict(mode=args.mode, supervision=args.supervision, task=args.task, encoder_epochs=enc,
                  posterior_epochs=post, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                  model=_model_config(args))
    fields.update(override)
    spec = ExperimentSpec(**fields)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return spec


def cmd_train(args) -> int:
    if args.supervision is None:
        args.supervision = "none" if args.mode == "baseline" else "shape"
    _experiment(args)  # reject inconsistent flags before touching any files
    dspec, samples = _load_data(args)
    train_idx, test_idx = _split_indices(len(samples), args.train_fraction, args.seed)
    extra, targets, maps_config = {}, None, None
    if args.mode == "tnet":
        maps_config, maps = load_maps(args, args.supervision, len(samples))
        extra = dict(factor=maps_config["factor"], sigma=maps_config["sigma"], metric=maps_config["metric"])
        n_ch = _model_config(args).bottleneck_channels
        targets = np.repeat(maps[train_idx][:, None], n_ch, axis=1)
    spec = _experiment(args, **extra)
    train = Data.from_samples([samples[i] for i in train_idx])
    test = Data.from_samples([samples[i] for i in test_idx])
    name = args.name or f"{spec.mode}-{spec.supervision}-{spec.task}-s{spec.seed}"
    run_dir = _ws(args) / "runs" / name
    echo = {"name": name, "data": args.data, "dataset_spec": dspec.to_json(), "train_fraction": args.train_fraction,
            "split_seed": args.seed, "maps": maps_config}
    try:
        result = run_experiment(spec, train, test, targets=targets)
    except TrainingDiverged as exc:
        record = RunRecord(spec=spec.to_json(), status="diverged", error=str(exc))
        _append_jsonl(_ws(args) / "runs.jsonl", {**record.to_json(), **echo})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    record = result.record
    save_checkpoint(run_dir, {"encoder": result.encoder, "posterior": result.posterior, "aux": result.aux},
                    {"experiment": spec.to_json(), **echo})
    _append_jsonl(_ws(args) / "runs.jsonl", {**record.to_json(), **echo})
    print(f"checkpoint: {run_dir}")
    print(EvalReport.from_json(record.report).table())
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_absolute():
        candidate = _ws(args) / "runs" / ckpt
        ckpt = candidate if candidate.exists() else _ws(args) / ckpt
    try:
        manifest, states = load_checkpoint(ckpt)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    args.data = args.data or manifest["data"]
    _, samples = _load_data(args)
    train_idx, test_idx = _split_indices(len(samples), manifest["train_fraction"], manifest["split_seed"])
    idx = {"train": train_idx, "test": test_idx, "all": list(range(len(samples)))}[args.split]
    if not idx:
        raise UsageError(f"split {args.split!r} of {args.data} is empty")
    task = manifest["experiment"]["task"]
    report = evaluate(states["encoder"], states["posterior"], Data.from_samples([samples[i] for i in idx]), task)
    out = {"checkpoint": str(ckpt), "data": args.data, "split": args.split, "task": task,
           "experiment": manifest["experiment"], "report": report.to_json()}
    print(report.table())
    print(json.dumps(out, sort_keys=True))
    if args.out:
        write_json(_ws(args) / args.out, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablation


def cmd_ablation(args) -> int:
    args.mode, args.supervision, args.task = "tnet", "shape", args.tasks[0]
    base = _experiment(args, factor=args.factor, sigma=args.sigma, metric=args.metric)
    dspec, samples = _load_data(args)
    train_idx, test_idx = _split_indices(len(samples), args.train_fraction, args.seed)
    train = Data.from_samples([samples[i] for i in train_idx])
    test = Data.from_samples([samples[i] for i in test_idx])
    grid = default_grid(base, tasks=args.tasks)
    out = _ws(args) / args.out
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {"base": base.to_json(), "tasks": list(args.tasks), "data": args.data,
                                     "dataset_spec": dspec.to_json(), "train_fraction": args.train_fraction})
    log_path = out / "runs.jsonl"
    wanted = {json.dumps(s.to_json(), sort_keys=True) for s in grid}
    done = [RunRecord.from_json(r) for r in _read_jsonl(log_path)
            if r["status"] == "ok" and json.dumps(r["spec"], sort_keys=True) in wanted]
    skip = {r.cell for r in done}
    if skip:
        print(f"resuming: {len(skip)} completed cell(s) skipped")
    new = run_ablation(grid, train, test, on_record=lambda r: _append_jsonl(log_path, r.to_json()), skip=skip)
    records = done + new
    (out / "summary.csv").write_text(summary_csv(records, args.tasks))
    text = summary_text(records, args.tasks)
    (out / "summary.txt").write_text(text)
    print(text, end="")
    failed = [r for r in new if r.status != "ok"]
    for r in failed:
        print(f"cell {r.cell} failed: {r.error}", file=sys.stderr)
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    seeds = range(args.seed, args.seed + args.seeds)
    results = []
    if args.scope in ("ops", "all"):
        results += check_ops(seeds, inject_fault=args.inject_fault)
    if args.scope in ("model", "all"):
        results += check_model(seeds, tiny_config() if args.tiny else ModelConfig())
    lines = summarize(results)
    print("\n".join(lines))
    if args.out:
        write_json(_ws(args) / args.out, {"scope": args.scope, "seeds": list(seeds), "tiny": args.tiny,
                                          "inject_fault": args.inject_fault,
                                          "results": [r.__dict__ for r in results]})
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser


def _training_flags(p, *, epochs_default=10):
    p.add_argument("--data", default="data", help="dataset directory (default: data)")
    p.add_argument("--encoder-epochs", type=_nonneg_int, default=epochs_default)
    p.add_argument("--posterior-epochs", type=_nonneg_int, default=epochs_default)
    p.add_argument("--epochs", type=_nonneg_int, default=None, help="set both stage epoch counts")
    p.add_argument("--batch-size", type=_positive_int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--train-fraction", type=_fraction, default=0.8)
    p.add_argument("--loc-head", choices=LOC_HEADS, default="softargmax")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tnet", description="Attention-map supervised encoders on synthetic data.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--workspace", default=".", help="root for all relative paths (default: .)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default: 0)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--threads", type=_positive_int, default=1, help="workers for per-sample sections")
    p.add_argument("--config", default=None, help="JSON file of flag defaults; explicit flags win")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", default="data")
    s.add_argument("--count", type=_positive_int, default=250)
    s.add_argument("--size", type=_positive_int, default=64)
    s.add_argument("--family", choices=FAMILIES, default="ellipse")
    s.add_argument("--radius-min", type=float, default=5.0)
    s.add_argument("--radius-max", type=float, default=12.0)
    s.add_argument("--noise-sigma", type=float, default=0.15)
    s.add_argument("--fg-mean", type=float, default=0.7)
    s.add_argument("--bg-mean", type=float, default=0.3)
    s.add_argument("--force", action="store_true", help="overwrite a different existing dataset")
    s.set_defaults(func=cmd_synth)

    g = sub.add_parser("genmaps", help="write attention maps for every mask")
    g.add_argument("--data", default="data")
    g.add_argument("--maps", default="maps", help="maps root; output goes to <maps>/<kind>/")
    g.add_argument("--kind", choices=KINDS, required=True)
    g.add_argument("--factor", type=_positive_int, default=DEFAULT_FACTOR)
    g.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    g.add_argument("--metric", choices=METRICS, default=DEFAULT_METRIC)
    g.add_argument("--preview", action="store_true", help="also write PGM previews")
    g.set_defaults(func=cmd_genmaps)

    t = sub.add_parser("train", help="train one experiment and save a checkpoint")
    _training_flags(t)
    t.add_argument("--maps", default="maps")
    t.add_argument("--mode", choices=("tnet", "baseline"), default="tnet")
    t.add_argument("--supervision", choices=KINDS + ("none",), default=None,
                   help="attention kind (default: shape for tnet, none for baseline)")
    t.add_argument("--task", choices=TASKS, default="segmentation")
    t.add_argument("--name", default=None, help="run name under runs/")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True, help="run name under runs/ or a directory")
    e.add_argument("--data", default=None, help="dataset (default: the one recorded in the checkpoint)")
    e.add_argument("--split", choices=("train", "test", "all"), default="test")
    e.add_argument("--out", default=None, help="also write the JSON report here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablation", help="run the supervision-kind grid")
    _training_flags(a)
    a.add_argument("--tasks", nargs="+", choices=TASKS, default=list(TASKS))
    a.add_argument("--factor", type=_positive_int, default=DEFAULT_FACTOR)
    a.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    a.add_argument("--metric", choices=METRICS, default=DEFAULT_METRIC)
    a.add_argument("--out", default="ablation")
    a.set_defaults(func=cmd_ablation)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--scope", choices=("ops", "model", "all"), default="all")
    c.add_argument("--seeds", type=_positive_int, default=10)
    c.add_argument("--tiny", action="store_true", help="use a small model config for the model checks")
    c.add_argument("--inject-fault", action="store_true", help="add a deliberately wrong gradient")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_gradcheck)
    return p


def _apply_defaults(parser: argparse.ArgumentParser, defaults: dict) -> None:
    """Set defaults on whichever parser (global or per-command) owns each key."""
    own = {a.dest for a in parser._actions}
    parser.set_defaults(**{k: v for k, v in defaults.items() if k in own})
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                _apply_defaults(sub, defaults)


def parse_args(argv: Optional[List[str]]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            defaults = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read --config {args.config}: {exc}") from None
        if not isinstance(defaults, dict):
            raise UsageError("--config must hold a JSON object")
        known = set(vars(args))
        unknown = sorted(set(defaults) - known)
        if unknown:
            raise UsageError(f"--config has unknown keys {unknown}")
        # second pass: config values become defaults, so explicit flags still win
        parser = build_parser()
        _apply_defaults(parser, defaults)
        args = parser.parse_args(argv)
    return args


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # anything else is a runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
