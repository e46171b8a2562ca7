import json

import numpy as np
import pytest

from tnet.cli import main
from tnet.gradcheck import OP_NAMES
from tnet.io import read_tns, write_tns

SMALL = ["synth", "--count", "20", "--size", "32", "--radius-min", "3", "--radius-max", "6"]


def run(ws, *argv):
    return main(["--workspace", str(ws), *argv])


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    assert run(root, *SMALL) == 0
    for kind in ("shape", "center"):
        assert run(root, "genmaps", "--kind", kind, "--preview") == 0
    return root


def test_synth_idempotent_and_deterministic(ws, tmp_path):
    before = snapshot(ws / "data")
    assert run(ws, *SMALL) == 0
    assert snapshot(ws / "data") == before
    assert run(tmp_path, *SMALL) == 0
    assert snapshot(tmp_path / "data") == before
    rows = (ws / "data" / "centers.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 20


def test_synth_usage_errors(tmp_path, capsys):
    assert run(tmp_path, "synth", "--count", "0") == 1
    assert run(tmp_path, *SMALL) == 0
    assert run(tmp_path, "--seed", "3", *SMALL) == 1
    assert "--force" in capsys.readouterr().err
    assert run(tmp_path, "--seed", "3", *SMALL, "--force") == 0
    assert json.loads((tmp_path / "data" / "spec.json").read_text())["seed"] == 3


def test_genmaps_outputs(ws, capsys):
    maps = [read_tns(ws / "maps" / "shape" / f"{i:04d}_map.tns") for i in range(20)]
    assert all(m.shape == (8, 8) and set(np.unique(m)) <= {0.0, 1.0} for m in maps)
    assert (ws / "maps" / "shape" / "0000_map.pgm").exists()
    cfg = json.loads((ws / "maps" / "center" / "config.json").read_text())
    assert cfg["metric"] == "chebyshev" and cfg["factor"] == 4 and cfg["count"] == 20
    before = snapshot(ws / "maps")
    assert run(ws, "genmaps", "--kind", "shape", "--preview") == 0
    assert run(ws, "--threads", "3", "genmaps", "--kind", "center", "--preview") == 0
    assert snapshot(ws / "maps") == before


def test_genmaps_usage_errors(ws, capsys):
    assert run(ws, "genmaps", "--kind", "edges") == 1
    err = capsys.readouterr().err
    assert "shape" in err and "contour" in err and "center" in err
    assert run(ws, "genmaps", "--kind", "shape", "--factor", "3") == 1
    assert run(ws, "genmaps", "--kind", "shape", "--data", "nowhere") == 1


def test_train_and_eval(ws, capsys):
    assert run(ws, "train", "--mode", "baseline", "--supervision", "shape") == 1
    assert run(ws, "train", "--supervision", "contour", "--epochs", "1") == 1
    assert "genmaps" in capsys.readouterr().err
    assert run(ws, "train", "--supervision", "center", "--task", "localization", "--epochs", "0",
               "--name", "noop") == 0
    assert run(ws, "train", "--supervision", "shape", "--epochs", "1", "--name", "seg") == 0
    lines = (ws / "runs.jsonl").read_text().splitlines()
    recs = [json.loads(x) for x in lines]
    assert [r["name"] for r in recs][-2:] == ["noop", "seg"]
    assert recs[-2]["encoder_losses"] == [] and recs[-1]["status"] == "ok"
    manifest = json.loads((ws / "runs" / "seg" / "manifest.json").read_text())
    assert manifest["experiment"]["supervision"] == "shape" and "encoder/top.w" in manifest["tensors"]
    capsys.readouterr()
    assert run(ws, "eval", "--checkpoint", "seg", "--split", "test", "--out", "e1.json") == 0
    first = capsys.readouterr().out
    assert run(ws, "eval", "--checkpoint", "seg", "--split", "test", "--out", "e2.json") == 0
    assert capsys.readouterr().out == first
    assert (ws / "e1.json").read_bytes() == (ws / "e2.json").read_bytes()
    report = json.loads((ws / "e1.json").read_text())["report"]
    assert report["n"] == 4 and 0 <= report["dice"][0] <= 1
    assert run(ws, "eval", "--checkpoint", "seg", "--split", "all") == 0


def test_eval_shape_mismatch_names_tensor(ws, tmp_path, capsys):
    import shutil

    bad = tmp_path / "bad"
    shutil.copytree(ws / "runs" / "seg", bad)
    write_tns(bad / "encoder__trans2.w.tns", np.zeros((3, 3, 1, 1), np.float32))
    assert run(ws, "eval", "--checkpoint", str(bad)) == 2
    assert "encoder/trans2.w" in capsys.readouterr().err


def test_eval_empty_dataset(ws, tmp_path):
    empty = ws / "empty"
    empty.mkdir(exist_ok=True)
    (empty / "spec.json").write_text((ws / "data" / "spec.json").read_text())
    (empty / "centers.csv").write_text("index,cx,cy\n")
    assert run(ws, "eval", "--checkpoint", "seg", "--data", "empty") == 1


def test_ablation_restrict_and_resume(ws, capsys):
    assert run(ws, "ablation", "--epochs", "1", "--tasks", "localization", "--out", "abl") == 0
    out = capsys.readouterr().out
    for label in ("Shape-Aware", "Contour-Aware", "Center-Aware"):
        assert label in out
    assert "Dice" not in out and "ED" in out
    csv = (ws / "abl" / "summary.csv").read_text().splitlines()
    assert csv[0] == "attention_map,localization_ed" and len(csv) == 5
    n_lines = len((ws / "abl" / "runs.jsonl").read_text().splitlines())
    assert n_lines == 4
    assert run(ws, "ablation", "--epochs", "1", "--tasks", "localization", "--out", "abl") == 0
    assert "4 completed" in capsys.readouterr().out
    assert len((ws / "abl" / "runs.jsonl").read_text().splitlines()) == n_lines
    assert (ws / "abl" / "summary.csv").read_text().splitlines() == csv


def test_gradcheck_cli(tmp_path, capsys):
    assert run(tmp_path, "gradcheck", "--scope", "ops", "--seeds", "1", "--out", "gc.json") == 0
    out = capsys.readouterr().out
    for name in OP_NAMES:
        assert name in out
    assert "max_rel_error" in out
    assert run(tmp_path, "gradcheck", "--scope", "ops", "--seeds", "1", "--inject-fault") == 2
    assert "FAIL faulty_sigmoid" in capsys.readouterr().out


def test_config_file_defaults(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"count": 5, "size": 32, "radius_min": 3, "radius_max": 6, "seed": 9}))
    assert main(["--workspace", str(tmp_path), "--config", str(cfg), "synth"]) == 0
    spec = json.loads((tmp_path / "data" / "spec.json").read_text())
    assert spec["count"] == 5 and spec["seed"] == 9
    assert main(["--workspace", str(tmp_path), "--config", str(cfg), "--seed", "2", "synth", "--count", "6",
                 "--out", "d2"]) == 0
    spec = json.loads((tmp_path / "d2" / "spec.json").read_text())
    assert spec["count"] == 6 and spec["seed"] == 2
    cfg.write_text(json.dumps({"nope": 1}))
    assert main(["--workspace", str(tmp_path), "--config", str(cfg), "synth"]) == 1


def test_missing_command_is_usage_error():
    assert main([]) == 1
