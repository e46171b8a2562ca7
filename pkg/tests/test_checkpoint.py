import json

import numpy as np
import pytest

from tnet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from tnet.gradcheck import tiny_config
from tnet.model import init_encoder, init_loc_head, init_seg_decoder


def test_roundtrip_bit_exact(tmp_path):
    cfg = tiny_config()
    rng = np.random.default_rng(3)
    enc, dec, loc = init_encoder(cfg, rng), init_seg_decoder(cfg, rng), init_loc_head(cfg, rng)
    save_checkpoint(tmp_path, {"encoder": enc, "posterior": loc, "aux": dec}, {"note": "x"})
    manifest, states = load_checkpoint(tmp_path)
    assert manifest["note"] == "x" and manifest["kinds"]["aux"] == "segmentation"
    for orig, role in ((enc, "encoder"), (loc, "posterior"), (dec, "aux")):
        assert states[role].checksum() == orig.checksum()


def test_missing_and_mismatched(tmp_path):
    cfg = tiny_config()
    save_checkpoint(tmp_path, {"encoder": init_encoder(cfg), "posterior": None}, {})
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["model"]["growth_rate"] = 3
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match=r"encoder/block1\.layer0\.w"):
        load_checkpoint(tmp_path)
    with pytest.raises(CheckpointError, match="manifest"):
        load_checkpoint(tmp_path / "nope")
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path, {"posterior": None}, {})
