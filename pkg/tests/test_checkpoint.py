import zipfile

import pytest
import torch

from acda.checkpoint import CheckpointError, load_checkpoint, load_into, read_manifest, save_checkpoint
from acda.data import make_shapes_dataset
from acda.trainer import build_model

from toy import toy_config


@pytest.fixture
def model():
    cfg = toy_config()
    return build_model(cfg, make_shapes_dataset(0, 64, 64), 0)


def test_roundtrip(model, tmp_path):
    p = save_checkpoint(model, tmp_path / "m.ckpt", meta={"seed": 3})
    back, manifest = load_checkpoint(p)
    assert manifest["meta"] == {"seed": 3}
    for (n, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), n
    with zipfile.ZipFile(p) as zf:
        assert "manifest.json" in zf.namelist()


def test_shape_mismatch_names_parameter(model, tmp_path):
    p = save_checkpoint(model, tmp_path / "m.ckpt")
    cfg = toy_config().with_overrides(backbone={"embed_dim": 32})
    other = build_model(cfg, make_shapes_dataset(0, 64, 64), 0)
    with pytest.raises(CheckpointError, match="backbone.embed.weight"):
        load_into(other, p)


def test_not_a_checkpoint(tmp_path):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        read_manifest(junk)
    with pytest.raises(CheckpointError, match="not found"):
        read_manifest(tmp_path / "missing.ckpt")
