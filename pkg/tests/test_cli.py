import csv
import json

import numpy as np
import pytest
from PIL import Image

from acda.cli import main, parse_seeds, ValidationError

from toy import toy_config


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "toy.toml"
    p.write_text(toy_config(epochs_align=1).to_toml())
    return p


def test_parse_seeds():
    assert parse_seeds("3") == (0, 1, 2)
    assert parse_seeds("4,7") == (4, 7)
    for bad in ("x", "0", "1,1", "-1,2"):
        with pytest.raises(ValidationError):
            parse_seeds(bad)


def test_dry_run(cfg_path, capsys):
    assert main(["run", "--config", str(cfg_path), "--dry-run"]) == 0
    assert "[train]" in capsys.readouterr().out


def test_validation_errors_exit_1(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 1
    assert "missing.toml" in capsys.readouterr().err
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\ndelta = 2.0\n")
    assert main(["run", "--config", str(bad), "--dry-run"]) == 1
    assert "train.delta" in capsys.readouterr().err
    pool = tmp_path / "pool.toml"
    pool.write_text('[projection]\nvariant = "pool-only"\n')
    assert main(["run", "--config", str(pool), "--dry-run"]) == 1
    assert main(["sweep", "--param", "delta", "--grid", "0.1,0.1", "--dry-run"]) == 1
    assert main(["run", "--dataset", "folder:" + str(tmp_path / "none"), "--dry-run"]) == 1


def test_runtime_failure_exit_2(tmp_path, monkeypatch):
    from acda import trainer

    def boom(self):
        raise RuntimeError("simulated")

    monkeypatch.setattr(trainer.Trainer, "run", boom)
    p = tmp_path / "toy.toml"
    p.write_text(toy_config().to_toml())
    assert main(["run", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == 2


def test_run_and_embed(cfg_path, tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg_path), "--out-dir", str(out), "--seeds", "0,1"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert "summary.csv" in manifest["artifacts"]
    assert {"run/seed0.jsonl", "run/seed1.ckpt"} <= set(manifest["artifacts"])
    rows = list(csv.DictReader((out / "summary.csv").open()))
    assert rows[0]["seeds"] == "2" and rows[0]["stderr"] == "nan"

    emb = tmp_path / "emb"
    assert main(["embed", "--config", str(cfg_path), "--checkpoint", str(out / "run" / "seed0.ckpt"),
                 "--out-dir", str(emb)]) == 0
    rows = list(csv.reader((emb / "embeddings.csv").open()))
    assert rows[0][:3] == ["domain", "label", "e_1"] and len(rows[0]) == 2 + 64
    assert len(rows) == 1 + 128
    assert main(["embed", "--checkpoint", str(out / "run" / "seed0.ckpt"), "--dataset", "twomoons"]) == 1


def test_sweep_writes_table(cfg_path, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(cfg_path), "--param", "lambda", "--grid", "0.1,0.5",
                 "--out-dir", str(out)]) == 0
    rows = list(csv.DictReader((out / "sweep_lambda.csv").open()))
    assert [r["value"] for r in rows] == ["0.1", "0.5"]


def test_ablation_dry_run(capsys):
    assert main(["ablation", "--dry-run"]) == 0
    out = capsys.readouterr().out
    assert "source-only: lam=0.0" in out and "w/o dynamic attention" in out


def test_ingest(tmp_path):
    rng = np.random.default_rng(0)
    for domain in ("source", "target"):
        for cls in ("a", "b"):
            d = tmp_path / "pair" / domain / cls
            d.mkdir(parents=True)
            for k in range(2):
                Image.fromarray(rng.integers(0, 255, (16, 16), dtype=np.uint8)).save(d / f"{k}.png")
    assert main(["ingest", "--dataset", f"folder:{tmp_path / 'pair'}", "--out-dir", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "dataset.npz").is_file()
    assert main(["ingest", "--dataset", "shapes"]) == 1
