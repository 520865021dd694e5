import math

import pytest

from acda.config import ConfigError, ExperimentConfig
from acda.experiments import (
    ABLATION_ROWS,
    ResultRow,
    RunWriter,
    ablation_configs,
    apply_dataset_flag,
    run_table,
    sweep_configs,
    table_from_logs,
)

from toy import toy_config


def test_ablation_rows():
    rows = ablation_configs(ExperimentConfig())
    assert tuple(rows) == ABLATION_ROWS
    assert rows["source-only"].train.lam == 0.0
    assert not rows["w/o dynamic attention"].variant.use_attention
    assert not rows["w/ same-layer alignment"].variant.use_cross_layer
    assert not rows["w/o label-conditioned alignment"].variant.use_label_conditioning
    assert rows["ACDA"] == ExperimentConfig()


def test_sweep_configs():
    pts = sweep_configs(ExperimentConfig(), "delta", [0, 0.3, 0.5, 0.7, 1.0])
    assert [c.train.delta for _, c in pts] == [0, 0.3, 0.5, 0.7, 1.0]
    assert sweep_configs(ExperimentConfig(), "lambda", [0.2])[0][1].train.lam == 0.2
    for param, grid in (("delta", [0.1, 0.1]), ("delta", [1.5]), ("lr", [0.1]), ("lam", [])):
        with pytest.raises(ConfigError):
            sweep_configs(ExperimentConfig(), param, grid)


def test_stderr():
    assert math.isnan(ResultRow("a", [0.5, 0.6]).stderr)
    row = ResultRow("a", [0.5, 0.6, 0.7])
    assert row.mean == pytest.approx(0.6)
    assert row.stderr == pytest.approx(0.1 / math.sqrt(3))


def test_dataset_flag():
    assert apply_dataset_flag(ExperimentConfig(), "twomoons").data.name == "twomoons"
    assert apply_dataset_flag(ExperimentConfig(), "file:/x.npz").data.path == "/x.npz"
    for bad in ("mnist", "folder:"):
        with pytest.raises(ConfigError):
            apply_dataset_flag(ExperimentConfig(), bad)


def test_table_rebuilt_from_logs(tmp_path):
    cfg = toy_config(epochs_align=1)
    writer = RunWriter(tmp_path, cfg)
    table = run_table([("ACDA", cfg), ("w/o dynamic attention", cfg.with_overrides(variant={"use_attention": False}))],
                      (0,), writer)
    back = table_from_logs(tmp_path)
    assert [r.name for r in back.rows] == ["ACDA", "w/o dynamic attention"]
    assert [r.accuracies for r in back.rows] == [r.accuracies for r in table.rows]
