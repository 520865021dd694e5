import json
import math

import numpy as np
import pytest
import torch

from acda.attention import uniform_attention
from acda.data import DomainPairDataset, make_shapes_dataset
from acda.kernels import KernelSpec
from acda.trainer import NonFiniteLossError, RunRecord, Trainer, _batches, evaluate

import oracles
from toy import toy_config


@pytest.fixture(scope="module")
def data():
    return make_shapes_dataset(0, 64, 64)


def test_batches_cover_each_index_once_per_pass():
    rng = np.random.default_rng(0)
    idx = np.concatenate(_batches(10, 5, 4, rng))
    assert len(idx) == 20
    assert sorted(idx[:10]) == list(range(10)) and sorted(idx[10:]) == list(range(10))


def test_loss_identities_on_every_step(data):
    trainer = Trainer(toy_config(delta=0.7, lam=0.3), data, 0)
    rec = trainer.run()
    align_steps = rec.steps[-2 * 2 :]
    assert align_steps and all(s.l_cross_ali > 0 for s in align_steps)
    for s in rec.steps:
        assert abs(s.l_ali - (0.7 * s.l_cross_ali + 0.3 * s.l_same_ali)) <= 1e-9
        assert abs(s.l_all - (s.l_ce + 0.3 * s.l_ali)) <= 1e-9
    assert len(rec.epochs) == 3 and [e.phase for e in rec.epochs] == ["pretrain", "align", "align"]


def test_zero_lambda_is_continued_pretraining(data):
    a = Trainer(toy_config(lam=0.0), data, 1)
    a.pretrain(1)
    a.align(2)
    b = Trainer(toy_config(lam=0.0), data, 1)
    b.pretrain(3)
    for (n, p), q in zip(a.model.named_parameters(), b.model.parameters()):
        assert torch.equal(p, q), n
    assert np.allclose([s.l_ce for s in a.record.steps], [s.l_ce for s in b.record.steps], atol=1e-9, rtol=0)
    assert all(s.l_all == s.l_ce for s in a.record.steps)


def test_alignment_changes_training(data):
    a = Trainer(toy_config(lam=0.0), data, 1)
    a.run()
    b = Trainer(toy_config(lam=0.3), data, 1)
    b.run()
    assert not torch.equal(a.model.backbone.embed.weight, b.model.backbone.embed.weight)


def test_same_layer_variant_has_no_cross_term(data):
    cfg = toy_config().with_overrides(variant={"use_cross_layer": False})
    rec = Trainer(cfg, data, 0).run()
    for s in rec.steps[-4:]:
        assert s.l_cross_ali == 0.0
        assert s.l_ali == pytest.approx(s.l_same_ali, abs=1e-12)


def test_determinism(data):
    r1 = Trainer(toy_config(), data, 2).run()
    r2 = Trainer(toy_config(), data, 2).run()
    for key in ("l_ce", "l_cross_ali", "l_same_ali", "l_ali", "l_all", "target_acc"):
        assert np.allclose(r1.loss_series(key), r2.loss_series(key), atol=1e-12, rtol=0)


def test_jsonl_roundtrip(data, tmp_path):
    rec = Trainer(toy_config(), data, 0).run()
    p = rec.write_jsonl(tmp_path / "log.jsonl")
    rows = [json.loads(line) for line in p.read_text().splitlines()]
    assert rows[-1]["type"] == "summary" and rows[-1]["final_target_acc"] == rec.final_target_acc
    back = RunRecord.read_jsonl(p)
    assert back.loss_series() == rec.loss_series()
    (tmp_path / "partial.jsonl").write_text(p.read_text().splitlines()[0] + "\n")
    with pytest.raises(ValueError, match="summary"):
        RunRecord.read_jsonl(tmp_path / "partial.jsonl")


def test_non_finite_loss_dumps_diagnostics(data, tmp_path):
    xs = data.source_x.copy()
    xs[0] = np.nan
    bad = DomainPairDataset(xs, data.source_y, data.target_x, data.target_eval()[1], 4, (1, 16, 16))
    trainer = Trainer(toy_config(batch_size=64), bad, 0, dump_dir=tmp_path)
    with pytest.raises(NonFiniteLossError) as info:
        trainer.run()
    diag = json.loads(open(info.value.diagnostics["dump"]).read())
    assert diag["epoch"] == 1 and "param_norms" in diag and 0 in diag["source_batch"]


def test_evaluate_checks_lengths(data):
    trainer = Trainer(toy_config(), data, 0)
    with pytest.raises(ValueError):
        evaluate(trainer.model, data.target_x[:3], data.source_y[:2])
    assert 0.0 <= trainer.target_accuracy() <= 1.0


def test_end_to_end_gradient_double_precision(data):
    cfg = toy_config(dtype="float64", lam=0.3, delta=0.7).with_overrides(
        backbone={"conv_blocks": ((4, 3, 1), (4, 3, 2), (4, 3, 2)), "tap_indices": (1, 2), "embed_dim": 8},
        projection={"variant": "conv-1", "target_shape": (4, 4, 4)},
    )
    trainer = Trainer(cfg, data, 0, kernel=KernelSpec.around(2.0))
    xs = torch.as_tensor(data.source_x[:6], dtype=torch.float64)
    ys = torch.as_tensor(data.source_y[:6])
    xt = torch.as_tensor(data.target_x[:5], dtype=torch.float64)
    pseudo = np.array([0, 1, 2, 3, 0])
    w = uniform_attention(2)

    def loss():
        return trainer.objective(xs, ys, xt, pseudo, w)[0]

    trainer.model.zero_grad()
    loss().backward()
    params = dict(trainer.model.named_parameters())
    for name in ("backbone.blocks.1.weight", "backbone.embed.weight", "projection.source.0.weight",
                 "projection.target.1.bias"):
        p = params[name]
        flat_idx = int(torch.argmax(p.grad.abs()))
        idx = np.unravel_index(flat_idx, p.shape)
        fd = oracles.central_difference(loss, p.data, idx, step=1e-6)
        assert oracles.rel_err(p.grad[idx].item(), fd) < 1e-3, name
    assert math.isfinite(loss().item())
