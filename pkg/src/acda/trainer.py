"""Two-phase training: source-only pretraining, then cross-layer alignment."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import alignment
from .alignment import LossBreakdown, combine
from .attention import attention_weights, uniform_attention
from .backbone import Backbone, BackboneSpec, cross_entropy
from .config import ExperimentConfig
from .data import DomainPairDataset
from .kernels import Kernel, KernelSpec, MedianHeuristic
from .projection import ProjectionBank, ProjectionSpec

log = logging.getLogger(__name__)

EVAL_BATCH = 512


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class ACDAModel(nn.Module):
    """Backbone plus the source/target projector bank."""

    def __init__(self, backbone_spec: BackboneSpec, projection_spec: ProjectionSpec):
        super().__init__()
        self.backbone = Backbone(backbone_spec)
        self.projection = ProjectionBank(self.backbone.tap_shapes(), projection_spec)

    def forward(self, x):
        return self.backbone(x)


def backbone_spec(cfg: ExperimentConfig, data: DomainPairDataset) -> BackboneSpec:
    b = cfg.backbone
    return BackboneSpec(
        conv_blocks=b.conv_blocks,
        tap_indices=b.tap_indices,
        embed_dim=b.embed_dim,
        num_classes=data.num_classes,
        input_shape=tuple(data.input_shape),
        kind=b.kind,
    )


def build_model(cfg: ExperimentConfig, data: DomainPairDataset, seed: int) -> ACDAModel:
    torch.manual_seed(seed)
    model = ACDAModel(
        backbone_spec(cfg, data),
        ProjectionSpec(cfg.projection.variant, cfg.projection.target_shape),
    )
    return model.to(_dtype(cfg))


def _dtype(cfg):
    return torch.float64 if cfg.train.dtype == "float64" else torch.float32


def make_kernel(cfg: ExperimentConfig) -> Kernel:
    if cfg.kernel.bandwidth > 0:
        return KernelSpec.around(cfg.kernel.bandwidth, cfg.kernel.factors)
    return MedianHeuristic(tuple(cfg.kernel.factors))


@torch.no_grad()
def predict(model: nn.Module, inputs) -> tuple[torch.Tensor, torch.Tensor]:
    """Logits and embeddings for a full array, evaluated in chunks."""
    p = next(model.parameters())
    x = torch.as_tensor(np.asarray(inputs), dtype=p.dtype)
    logits, emb = [], []
    for chunk in x.split(EVAL_BATCH):
        out = model(chunk)
        logits.append(out.logits)
        emb.append(out.embedding)
    return torch.cat(logits), torch.cat(emb)


def evaluate(model: nn.Module, inputs, hidden_labels) -> float:
    """Argmax accuracy on a labeled set."""
    if len(inputs) == 0:
        raise ValueError("cannot evaluate on an empty set")
    if len(inputs) != len(hidden_labels):
        raise ValueError("inputs and labels differ in length")
    logits, _ = predict(model, inputs)
    labels = torch.as_tensor(np.asarray(hidden_labels), dtype=torch.long)
    return float((logits.argmax(1) == labels).double().mean())


@dataclass
class EpochLog:
    epoch: int
    phase: str
    l_ce: float
    l_cross_ali: float
    l_same_ali: float
    l_ali: float
    l_all: float
    target_acc: float
    source_acc: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunRecord:
    seed: int
    config_hash: str
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    final_target_acc: float = float("nan")
    wall_clock: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def loss_series(self, key: str = "l_all") -> list:
        return [getattr(e, key) for e in self.epochs]

    def write_jsonl(self, path):
        path = Path(path)
        with path.open("w") as f:
            for e in self.epochs:
                f.write(json.dumps({"type": "epoch", **e.as_dict()}) + "\n")
            f.write(json.dumps(self.summary()) + "\n")
        return path

    def summary(self) -> dict:
        return {
            "type": "summary",
            "seed": self.seed,
            "config_hash": self.config_hash,
            "final_target_acc": self.final_target_acc,
            "epochs": len(self.epochs),
            "wall_clock": self.wall_clock,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def read_jsonl(cls, path) -> "RunRecord":
        rec = None
        epochs = []
        for line in Path(path).read_text().splitlines():
            row = json.loads(line)
            kind = row.pop("type")
            if kind == "epoch":
                epochs.append(EpochLog(**row))
            elif kind == "summary":
                rec = cls(
                    seed=row["seed"],
                    config_hash=row["config_hash"],
                    final_target_acc=row["final_target_acc"],
                    wall_clock=row["wall_clock"],
                    diagnostics=row.get("diagnostics", {}),
                )
        if rec is None:
            raise ValueError(f"{path}: no summary row (incomplete run?)")
        rec.epochs = epochs
        return rec


def _batches(n: int, steps: int, batch: int, rng: np.random.Generator) -> list:
    need = steps * batch
    idx = np.concatenate([rng.permutation(n) for _ in range(math.ceil(need / n))])[:need]
    return np.split(idx, steps)


def _mean_breakdown(items: list) -> dict:
    keys = ("l_ce", "l_cross_ali", "l_same_ali", "l_ali", "l_all")
    return {k: float(np.mean([getattr(b, k) for b in items])) for k in keys}


class Trainer:
    """Owns the model, the optimizer and the per-domain sampling streams of one run.

    Keeping these together lets the alignment phase continue the pretraining
    optimizer state, so that ``lam = 0`` alignment is exactly continued
    source-only training.
    """

    def __init__(
        self,
        cfg: ExperimentConfig,
        data: DomainPairDataset,
        seed: int,
        model: Optional[ACDAModel] = None,
        kernel: Optional[Kernel] = None,
        dump_dir=None,
    ):
        self.cfg = cfg
        self.data = data
        self.seed = seed
        self.model = model if model is not None else build_model(cfg, data, seed)
        self.dtype = next(self.model.parameters()).dtype
        self.kernel = kernel if kernel is not None else make_kernel(cfg)
        self.optimizer = torch.optim.SGD(
            self.model.parameters(), lr=cfg.train.lr, momentum=cfg.train.momentum
        )
        src_ss, tgt_ss = np.random.SeedSequence(seed).spawn(2)
        self.src_rng = np.random.default_rng(src_ss)
        self.tgt_rng = np.random.default_rng(tgt_ss)
        self.record = RunRecord(seed=seed, config_hash=cfg.hash())
        self.stats = Counter()
        self.dump_dir = Path(dump_dir) if dump_dir else None
        self.epoch = 0
        self._xs = torch.as_tensor(data.source_x, dtype=self.dtype)
        self._ys = torch.as_tensor(data.source_y, dtype=torch.long)
        self._xt = torch.as_tensor(data.target_x, dtype=self.dtype)

    # ---- evaluation -------------------------------------------------------

    def target_accuracy(self) -> float:
        x, y = self.data.target_eval()
        return evaluate(self.model, x, y)

    def source_accuracy(self) -> float:
        return evaluate(self.model, self.data.source_x, self.data.source_y)

    # ---- losses -----------------------------------------------------------

    def alignment_terms(self, out_s, out_t, ys, yt_pseudo, w=None):
        """Cross-layer and logit-level alignment losses for one batch pair.

        Returns ``(l_cross, l_same, w)``; ``l_cross`` is None when the
        cross-layer term is switched off.
        """
        v = self.cfg.variant
        l_cross = None
        if v.use_cross_layer:
            proj = self.model.projection
            ps = proj(out_s.taps, "source")
            pt = proj(out_t.taps, "target")
            if w is None:
                w = attention_weights(pt, ps) if v.use_attention else uniform_attention(proj.m)
            if v.use_label_conditioning and yt_pseudo is not None:
                l_cross = alignment.conditioned_cross_layer_loss(
                    ps, ys, pt, yt_pseudo, w, self.kernel, self.stats
                )
            else:
                l_cross = alignment.cross_layer_loss(ps, pt, w, self.kernel)
        l_same = alignment.same_layer_loss(out_s.embedding, out_t.embedding, self.kernel)
        return l_cross, l_same, w

    def objective(self, xs, ys, xt, yt_pseudo=None, w=None):
        """Differentiable total loss and its breakdown for one batch pair."""
        t = self.cfg.train
        out_s = self.model(xs)
        l_ce = cross_entropy(out_s.logits, ys)
        grad_align = t.lam > 0
        with torch.set_grad_enabled(grad_align and torch.is_grad_enabled()):
            out_t = self.model(xt) if grad_align else _detached(self.model, xt)
            l_cross, l_same, w = self.alignment_terms(out_s, out_t, ys, yt_pseudo, w)
        delta = t.delta if l_cross is not None else 0.0
        if l_cross is None:
            l_cross = torch.zeros((), dtype=l_ce.dtype)
        l_ali = delta * l_cross + (1.0 - delta) * l_same
        total = l_ce + t.lam * l_ali if grad_align else l_ce
        bd = combine(l_cross.item(), l_same.item(), l_ce.item(), delta, t.lam, w)
        return total, bd

    # ---- optimisation -----------------------------------------------------

    def _check_finite(self, total, bd, src_idx, tgt_idx=None):
        if math.isfinite(total.item()):
            return
        norms = {n: float(p.detach().norm()) for n, p in self.model.named_parameters()}
        diag = {
            "epoch": self.epoch,
            "seed": self.seed,
            "losses": bd.as_dict(),
            "source_batch": src_idx.tolist(),
            "target_batch": None if tgt_idx is None else tgt_idx.tolist(),
            "param_norms": norms,
        }
        if self.dump_dir is not None:
            self.dump_dir.mkdir(parents=True, exist_ok=True)
            path = self.dump_dir / f"nonfinite_seed{self.seed}_epoch{self.epoch}.json"
            path.write_text(json.dumps(diag, indent=2))
            diag["dump"] = str(path)
        raise NonFiniteLossError(f"non-finite loss at epoch {self.epoch}: {bd.as_dict()}", diag)

    def _step(self, total):
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()

    def _log_epoch(self, phase, steps):
        means = _mean_breakdown(steps)
        entry = EpochLog(
            epoch=self.epoch,
            phase=phase,
            target_acc=self.target_accuracy(),
            source_acc=self.source_accuracy(),
            **means,
        )
        self.record.epochs.append(entry)
        log.info(
            "seed %d epoch %d %s l_all=%.4f target_acc=%.4f",
            self.seed, self.epoch, phase, entry.l_all, entry.target_acc,
        )

    def pretrain(self, epochs: Optional[int] = None) -> ACDAModel:
        """Minimise source cross-entropy for ``epochs`` (default ``E_p``) epochs."""
        epochs = self.cfg.train.epochs_pretrain if epochs is None else epochs
        B = self.cfg.train.batch_size
        steps_per_epoch = math.ceil(self.data.n_source / B)
        self.model.train()
        for _ in range(epochs):
            self.epoch += 1
            steps = []
            for idx in _batches(self.data.n_source, steps_per_epoch, B, self.src_rng):
                out = self.model(self._xs[idx])
                l_ce = cross_entropy(out.logits, self._ys[idx])
                bd = combine(0.0, 0.0, l_ce.item(), self.cfg.train.delta, 0.0)
                self._check_finite(l_ce, bd, idx)
                self._step(l_ce)
                steps.append(bd)
            self.record.steps.extend(steps)
            self._log_epoch("pretrain", steps)
        return self.model

    def refresh_pseudo_labels(self) -> alignment.PseudoLabels:
        _, emb_t = predict(self.model, self.data.target_x)
        _, emb_s = predict(self.model, self.data.source_x)
        return alignment.pseudo_label(
            emb_t, emb_s, self.data.source_y, self.data.num_classes,
            seed=self.seed, n_iter=self.cfg.train.kmeans_iters,
        )

    def align(self, epochs: Optional[int] = None) -> tuple[ACDAModel, RunRecord]:
        """Minimise ``L_ce + lam * L_ali`` for ``epochs`` (default ``E_a``) epochs."""
        epochs = self.cfg.train.epochs_align if epochs is None else epochs
        B = self.cfg.train.batch_size
        n_s, n_t = self.data.n_source, self.data.n_target
        steps_per_epoch = max(math.ceil(n_s / B), math.ceil(n_t / B))
        conditioned = self.cfg.variant.use_label_conditioning and self.cfg.variant.use_cross_layer
        self.model.train()
        for _ in range(epochs):
            self.epoch += 1
            pseudo = self.refresh_pseudo_labels().labels if conditioned else None
            src = _batches(n_s, steps_per_epoch, B, self.src_rng)
            tgt = _batches(n_t, steps_per_epoch, B, self.tgt_rng)
            steps = []
            for s_idx, t_idx in zip(src, tgt):
                total, bd = self.objective(
                    self._xs[s_idx], self._ys[s_idx], self._xt[t_idx],
                    None if pseudo is None else pseudo[t_idx],
                )
                self._check_finite(total, bd, s_idx, t_idx)
                self._step(total)
                steps.append(bd)
            self.record.steps.extend(steps)
            self._log_epoch("align", steps)
        return self.model, self.record

    def run(self) -> RunRecord:
        torch.set_num_threads(self.cfg.train.threads)
        start = time.perf_counter()
        self.pretrain()
        self.align()
        self.record.final_target_acc = self.target_accuracy()
        self.record.wall_clock = time.perf_counter() - start
        self.record.diagnostics = dict(self.stats)
        return self.record


@torch.no_grad()
def _detached(model, x):
    return model(x)


def pretrain(model: ACDAModel, cfg: ExperimentConfig, data: DomainPairDataset, seed: int = 0) -> ACDAModel:
    return Trainer(cfg, data, seed, model=model).pretrain()


def align(model: ACDAModel, cfg: ExperimentConfig, data: DomainPairDataset, seed: int = 0):
    return Trainer(cfg, data, seed, model=model).align()


def run_experiment(cfg: ExperimentConfig, data: DomainPairDataset, seed: int, dump_dir=None) -> tuple[ACDAModel, RunRecord]:
    trainer = Trainer(cfg, data, seed, dump_dir=dump_dir)
    record = trainer.run()
    return trainer.model, record
