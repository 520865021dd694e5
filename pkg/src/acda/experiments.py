"""Multi-seed experiment drivers: main runs, ablation rows, sensitivity sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .config import ConfigError, ExperimentConfig
from .data import DomainPairDataset, load_dataset, make_folder_dataset, make_shapes_dataset, make_twomoons_dataset
from .trainer import RunRecord, Trainer

log = logging.getLogger(__name__)

ABLATION_ROWS = (
    "source-only",
    "w/ same-layer alignment",
    "w/o label-conditioned alignment",
    "w/o dynamic attention",
    "ACDA",
)
SWEEP_PARAMS = {"delta": "delta", "lambda": "lam", "lam": "lam"}


def make_dataset(cfg: ExperimentConfig, seed: int) -> DomainPairDataset:
    d = cfg.data
    if d.name == "shapes":
        return make_shapes_dataset(seed, d.n_source, d.n_target, d.shift())
    if d.name == "twomoons":
        return make_twomoons_dataset(seed, d.n_source, d.n_target, d.rotation)
    if d.name == "folder":
        return make_folder_dataset(d.path)
    if d.name == "file":
        return load_dataset(d.path)
    raise ConfigError("data.name", f"unknown dataset {d.name!r}")


def apply_dataset_flag(cfg: ExperimentConfig, flag: Optional[str]) -> ExperimentConfig:
    """Apply ``--dataset shapes|twomoons|folder:<path>|file:<path>``."""
    if not flag:
        return cfg
    name, _, path = flag.partition(":")
    if name not in ("shapes", "twomoons", "folder", "file"):
        raise ConfigError("--dataset", f"unknown dataset {flag!r}")
    if name in ("folder", "file") and not path:
        raise ConfigError("--dataset", f"{name} needs a path, e.g. {name}:/data/pair")
    return cfg.with_overrides(data={"name": name, "path": path})


@dataclass
class ResultRow:
    name: str
    accuracies: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def stderr(self) -> float:
        """Standard error of the mean; NaN with fewer than three seeds."""
        n = len(self.accuracies)
        if n < 3:
            return float("nan")
        return float(np.std(self.accuracies, ddof=1) / math.sqrt(n))

    @property
    def n_seeds(self) -> int:
        return len(self.accuracies)


@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)
    key: str = "variant"

    def add(self, name, records: Iterable[RunRecord]):
        self.rows.append(ResultRow(str(name), [r.final_target_acc for r in records]))

    def row(self, name) -> ResultRow:
        for r in self.rows:
            if r.name == str(name):
                return r
        raise KeyError(name)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow([self.key, "mean", "stderr", "seeds"])
            for r in self.rows:
                writer.writerow([r.name, f"{r.mean:.6f}", f"{r.stderr:.6f}", r.n_seeds])
        return Path(path)

    def format(self) -> str:
        width = max([len(self.key)] + [len(r.name) for r in self.rows])
        lines = [f"{self.key:<{width}}  mean     stderr   seeds"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {100 * r.mean:6.2f}  {100 * r.stderr:6.2f}   {r.n_seeds}")
        return "\n".join(lines)


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-." else "_" for c in name).strip("_")


class RunWriter:
    """Collects output files under ``out_dir`` and writes the manifest."""

    def __init__(self, out_dir, cfg: ExperimentConfig):
        self.out_dir = Path(out_dir) if out_dir else None
        self.cfg = cfg
        self.artifacts = []
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.toml").write_text(cfg.to_toml())
            self.artifacts.append("config.toml")

    def path(self, *parts) -> Optional[Path]:
        if not self.out_dir:
            return None
        p = self.out_dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def register(self, path: Path):
        self.artifacts.append(str(path.relative_to(self.out_dir)))

    def write_manifest(self):
        if not self.out_dir:
            return None
        p = self.out_dir / "manifest.json"
        p.write_text(json.dumps({"config_hash": self.cfg.hash(), "artifacts": sorted(set(self.artifacts))}, indent=2))
        return p


def run_seeds(
    cfg: ExperimentConfig,
    seeds: Sequence[int],
    writer: Optional[RunWriter] = None,
    group: str = "",
    checkpoints: bool = True,
) -> list[RunRecord]:
    """Pretrain + align once per seed; write one JSONL log (and checkpoint) each."""
    records = []
    for seed in seeds:
        data = make_dataset(cfg, seed)
        dump = writer.path(group, "diagnostics") if writer and writer.out_dir else None
        trainer = Trainer(cfg, data, seed, dump_dir=dump)
        try:
            record = trainer.run()
        except Exception:
            if writer and writer.out_dir:
                p = writer.path(group, f"seed{seed}.partial.jsonl")
                trainer.record.write_jsonl(p)
                writer.register(p)
                writer.write_manifest()
            raise
        records.append(record)
        if writer and writer.out_dir:
            p = record.write_jsonl(writer.path(group, f"seed{seed}.jsonl"))
            writer.register(p)
            if checkpoints:
                c = save_checkpoint(
                    trainer.model, writer.path(group, f"seed{seed}.ckpt"),
                    meta={"seed": seed, "config_hash": cfg.hash(), "dataset": cfg.data.name},
                )
                writer.register(c)
        log.info("%s seed %d: target acc %.4f", group or "run", seed, record.final_target_acc)
    return records


def ablation_configs(cfg: ExperimentConfig) -> dict:
    """The five ablation rows, each a modified copy of ``cfg``."""
    full = cfg.with_overrides(variant={"use_attention": True, "use_cross_layer": True, "use_label_conditioning": True})
    return {
        "source-only": full.with_overrides(train={"lam": 0.0}),
        "w/ same-layer alignment": full.with_overrides(variant={"use_cross_layer": False}),
        "w/o label-conditioned alignment": full.with_overrides(variant={"use_label_conditioning": False}),
        "w/o dynamic attention": full.with_overrides(variant={"use_attention": False}),
        "ACDA": full,
    }


def sweep_configs(cfg: ExperimentConfig, param: str, grid: Sequence[float]) -> list:
    if param not in SWEEP_PARAMS:
        raise ConfigError("--param", f"can only sweep {sorted(SWEEP_PARAMS)}, got {param!r}")
    key = SWEEP_PARAMS[param]
    grid = [float(g) for g in grid]
    if not grid:
        raise ConfigError("--grid", "empty grid")
    if len(set(grid)) != len(grid):
        raise ConfigError("--grid", f"duplicate values in {grid}")
    out = []
    for value in grid:
        try:
            out.append((value, cfg.with_overrides(train={key: value})))
        except ConfigError as e:
            raise ConfigError("--grid", f"{param}={value}: {e}") from None
    return out


def run_table(named_configs, seeds, writer: Optional[RunWriter] = None, key="variant") -> ResultsTable:
    table = ResultsTable(key=key)
    index = {}
    for name, cfg in named_configs:
        slug = _slug(str(name))
        index[slug] = str(name)
        if writer and writer.out_dir:
            writer.path("rows.json").write_text(json.dumps(index, indent=2))
            writer.register(writer.path("rows.json"))
        table.add(name, run_seeds(cfg, seeds, writer, group=slug))
    return table


def table_from_logs(out_dir, key="variant") -> ResultsTable:
    """Rebuild a results table from the per-run logs under ``out_dir``.

    Each subdirectory holding ``seed*.jsonl`` logs becomes one row; row names
    come from ``rows.json`` when present.
    """
    out_dir = Path(out_dir)
    names = {}
    index = out_dir / "rows.json"
    if index.is_file():
        names = json.loads(index.read_text())
    table = ResultsTable(key=key)
    groups = sorted({p.parent for p in out_dir.rglob("seed*.jsonl") if not p.name.endswith(".partial.jsonl")})
    order = list(names)
    groups.sort(key=lambda g: order.index(g.name) if g.name in order else len(order))
    for g in groups:
        recs = [RunRecord.read_jsonl(p) for p in sorted(g.glob("seed*.jsonl")) if ".partial" not in p.name]
        name = names.get(g.name, g.name if g != out_dir else "run")
        table.add(name, recs)
    return table
