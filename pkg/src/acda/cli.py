"""Command-line harness for ACDA experiments.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import save_dataset
from .experiments import RunWriter, apply_dataset_flag, make_dataset
from .projection import ProjectionConfigError
from .trainer import build_model, predict

log = logging.getLogger("acda")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


def parse_seeds(text: str) -> tuple:
    """``"3"`` means seeds 0..2; ``"0,4,7"`` lists them explicitly."""
    try:
        if "," in text:
            seeds = tuple(int(s) for s in text.split(",") if s.strip())
        else:
            seeds = tuple(range(int(text)))
    except ValueError:
        raise ValidationError(f"--seeds: expected a count or a comma list, got {text!r}") from None
    if not seeds or min(seeds) < 0:
        raise ValidationError(f"--seeds: need at least one nonnegative seed, got {text!r}")
    if len(set(seeds)) != len(seeds):
        raise ValidationError(f"--seeds: duplicate seeds in {text!r}")
    return seeds


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = apply_dataset_flag(cfg, getattr(args, "dataset", None))
    if getattr(args, "seeds", None):
        cfg = cfg.with_overrides(train={"seeds": parse_seeds(args.seeds)})
    return cfg


def check_buildable(cfg: ExperimentConfig):
    """Build the dataset and model for the first seed to surface shape errors early."""
    seed = cfg.train.seeds[0]
    try:
        data = make_dataset(cfg, seed)
        build_model(cfg, data, seed)
    except (ProjectionConfigError, ValueError, FileNotFoundError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ValidationError(str(e)) from None


def _dry_run(cfg):
    check_buildable(cfg)
    print(cfg.to_toml())
    print(f"# config hash {cfg.hash()}; dry run, nothing trained")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    if args.dry_run:
        return _dry_run(cfg)
    check_buildable(cfg)
    writer = RunWriter(args.out_dir, cfg)
    table = experiments.run_table([("run", cfg)], cfg.train.seeds, writer, key="config")
    summary = writer.path("summary.csv")
    table.write_csv(summary)
    writer.register(summary)
    writer.write_manifest()
    print(table.format())
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg = resolve_config(args)
    configs = experiments.ablation_configs(cfg)
    if args.dry_run:
        for name, c in configs.items():
            print(f"# {name}: lam={c.train.lam} {c.variant}")
        return _dry_run(cfg)
    check_buildable(cfg)
    writer = RunWriter(args.out_dir, cfg)
    table = experiments.run_table(configs.items(), cfg.train.seeds, writer)
    out = writer.path("ablation.csv")
    table.write_csv(out)
    writer.register(out)
    writer.write_manifest()
    print(table.format())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    try:
        grid = [float(v) for v in args.grid.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"--grid: expected comma-separated numbers, got {args.grid!r}") from None
    points = experiments.sweep_configs(cfg, args.param, grid)
    if args.dry_run:
        return _dry_run(cfg)
    check_buildable(cfg)
    writer = RunWriter(args.out_dir, cfg)
    table = experiments.run_table(
        [(f"{v:g}", c) for v, c in points], cfg.train.seeds, writer, key="value"
    )
    out = writer.path(f"sweep_{args.param}.csv")
    table.write_csv(out)
    writer.register(out)
    writer.write_manifest()
    print(table.format())
    return EXIT_OK


def cmd_embed(args) -> int:
    try:
        model, manifest = load_checkpoint(args.checkpoint)
    except CheckpointError as e:
        raise ValidationError(str(e)) from None
    cfg = resolve_config(args)
    seed = args.seed if args.seed is not None else manifest.get("meta", {}).get("seed", cfg.train.seeds[0])
    data = make_dataset(cfg, seed)
    expected = model.backbone.spec.input_shape
    if tuple(data.input_shape) != tuple(expected):
        raise ValidationError(
            f"dataset input shape {tuple(data.input_shape)} does not match checkpoint backbone {tuple(expected)}"
        )
    if data.num_classes != model.backbone.spec.num_classes:
        raise ValidationError(
            f"dataset has {data.num_classes} classes, checkpoint classifier has {model.backbone.spec.num_classes}"
        )
    _, emb_s = predict(model, data.source_x)
    xt, yt = data.target_eval()
    _, emb_t = predict(model, xt)
    out_dir = Path(args.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "embeddings.csv"
    d = emb_s.shape[1]
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["domain", "label"] + [f"e_{k + 1}" for k in range(d)])
        for domain, emb, labels in (("source", emb_s, data.source_y), ("target", emb_t, yt)):
            for row, label in zip(emb.double().numpy(), labels):
                w.writerow([domain, int(label)] + [repr(float(v)) for v in row])
    print(f"wrote {len(emb_s) + len(emb_t)} rows to {path}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    if not args.dataset or not args.dataset.startswith("folder:"):
        raise ValidationError("ingest needs --dataset folder:<path>")
    cfg = apply_dataset_flag(ExperimentConfig(), args.dataset)
    try:
        data = make_dataset(cfg, 0)
    except FileNotFoundError as e:
        raise ValidationError(str(e)) from None
    out_dir = Path(args.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "dataset.npz"
    save_dataset(data, path)
    _, counts_s = np.unique(data.source_y, return_counts=True)
    print(f"classes: {', '.join(data.class_names)}")
    print(f"source {data.n_source} images {counts_s.tolist()}; target {data.n_target} images")
    print(f"wrote {path}; train on it with --dataset file:{path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=True):
        p.add_argument("--config", help="TOML experiment config (defaults when omitted)")
        p.add_argument("--out-dir", help="directory for logs, checkpoints and tables")
        p.add_argument("--dataset", help="shapes | twomoons | folder:<path> | file:<path>")
        p.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
        if seeds:
            p.add_argument("--seeds", help="seed count (N -> 0..N-1) or comma list")

    p = sub.add_parser("run", help="pretrain + align for each seed")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablation", help="source-only, same-layer, no conditioning, no attention, full")
    common(p)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("sweep", help="sensitivity sweep over delta or lambda")
    common(p)
    p.add_argument("--param", required=True, choices=sorted(experiments.SWEEP_PARAMS))
    p.add_argument("--grid", required=True, help="comma-separated values, e.g. 0.1,0.3,0.5")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("embed", help="dump source/target embeddings of a checkpoint as CSV")
    common(p, seeds=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, help="dataset seed (default: the checkpoint's)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("ingest", help="convert an image-folder domain pair to a dataset file")
    p.add_argument("--dataset", required=True, help="folder:<path> with source/ and target/ subdirectories")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_ingest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, ValidationError, ProjectionConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - any training failure maps to exit 2
        log.exception("run failed")
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
