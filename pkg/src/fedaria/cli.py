"""Command-line entry point: ``fedaria {run,grid,partition-report,pretrain,summarize}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bench
from .config import PRESETS, ConfigError, grid_from_experiment, load_experiment, load_grid
from .data import dirichlet_partition, heterogeneity_report
from .errors import FedAriaError
from .pretrain import SSLConfig, save_checkpoint, ssl_pretrain


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, action="append", help="run seed (repeatable); overrides config seeds")
    p.add_argument("--out", help="output directory (overrides config output.dir)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="hyper-parameter profile applied under the config")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="fedaria", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run one experiment config")
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("grid", parents=[common], help="run an architecture x init x aggregation grid")
    p.add_argument("grid_spec")
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("partition-report", parents=[common], help="print client shard heterogeneity")
    p.add_argument("config")

    p = sub.add_parser("pretrain", parents=[common], help="autoencoder pre-training to a checkpoint")
    p.add_argument("config")
    p.add_argument("--checkpoint", help="output path (default: <out>/pretrained.ckpt)")

    p = sub.add_parser("summarize", help="format a results file as a gap table")
    p.add_argument("results")
    p.add_argument("--metric", choices=["accuracy", "balanced_accuracy"], default="accuracy")
    return parser


def _apply_overrides(cfg, args):
    updates = {}
    if args.seed:
        updates["seeds"] = list(args.seed)
    if args.out:
        updates["output"] = cfg.output.model_copy(update={"dir": args.out})
    return cfg.model_copy(update=updates) if updates else cfg


def _results_path(out_dir: str) -> Path:
    return Path(out_dir) / "results.csv"


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_experiment(args.config, args.preset), args)
    rows = bench.run_grid(grid_from_experiment(cfg), args.workers)
    path = _results_path(cfg.output.dir)
    bench.write_results(rows, path)
    metric = cfg.federation.metric
    print(bench.format_table(bench.summarize(rows, metric), metric))
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def cmd_grid(args) -> int:
    grid = load_grid(args.grid_spec, args.preset)
    updates = {}
    if args.seed:
        updates["seeds"] = list(args.seed)
    if args.out:
        updates["base"] = grid.base.model_copy(
            update={"output": grid.base.output.model_copy(update={"dir": args.out})})
    if updates:
        grid = grid.model_copy(update=updates)
    rows = bench.run_grid(grid, args.workers)
    path = _results_path(grid.base.output.dir)
    bench.write_results(rows, path)
    metric = grid.base.federation.metric
    print(bench.format_table(bench.summarize(rows, metric), metric))
    failed = sum(r.status != "ok" for r in rows)
    print(f"wrote {len(rows)} rows to {path}" + (f" ({failed} failed)" if failed else ""))
    return 0


def cmd_partition_report(args) -> int:
    cfg = _apply_overrides(load_experiment(args.config, args.preset), args)
    for seed in cfg.seeds:
        root = bench.seed_stream(0, seed)
        train, _ = bench.build_dataset(cfg.dataset, root)
        f = cfg.federation
        part = dirichlet_partition(train, f.num_clients, f.alpha, f.min_size, root.derive("partition"))
        print(f"seed {seed}: {f.num_clients} clients, alpha={f.alpha}")
        print(heterogeneity_report(part, train).format())
    return 0


def cmd_pretrain(args) -> int:
    cfg = _apply_overrides(load_experiment(args.config, args.preset), args)
    seed = cfg.seeds[0]
    root = bench.seed_stream(0, seed)
    train, _ = bench.build_dataset(cfg.dataset, root)
    spec = cfg.model.spec(train.dim, train.num_classes)
    ssl = cfg.init.ssl if cfg.init.ssl is not None else None
    if ssl is not None and ssl.unlabeled is not None:
        unlabeled, _ = bench.build_dataset(ssl.unlabeled, root, name="unlabeled")
    else:
        unlabeled = train
    scfg = SSLConfig(ssl.epochs, ssl.lr, ssl.noise_std, ssl.batch_size, cfg.init.scheme) if ssl else SSLConfig()
    result = ssl_pretrain(spec, unlabeled, scfg, root.derive("pretrain"))
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.output.dir) / "pretrained.ckpt"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.state, path)
    print(f"reconstruction mse: {result.losses[0]:.6f} -> {result.losses[-1]:.6f}")
    print(f"wrote checkpoint to {path}")
    return 0


def cmd_summarize(args) -> int:
    rows = bench.read_results(args.results)
    print(bench.format_table(bench.summarize(rows, args.metric), args.metric))
    return 0


COMMANDS = {
    "run": cmd_run,
    "grid": cmd_grid,
    "partition-report": cmd_partition_report,
    "pretrain": cmd_pretrain,
    "summarize": cmd_summarize,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except FedAriaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
