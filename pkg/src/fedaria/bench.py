"""Grid sweeps over (architecture, initialization, aggregation), result files
and gap-to-centralized summary tables."""

from __future__ import annotations

import csv
import io
import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .config import BlobsData, ExperimentConfig, GridSpec, IdxData
from .data import Dataset, dirichlet_partition, load_idx, synth_blobs, train_eval_split
from .errors import FedAriaError, ResultsFormatError
from .federation import FederationResult, centralized_baseline, run_federation
from .metrics import accuracy, balanced_accuracy, confusion_matrix  # noqa: F401  (re-exported)
from .numkit import RngStream
from .pretrain import initialize

CENTRAL = "central"


@dataclass
class ResultRow:
    architecture: str
    init: str
    aggregation: str
    seed: int
    round: int
    accuracy: float
    balanced_accuracy: float
    gap_to_central: float
    drift: float
    bn_mismatch: float | None
    cumulative_bytes: int
    wall_time: float | None
    status: str = "ok"


FIELDS = [f.name for f in fields(ResultRow)]
_INT_FIELDS = {"seed", "round", "cumulative_bytes"}
_FLOAT_FIELDS = {"accuracy", "balanced_accuracy", "gap_to_central", "drift"}
_OPTIONAL_FLOAT_FIELDS = {"bn_mismatch", "wall_time"}


# -- data construction -------------------------------------------------------------


def build_dataset(cfg, rng: RngStream, name: str = "data") -> tuple[Dataset, Dataset]:
    """Return ``(train, test)`` for a dataset config."""
    if isinstance(cfg, BlobsData):
        ds = synth_blobs(cfg.num_classes, cfg.dim, cfg.n_per_class, cfg.separation, cfg.noise_std,
                         rng.derive(name), name="blobs")
        return train_eval_split(ds, cfg.test_fraction, rng.derive(name, "split"))
    assert isinstance(cfg, IdxData)
    train = load_idx(cfg.train_images, cfg.train_labels, cfg.num_classes)
    if cfg.test_images is None:
        return train_eval_split(train, cfg.test_fraction, rng.derive(name, "split"))
    test = load_idx(cfg.test_images, cfg.test_labels, train.num_classes)
    return train, test


def seed_stream(master_seed: int, seed: int) -> RngStream:
    return RngStream(master_seed).derive("seed", seed)


# -- grid ---------------------------------------------------------------------------


def _history_rows(arch, init, agg, seed, result: FederationResult, central: FederationResult,
                  metric: str, wall_time) -> list[ResultRow]:
    rows = []
    for h, c in zip(result.history, central.history):
        gap = getattr(h, metric) - getattr(c, metric)
        rows.append(ResultRow(arch, init, agg, seed, h.round, h.accuracy, h.balanced_accuracy, gap,
                              h.drift, h.bn_mismatch, h.cumulative_bytes, wall_time))
    return rows


def _error_rows(arch, init, aggs, seed, message: str) -> list[ResultRow]:
    nan = float("nan")
    return [ResultRow(arch, init, a, seed, 0, nan, nan, nan, nan, None, 0, None, f"error: {message}")
            for a in aggs]


def run_unit(grid: GridSpec, arch: str, init_name: str, seed: int) -> list[ResultRow]:
    """Central baseline plus one federated run per aggregation for one
    (architecture, init, seed) triple. Failures become error rows."""
    base = grid.base
    timing = base.output.record_timing
    metric = base.federation.metric
    aggs = list(grid.aggregations)
    try:
        root = seed_stream(grid.master_seed, seed)
        train, test = build_dataset(base.dataset, root)
        partition = dirichlet_partition(train, base.federation.num_clients, base.federation.alpha,
                                        base.federation.min_size, root.derive("partition"))
        spec = grid.architectures[arch].spec(train.dim, train.num_classes)
        init_cfg = grid.inits[init_name]
        unlabeled = None
        if init_cfg.kind == "ssl_autoencoder":
            if init_cfg.ssl.unlabeled is not None:
                unlabeled, _ = build_dataset(init_cfg.ssl.unlabeled, root, name="unlabeled")
            else:
                unlabeled = train
        cell = root.derive("cell", arch, init_name)
        init_state = initialize(init_cfg.strategy(), spec, cell.derive("init"), unlabeled)
        rcfg = base.round_config()

        t0 = time.perf_counter()
        central = centralized_baseline(train, test, spec, init_state, rcfg, cell.derive("central"))
        wt = time.perf_counter() - t0 if timing else None
        rows = _history_rows(arch, init_name, CENTRAL, seed, central, central, metric, wt)
    except FedAriaError as e:
        return _error_rows(arch, init_name, [CENTRAL, *aggs], seed, str(e))

    for agg in aggs:
        try:
            t0 = time.perf_counter()
            fed = run_federation(train, test, partition, spec, init_state, grid.aggregations[agg].build(),
                                 rcfg, cell.derive("federation"), workers=base.federation.workers)
            wt = time.perf_counter() - t0 if timing else None
            rows.extend(_history_rows(arch, init_name, agg, seed, fed, central, metric, wt))
        except FedAriaError as e:
            rows.extend(_error_rows(arch, init_name, [agg], seed, str(e)))
    return rows


def grid_units(grid: GridSpec) -> list[tuple[str, str, int]]:
    return list(itertools.product(grid.architectures, grid.inits, grid.run_seeds))


def _run_unit_args(args):
    return run_unit(*args)


def run_grid(grid: GridSpec, workers: int | None = None) -> list[ResultRow]:
    """Run every grid cell; rows come back in grid order whatever the worker count."""
    workers = grid.workers if workers is None else workers
    units = grid_units(grid)
    jobs = [(grid, a, i, s) for a, i, s in units]
    if workers <= 1 or len(jobs) <= 1:
        chunks = [_run_unit_args(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_unit_args, jobs))
    return [row for chunk in chunks for row in chunk]


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> list[ResultRow]:
    from .config import grid_from_experiment

    return run_grid(grid_from_experiment(cfg), workers)


# -- results file ---------------------------------------------------------------------


def _fmt(name: str, value) -> str:
    if value is None:
        return ""
    if name in _INT_FIELDS:
        return str(int(value))
    if name in _FLOAT_FIELDS or name in _OPTIONAL_FLOAT_FIELDS:
        return "nan" if math.isnan(value) else f"{value:.6f}"
    return str(value)


def format_results(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for r in rows:
        w.writerow([_fmt(n, getattr(r, n)) for n in FIELDS])
    return buf.getvalue()


def write_results(rows: list[ResultRow], path) -> None:
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(format_results(rows), encoding="utf-8")
    except OSError as e:
        raise FedAriaError(f"cannot write results to {p}: {e}") from e


def read_results(path) -> list[ResultRow]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise FedAriaError(f"cannot read results from {p}: {e}") from e
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ResultsFormatError(p, 1, "empty file, expected a header row") from None
    if header != FIELDS:
        raise ResultsFormatError(p, 1, f"unexpected header {header}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if len(rec) != len(FIELDS):
            raise ResultsFormatError(p, lineno, f"expected {len(FIELDS)} fields, got {len(rec)}")
        values = {}
        try:
            for name, raw in zip(FIELDS, rec):
                if name in _INT_FIELDS:
                    values[name] = int(raw)
                elif name in _FLOAT_FIELDS:
                    values[name] = float(raw)
                elif name in _OPTIONAL_FLOAT_FIELDS:
                    values[name] = float(raw) if raw != "" else None
                else:
                    values[name] = raw
        except ValueError as e:
            raise ResultsFormatError(p, lineno, f"bad value for {name!r}: {e}") from None
        rows.append(ResultRow(**values))
    return rows


# -- summary --------------------------------------------------------------------------


@dataclass
class SummaryRow:
    architecture: str
    init: str
    aggregation: str
    n_seeds: int
    value: float
    central: float
    gap: float
    drift: float
    cumulative_bytes: float


def final_rows(rows: list[ResultRow]) -> dict[tuple, ResultRow]:
    """Last-round row per (architecture, init, aggregation, seed)."""
    out: dict[tuple, ResultRow] = {}
    for r in rows:
        key = (r.architecture, r.init, r.aggregation, r.seed)
        if key not in out or r.round > out[key].round:
            out[key] = r
    return out


def summarize(rows: list[ResultRow], metric: str = "accuracy") -> list[SummaryRow]:
    """Seed-averaged final metric per cell with its gap to the central run."""
    if metric not in ("accuracy", "balanced_accuracy"):
        raise FedAriaError(f"unknown metric {metric!r}")
    finals = final_rows(rows)
    groups: dict[tuple, list[ResultRow]] = {}
    for (a, i, g, s), r in finals.items():
        if g != CENTRAL and r.status == "ok":
            groups.setdefault((a, i, g), []).append(r)
    out = []
    for (a, i, g), rs in groups.items():
        rs = sorted(rs, key=lambda r: r.seed)
        vals = [getattr(r, metric) for r in rs]
        centrals = []
        for r in rs:
            c = finals.get((a, i, CENTRAL, r.seed))
            centrals.append(getattr(c, metric) if c is not None and c.status == "ok" else float("nan"))
        out.append(SummaryRow(
            a, i, g, len(rs),
            float(np.mean(vals)),
            float(np.mean(centrals)),
            float(np.mean(np.subtract(vals, centrals))),
            float(np.mean([r.drift for r in rs])),
            float(np.mean([r.cumulative_bytes for r in rs])),
        ))
    return out


def _cell_text(s: SummaryRow) -> str:
    arrow = "↑" if s.gap > 0 else "↓"
    return f"{100 * s.value:.2f} ({arrow} {abs(100 * s.gap):.1f})"


def format_table(summary: list[SummaryRow], metric: str = "accuracy") -> str:
    """Architectures down, (init, aggregation) across, gaps in parentheses."""
    archs = list(dict.fromkeys(s.architecture for s in summary))
    cols = list(dict.fromkeys((s.init, s.aggregation) for s in summary))
    by_key = {(s.architecture, s.init, s.aggregation): s for s in summary}
    header = ["architecture"] + [f"{i}/{g}" for i, g in cols]
    body = []
    for a in archs:
        line = [a]
        for i, g in cols:
            s = by_key.get((a, i, g))
            line.append(_cell_text(s) if s else "-")
        body.append(line)
    widths = [max(len(r[k]) for r in [header, *body]) for k in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    lines = [f"{metric} (difference from central model in parentheses)", fmt(header),
             fmt(["-" * w for w in widths])]
    lines += [fmt(r) for r in body]
    return "\n".join(lines)
