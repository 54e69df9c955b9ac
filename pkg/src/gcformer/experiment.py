"""Grid sweeps, ablations and result tables."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .graph_core import Graph, load_graph, make_splits, normalize_adjacency, sbm_generate
from .model import VARIANTS
from .tokens import generate_tokens
from .training import TrainConfig, prepare_node_data, token_graph, train_once

log = logging.getLogger(__name__)

RESULTS_FILE = "results.jsonl"

SAMPLING_GRID = {"p_k": list(range(2, 11)), "n_k": list(range(2, 11))}
ALPHA_GRID = {"alpha": [round(0.1 * i, 1) for i in range(11)]}
PRESETS = {"sampling": SAMPLING_GRID, "alpha": ALPHA_GRID}


@dataclass
class ExperimentSpec:
    config: TrainConfig
    data: dict
    sweep: dict = field(default_factory=dict)
    repeats: int = 5
    output_dir: Path | None = None
    workers: int = 1

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        bad = set(self.sweep) - set(TrainConfig.field_names())
        if bad:
            raise ValueError(f"sweep axes are not config fields: {sorted(bad)}")
        if "seed" in self.sweep:
            raise ValueError("seed cannot be swept; use repeats")

    def cells(self) -> list[dict]:
        axes = list(self.sweep)
        return [dict(zip(axes, combo)) for combo in itertools.product(*(self.sweep[a] for a in axes))]


@dataclass
class ResultRecord:
    cell: dict
    config: dict
    seeds: list
    accuracies: list
    mean: float
    std: float
    wall_ms: float
    status: str = "ok"
    error: str = ""
    val_accuracies: list = field(default_factory=list)
    token_checksums: list = field(default_factory=list)

    @classmethod
    def from_runs(cls, cell, config, seeds, accs, wall_ms, **extra) -> "ResultRecord":
        mean, std = summarize(accs)
        return cls(cell, config, list(seeds), list(accs), mean, std, wall_ms, **extra)

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRecord":
        return cls(**d)


def summarize(accs) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single run, NaN for none)."""
    if not accs:
        return float("nan"), float("nan")
    mean = statistics.fmean(accs)
    return mean, (statistics.stdev(accs) if len(accs) > 1 else 0.0)


def load_data(source: dict) -> Graph:
    kind = source.get("kind", "sbm" if "sbm_blocks" in source else "files")
    if kind == "files":
        return load_graph(source["edges"], source["features"], source["labels"])
    if kind == "sbm":
        return sbm_generate(
            source["sbm_blocks"],
            source.get("sbm_p_intra", 0.1),
            source.get("sbm_p_inter", 0.01),
            source.get("sbm_feature_dim", 16),
            source.get("sbm_feature_noise", 0.5),
            source.get("sbm_seed", 0),
        )
    raise ValueError(f"unknown data source kind {kind!r}")


class _TokenCache:
    """Token sequences memoized by everything that determines them."""

    def __init__(self, g: Graph):
        self.g = g
        self.adj = normalize_adjacency(g)
        self._store = {}

    def get(self, cfg: TrainConfig):
        key = (cfg.k, cfg.p_k, cfg.n_k, cfg.seed, cfg.pca_dim, cfg.pca_fit_scope)
        if key not in self._store:
            splits = make_splits(self.g, cfg.seed)
            data = prepare_node_data(self.g, cfg, splits, self.adj)
            self._store[key] = generate_tokens(token_graph(self.g, data), self.adj, cfg.k, cfg.p_k, cfg.n_k, cfg.seed)
        return self._store[key]


def run_cell(g: Graph, base: TrainConfig, cell: dict, repeats: int, cache: _TokenCache | None = None) -> ResultRecord:
    """All repeats of one sweep cell; errors become a failed record instead of raising."""
    t0 = time.perf_counter()
    seeds = [base.seed + i for i in range(repeats)]
    accs, vals, sums = [], [], []
    try:
        cfg = base.replace(**cell)
        cache = cache or _TokenCache(g)
        for seed in seeds:
            run_cfg = cfg.replace(seed=seed)
            tokens = cache.get(run_cfg)
            out = train_once(g, run_cfg, adj=cache.adj, tokens=tokens)
            accs.append(out.test_acc)
            vals.append(out.val_acc)
            sums.append(tokens.checksum())
    except Exception as exc:  # noqa: BLE001 - a failed cell is a result, not a crash
        log.warning("cell %s failed: %s", cell, exc)
        return ResultRecord.from_runs(
            cell, asdict(base) | cell, seeds, accs, (time.perf_counter() - t0) * 1000,
            status="failed", error=f"{type(exc).__name__}: {exc}", val_accuracies=vals, token_checksums=sums,
        )
    return ResultRecord.from_runs(
        cell, asdict(cfg), seeds, accs, (time.perf_counter() - t0) * 1000,
        val_accuracies=vals, token_checksums=sums,
    )


def _append(path: Path, record: ResultRecord) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(asdict(record)) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def _cell_job(args):
    g, base, cell, repeats = args
    return run_cell(g, base, cell, repeats)


def run_experiment(spec: ExperimentSpec, graph: Graph | None = None, on_record=None) -> list[ResultRecord]:
    """Cartesian product of sweep axes; one record per cell aggregating all repeats."""
    g = graph if graph is not None else load_data(spec.data)
    out_path = None
    if spec.output_dir is not None:
        Path(spec.output_dir).mkdir(parents=True, exist_ok=True)
        out_path = Path(spec.output_dir) / RESULTS_FILE
    records = []

    def emit(rec):
        records.append(rec)
        if out_path is not None:
            _append(out_path, rec)
        if on_record is not None:
            on_record(rec)

    cells = spec.cells()
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            jobs = [(g, spec.config, cell, spec.repeats) for cell in cells]
            for rec in pool.map(_cell_job, jobs):
                emit(rec)
    else:
        cache = _TokenCache(g)
        for cell in cells:
            emit(run_cell(g, spec.config, cell, spec.repeats, cache))
    return records


def run_ablation(spec: ExperimentSpec, graph: Graph | None = None, on_record=None) -> list[ResultRecord]:
    """Every variant under the same config and seeds, in the order full, N, C, NE, NN."""
    ablation = ExperimentSpec(
        spec.config, spec.data, {"variant": list(VARIANTS)}, spec.repeats, spec.output_dir, spec.workers
    )
    records = run_experiment(ablation, graph, on_record)
    if spec.output_dir is not None:
        emit_report(records, "markdown", spec.output_dir, stem="ablation")
    return records


# --- reporting --------------------------------------------------------------

FIXED_COLUMNS = ("status", "n_seeds", "mean_pct", "std_pct", "mean", "std", "accuracies", "seeds", "wall_ms", "error")


def _axes(records) -> list[str]:
    axes = []
    for r in records:
        for a in r.cell:
            if a not in axes:
                axes.append(a)
    return axes


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def _fmt_cell(value) -> str:
    return json.dumps(value) if not isinstance(value, str) else value


def write_csv(records, path) -> None:
    axes = _axes(records)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(axes + list(FIXED_COLUMNS))
        for r in records:
            w.writerow(
                [_fmt_cell(r.cell.get(a, "")) for a in axes]
                + [
                    r.status, len(r.accuracies), _pct(r.mean), _pct(r.std), repr(r.mean), repr(r.std),
                    json.dumps(r.accuracies), json.dumps(r.seeds), f"{r.wall_ms:.1f}", r.error,
                ]
            )


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")


def read_jsonl(path) -> list[ResultRecord]:
    with open(path, encoding="utf-8") as fh:
        return [ResultRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def markdown_table(records) -> str:
    axes = _axes(records)
    head = axes + ["accuracy (%)", "seeds", "status"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in records:
        acc = f"{_pct(r.mean)} ± {_pct(r.std)}" if r.accuracies else "n/a"
        row = [_fmt_cell(r.cell.get(a, "")) for a in axes] + [acc, str(len(r.accuracies)), r.status]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def _ordered(records):
    # ablation tables always list variants in the canonical order
    if _axes(records) == ["variant"]:
        rank = {v: i for i, v in enumerate(VARIANTS)}
        return sorted(records, key=lambda r: rank.get(r.cell["variant"], len(rank)))
    return list(records)


def emit_report(records, fmt: str, out_dir, stem: str = "results") -> Path:
    """Write ``records`` as csv, jsonl or a markdown table; returns the file path."""
    if not records:
        raise ValueError("no records to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = _ordered(records)
    if fmt == "csv":
        path = out_dir / f"{stem}.csv"
        write_csv(records, path)
    elif fmt in ("jsonl", "json-lines"):
        path = out_dir / f"{stem}.report.jsonl"
        write_jsonl(records, path)
    elif fmt in ("markdown", "md", "markdown-table"):
        path = out_dir / f"{stem}.md"
        path.write_text(markdown_table(records), encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path
