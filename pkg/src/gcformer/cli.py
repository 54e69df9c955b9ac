"""Command-line experiment runner: train, sweep, ablate, tokens, synth, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import yaml

from .experiment import (
    PRESETS,
    RESULTS_FILE,
    ExperimentSpec,
    emit_report,
    load_data,
    read_jsonl,
    run_ablation,
    run_experiment,
)
from .graph_core import edge_homophily, make_splits, normalize_adjacency, sbm_generate, save_graph
from .model import save_checkpoint
from .tokens import TokenSequences, generate_tokens
from .training import TrainConfig, prepare_node_data, token_graph, train_once, write_history

OUTPUT_ENV = "GCFORMER_OUTPUT_DIR"
DATA_KEYS = ("edges", "features", "labels", "sbm_blocks", "sbm_p_intra", "sbm_p_inter",
             "sbm_feature_dim", "sbm_feature_noise", "sbm_seed")
RUN_KEYS = ("repeats", "workers", "output_dir", "sweep")

log = logging.getLogger("gcformer")


class CLIError(Exception):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def parse_axis(text: str) -> tuple[str, list]:
    """``name=v1,v2,...`` or ``name=start:stop[:step]`` (inclusive)."""
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"sweep axis must look like name=values, got {text!r}")
    name, spec = text.split("=", 1)
    if ":" in spec:
        parts = [float(p) for p in spec.split(":")]
        start, stop, step = (parts + [1.0])[:3]
        count = int(round((stop - start) / step)) + 1
        values = [round(start + i * step, 10) for i in range(count)]
        if all(float(v).is_integer() for v in values) and all(float(p).is_integer() for p in parts):
            values = [int(v) for v in values]
    else:
        values = [yaml.safe_load(v) for v in spec.split(",")]
    return name.strip(), values


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config (overrides the config file)")
    for f in fields(TrainConfig):
        kind = {"int": int, "float": float, "bool": _bool}.get(f.type, str)
        g.add_argument(f"--{f.name}", f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None)


def add_data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data source")
    g.add_argument("--edges")
    g.add_argument("--features")
    g.add_argument("--labels")
    g.add_argument("--sbm-blocks", dest="sbm_blocks", type=_int_list, help="e.g. 100,100")
    g.add_argument("--sbm-p-intra", dest="sbm_p_intra", type=float)
    g.add_argument("--sbm-p-inter", dest="sbm_p_inter", type=float)
    g.add_argument("--sbm-feature-dim", dest="sbm_feature_dim", type=int)
    g.add_argument("--sbm-feature-noise", dest="sbm_feature_noise", type=float)
    g.add_argument("--sbm-seed", dest="sbm_seed", type=int)


def load_config_file(path) -> dict:
    """Flat YAML (or JSON) mapping of config keys; ``sweep`` may map axis names to lists."""
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise CLIError(f"{path}: config must be a key-value mapping")
    return doc


def resolve(args) -> tuple[TrainConfig, dict, dict]:
    """Merge config file and flags into (TrainConfig, data source, run options)."""
    doc = load_config_file(args.config) if getattr(args, "config", None) else {}
    train_keys = set(TrainConfig.field_names())
    unknown = set(doc) - train_keys - set(DATA_KEYS) - set(RUN_KEYS)
    if unknown:
        raise CLIError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg_dict = {k: v for k, v in doc.items() if k in train_keys}
    data = {k: v for k, v in doc.items() if k in DATA_KEYS}
    run = {k: v for k, v in doc.items() if k in RUN_KEYS}
    for key in train_keys:
        if getattr(args, key, None) is not None:
            cfg_dict[key] = getattr(args, key)
    for key in DATA_KEYS:
        if getattr(args, key, None) is not None:
            data[key] = getattr(args, key)
    if not data:
        raise CLIError("no data source: pass --edges/--features/--labels or --sbm-blocks")
    if "sbm_blocks" not in data and not all(k in data for k in ("edges", "features", "labels")):
        raise CLIError("file data source needs --edges, --features and --labels")
    try:
        cfg = TrainConfig.from_dict(cfg_dict)
    except (TypeError, ValueError) as exc:
        raise CLIError(str(exc)) from None
    for key in ("repeats", "workers", "output_dir"):
        if getattr(args, key, None) is not None:
            run[key] = getattr(args, key)
    return cfg, data, run


def output_dir(args, run: dict | None = None) -> Path:
    env = os.environ.get(OUTPUT_ENV)
    chosen = env or getattr(args, "out", None) or (run or {}).get("output_dir") or "runs"
    path = Path(chosen)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_train(args) -> int:
    cfg, data, run = resolve(args)
    out = output_dir(args, run)
    g = load_data(data)
    out_run = train_once(g, cfg)
    write_history(out_run.fit.history, out / "history.csv")
    save_checkpoint(out_run.fit.model, out / "model.gcm")
    out_run.tokens.save(out / "tokens.gct")
    summary = {
        "test_acc": out_run.test_acc,
        "val_acc": out_run.val_acc,
        "best_epoch": out_run.fit.best_epoch,
        "epochs_run": len(out_run.fit.history),
        "homophily": edge_homophily(g) if g.num_edges else None,
        "config": asdict(cfg),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    if args.plot:
        from .plots import plot_history

        plot_history(out_run.fit.history, out / "history.png")
    print(f"test_acc={100 * out_run.test_acc:.2f}% val_acc={100 * out_run.val_acc:.2f}% "
          f"best_epoch={out_run.fit.best_epoch} out={out}")
    return 0


def _report_all(records, out: Path, stem: str, plot: bool) -> None:
    for fmt in ("csv", "jsonl", "markdown"):
        emit_report(records, fmt, out, stem)
    if plot:
        from .plots import render_figures

        render_figures(records, out, stem)


def _print_records(records) -> None:
    for r in records:
        acc = f"{100 * r.mean:.2f} ± {100 * r.std:.2f}" if r.accuracies else "n/a"
        print(f"{json.dumps(r.cell)}\t{acc}\t{r.status}")


def cmd_sweep(args) -> int:
    cfg, data, run = resolve(args)
    sweep = dict(run.get("sweep") or {})
    if args.preset:
        sweep.update(PRESETS[args.preset])
    for axis in args.sweep or []:
        name, values = parse_axis(axis)
        sweep[name] = values
    out = output_dir(args, run)
    spec = ExperimentSpec(cfg, data, sweep, int(run.get("repeats", 5)), out, int(run.get("workers", 1)))
    records = run_experiment(spec)
    _report_all(records, out, "results", not args.no_plot)
    _print_records(records)
    return 0


def cmd_ablate(args) -> int:
    cfg, data, run = resolve(args)
    out = output_dir(args, run)
    spec = ExperimentSpec(cfg, data, {}, int(run.get("repeats", 5)), out, int(run.get("workers", 1)))
    records = run_ablation(spec)
    _report_all(records, out, "ablation", not args.no_plot)
    _print_records(records)
    return 0


def cmd_tokens(args) -> int:
    if args.inspect:
        tok = TokenSequences.load(args.inspect)
        print(f"n={tok.n} p_k={tok.p_k} n_k={tok.n_k} sha256={tok.checksum()}")
        for i in range(min(args.rows, tok.n)):
            print(f"{i}\tattr+{tok.pos_attr[i].tolist()} attr-{tok.neg_attr[i].tolist()}"
                  f"\ttopo+{tok.pos_topo[i].tolist()} topo-{tok.neg_topo[i].tolist()}")
        return 0
    cfg, data, run = resolve(args)
    g = load_data(data)
    adj = normalize_adjacency(g)
    nd = prepare_node_data(g, cfg, make_splits(g, cfg.seed) if cfg.pca_fit_scope == "train_only" else None, adj)
    tok = generate_tokens(token_graph(g, nd), adj, cfg.k, cfg.p_k, cfg.n_k, cfg.seed)
    path = Path(args.output) if args.output else output_dir(args, run) / "tokens.gct"
    path.parent.mkdir(parents=True, exist_ok=True)
    tok.save(path)
    print(f"wrote {path} n={tok.n} p_k={tok.p_k} n_k={tok.n_k} sha256={tok.checksum()}")
    return 0


def cmd_synth(args) -> int:
    g = sbm_generate(args.blocks, args.p_intra, args.p_inter, args.feature_dim, args.feature_noise, args.seed)
    out = output_dir(args)
    feat = out / ("features.bin" if args.binary_features else "features.csv")
    save_graph(g, out / "edges.tsv", feat, out / "labels.txt", binary_features=args.binary_features)
    h = edge_homophily(g) if g.num_edges else float("nan")
    print(f"wrote {out} n={g.n} edges={g.num_edges} classes={g.c} homophily={h:.4f}")
    return 0


def cmd_report(args) -> int:
    src = Path(args.results)
    if src.is_dir():
        src = src / RESULTS_FILE
    records = read_jsonl(src)
    if not records:
        raise CLIError(f"{src}: no records")
    out = Path(args.out) if args.out else src.parent
    if os.environ.get(OUTPUT_ENV):
        out = Path(os.environ[OUTPUT_ENV])
    formats = ("csv", "jsonl", "markdown") if args.format == "all" else (args.format,)
    for fmt in formats:
        print(emit_report(records, fmt, out, args.stem))
    if not args.no_plot:
        from .plots import render_figures

        for p in render_figures(records, out, args.stem):
            print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="YAML/JSON key-value config file")
        p.add_argument("--out", help=f"output directory (env {OUTPUT_ENV} overrides)")
        if data:
            add_data_flags(p)
            add_config_flags(p)

    p = sub.add_parser("train", help="train one model and evaluate it")
    common(p)
    p.add_argument("--plot", action="store_true", help="also render history.png")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid sweep over config axes")
    common(p)
    p.add_argument("--sweep", action="append", metavar="NAME=VALUES", help="e.g. p_k=2:10 or alpha=0,0.5,1")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--repeats", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="compare variants full, N, C, NE, NN")
    common(p)
    p.add_argument("--repeats", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("tokens", help="generate a token cache or inspect one")
    common(p)
    p.add_argument("--output", help="cache file path (default <out>/tokens.gct)")
    p.add_argument("--inspect", metavar="FILE")
    p.add_argument("--rows", type=int, default=5)
    p.set_defaults(func=cmd_tokens)

    p = sub.add_parser("synth", help="write an SBM graph in the edge/feature/label file formats")
    p.add_argument("--out", help=f"output directory (env {OUTPUT_ENV} overrides)")
    p.add_argument("--blocks", type=_int_list, default=[100, 100])
    p.add_argument("--p-intra", type=float, default=0.1)
    p.add_argument("--p-inter", type=float, default=0.01)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--feature-noise", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--binary-features", action="store_true", help="write GCF1 binary features")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="render tables and figures from results.jsonl")
    p.add_argument("results", help="results.jsonl or the directory holding it")
    p.add_argument("--out")
    p.add_argument("--format", choices=["all", "csv", "jsonl", "markdown"], default="all")
    p.add_argument("--stem", default="results")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CLIError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"gcformer {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
