"""Command-line interface: ``graphgen <command> ...``.

Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .baselines import ERModel, SeqConfig, SeqModel, er_fit, er_samples, seq_samples
from .generator import Limits, export_trace, sample_graphs, shift_bias
from .graphcore import gen_synthetic, read_jsonl, write_jsonl
from .heads import GraphModel
from .likelihood import (GraphTooLargeError, MAX_ENUM_NODES, best_ordering_nll,
                         fixed_ordering_nll, marginal_bruteforce, marginal_importance)
from .tensor import DivergenceError
from .trainer import (REQUIRED_KEYS, CheckpointError, GraphStream, TrainConfig,
                      load_checkpoint, save_checkpoint, train, write_curve)

FAMILIES = ("cycle", "tree", "ba", "rank")


class UsageError(Exception):
    pass


def _emit(args, payload: dict, text: str | None = None) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))
    elif text is not None:
        print(text)


def _triple(s: str) -> list[float]:
    parts = s.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected n,e,r")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError("expected three numbers n,e,r") from None


def _ints(s: str) -> list[int]:
    try:
        return [int(p) for p in s.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers") from None


def _floats(s: str) -> list[float]:
    try:
        return [float(p) for p in s.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers") from None


# ---------------------------------------------------------------------------
# config files


def read_config(path) -> dict:
    """Flat key-value config from TOML or JSON (by extension; TOML otherwise)."""
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        data = json.loads(text)
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        data = tomllib.loads(text)
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a table of keys")
    return data


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    if args.n_min > args.n_max:
        raise UsageError("--n-min must not exceed --n-max")
    rng = np.random.default_rng(args.seed)
    graphs = []
    for _ in range(args.count):
        if args.family == "ba":
            graphs.append(gen_synthetic("ba", rng, n=args.n, m=args.m))
        elif args.family == "rank":
            rank = int(rng.choice(args.ranks)) if args.rank is None else args.rank
            graphs.append(gen_synthetic("rank", rng, n_min=args.n_min, n_max=args.n_max,
                                        rank=rank))
        else:
            graphs.append(gen_synthetic(args.family, rng, n_min=args.n_min, n_max=args.n_max))
    write_jsonl(graphs, args.out)
    _emit(args, {"out": str(args.out), "count": len(graphs)},
          f"wrote {len(graphs)} graphs to {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    raw = read_config(args.config) if args.config else {}
    if args.model != "er":
        missing = [k for k in REQUIRED_KEYS if k not in raw]
        if missing:
            raise UsageError(f"config is missing required key {missing[0]!r}")
    raw = dict(raw, model=args.model)
    if args.family:
        raw["family"] = args.family
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        return TrainConfig.from_dict(raw)
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"bad config: {e}") from None


def cmd_train(args) -> int:
    config = _train_config(args)
    graphs = read_jsonl(args.data) if args.data else None
    if graphs is not None and not graphs:
        raise UsageError(f"{args.data} holds no graphs")
    if args.model == "er":
        rng = np.random.default_rng(config.seed)
        if graphs is None:
            graphs = GraphStream(config).batch(rng, args.er_count)
        model = er_fit(graphs)
        save_checkpoint(args.out, model, config=config, kind="er")
        _emit(args, {"p": model.p, "out": str(args.out)},
              f"fitted edge probability {model.p:.6f}; wrote {args.out}")
        return 0
    stream = GraphStream(config, graphs)
    if args.model == "graph":
        model = GraphModel(config.model_config(), seed=config.seed)
    else:
        model = SeqModel(SeqConfig(hidden=config.lstm_hidden, embed=config.lstm_hidden,
                                   node_types=config.node_types, edge_types=config.edge_types,
                                   max_nodes=config.max_nodes,
                                   cond_dim=config.cond_dim if config.conditional else 0),
                         seed=config.seed)
    log = None if args.json else print
    result = train(config, stream, model, log=log)
    save_checkpoint(args.out, result.model, config=config, step=result.step, adam=result.adam,
                    rng=result.rng)
    curve_path = args.curve or Path(str(args.out) + ".curve.csv")
    write_curve(result.curve, curve_path)
    final = float(np.mean([v for _, v in result.curve[-50:]])) if result.curve else None
    _emit(args, {"out": str(args.out), "curve": str(curve_path), "steps": result.step,
                 "final_nll": final},
          f"wrote {args.out} and {curve_path}")
    return 0


def _sample(ckpt, count: int, rng, limits: Limits, cond, batch_size: int = 500):
    model = ckpt.model
    conds = None if cond is None else np.tile(np.asarray(cond, float), (count, 1))
    if ckpt.kind == "er":
        if cond is not None:
            raise UsageError("the E-R baseline cannot be conditioned")
        return [(g, None) for g in er_samples(model, count, rng)]
    if cond is not None and not model.config.conditional:
        raise UsageError("--condition given but the checkpoint is unconditional")
    if cond is None and model.config.conditional:
        raise UsageError("this checkpoint is conditional; pass --condition n,e,r")
    if ckpt.kind == "lstm":
        samples = seq_samples(model, count, rng, limits, conds, batch_size)
    else:
        samples = sample_graphs(model, count, rng, limits, conds, batch_size)
    return [(s.graph, s.trace) for s in samples]


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    if args.bias_addnode or args.bias_addedge:
        if ckpt.kind != "graph":
            raise UsageError("bias shifts apply to graph-model checkpoints only")
        if args.bias_addnode:
            ckpt.model = shift_bias(ckpt.model, "addnode", args.bias_addnode)
        if args.bias_addedge:
            ckpt.model = shift_bias(ckpt.model, "addedge", args.bias_addedge)
    rng = np.random.default_rng(args.seed)
    out = _sample(ckpt, args.count, rng, Limits(args.max_nodes), args.condition)
    write_jsonl([g for g, _ in out], args.out)
    if args.trace_dir:
        d = Path(args.trace_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i, (_, trace) in enumerate(out):
            if trace is not None:
                (d / f"sample_{i:05d}.dot").write_text(export_trace(trace, "dot"))
    mean_nodes = float(np.mean([g.num_nodes for g, _ in out])) if out else 0.0
    _emit(args, {"out": str(args.out), "count": len(out), "mean_nodes": mean_nodes},
          f"wrote {len(out)} samples to {args.out} (mean nodes {mean_nodes:.3f})")
    return 0


def cmd_eval(args) -> int:
    samples = read_jsonl(args.samples)
    reference = read_jsonl(args.reference)
    if not samples or not reference:
        raise UsageError("samples and reference files must both be nonempty")
    conds = None
    if args.task == "conditional":
        if args.condition is None:
            raise UsageError("--task conditional needs --condition n,e,r")
        conds = [args.condition] * len(samples)
    report = metrics.metrics_report(samples, reference, args.task, conds, args.reverse_kl)
    text = json.dumps(report, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_marginal(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.kind != "graph":
        raise UsageError("marginal likelihood needs a graph-model checkpoint")
    model = ckpt.model
    graphs = read_jsonl(args.graphs)
    rng = np.random.default_rng(args.seed)
    if args.mode == "brute":
        for i, g in enumerate(graphs):
            if g.num_nodes > MAX_ENUM_NODES:
                raise UsageError(f"graph_id {i} has {g.num_nodes} nodes; brute mode caps at "
                                 f"{MAX_ENUM_NODES} (use --mode is-uniform)")
    rows = []
    for i, g in enumerate(graphs):
        fixed = fixed_ordering_nll(model, g, family=args.family)
        best = best_ordering_nll(model, g) if g.num_nodes <= MAX_ENUM_NODES else float("nan")
        if args.mode == "brute":
            marg, se = -marginal_bruteforce(model, g), 0.0
        else:
            q = "uniform" if args.mode == "is-uniform" else "canonical"
            est = marginal_importance(model, g, q, args.samples, rng, family=args.family)
            marg, se = -est.log_p, est.stderr
        rows.append({"graph_id": i, "fixed_nll": fixed, "best_nll": best,
                     "neg_log_marginal": marg, "stderr": se})
    cols = ["graph_id", "fixed_nll", "best_nll", "neg_log_marginal", "stderr"]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        if args.json and not args.out:
            print(json.dumps(rows))
        else:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in rows:
                w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if args.out:
            fh.close()
    return 0


def cmd_bias_sweep(args) -> int:
    from .plotting import plot_bias_sweep

    ckpt = load_checkpoint(args.ckpt)
    if ckpt.kind != "graph":
        raise UsageError("bias sweeps need a graph-model checkpoint")
    rows = []
    per_delta = {}
    for delta in args.deltas:
        model = shift_bias(ckpt.model, args.head, delta)
        rng = np.random.default_rng(args.seed)
        cond = None if args.condition is None else np.tile(args.condition, (args.count, 1))
        samples = sample_graphs(model, args.count, rng, Limits(args.max_nodes), cond)
        nodes = [s.graph.num_nodes for s in samples]
        degs = [2 * s.graph.num_edges / s.graph.num_nodes for s in samples if s.graph.num_nodes]
        per_delta[delta] = nodes if args.head == "addnode" else [s.graph.num_edges for s in samples]
        rows.append({"delta": delta, "mean_nodes": float(np.mean(nodes)),
                     "mean_degree": float(np.mean(degs)) if degs else 0.0,
                     "mean_edges": float(np.mean([s.graph.num_edges for s in samples]))})
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    fig = Path(args.plot) if args.plot else Path(args.out).with_suffix(".png")
    plot_bias_sweep(per_delta, fig, "node count" if args.head == "addnode" else "edge count",
                    title=f"{args.head} bias shift")
    _emit(args, {"rows": rows, "csv": str(args.out), "figure": str(fig)},
          "\n".join(f"{r['delta']:+g}\tnodes {r['mean_nodes']:.3f}\tdegree "
                    f"{r['mean_degree']:.3f}" for r in rows))
    return 0


def cmd_experiment(args) -> int:
    from .experiments import Protocol, run_suite

    if args.steps <= 0 or args.chunk <= 0 or args.samples <= 0:
        raise UsageError("--steps, --chunk and --samples must be positive")
    protocol = Protocol(steps=args.steps, lr=args.lr, dropout=args.dropout, chunk=args.chunk,
                        num_samples=args.samples, num_reference=args.samples, seed=args.seed,
                        cond_n_min=args.cond_n_min, cond_n_max=args.cond_n_max)

    def log(msg: str) -> None:
        print(msg, file=sys.stderr, flush=True)

    outdir = Path(args.outdir) / args.suite
    run_suite(args.suite, protocol, Path(args.artifacts), outdir, log)
    text = (outdir / "summary.csv").read_text().rstrip("\n")
    _emit(args, {"suite": args.suite, "outdir": str(outdir),
                 "rows": list(csv.DictReader(text.splitlines()))}, text)
    return 0


def _labelled(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).stem, item
        out[label] = path
    return out


def _read_curve(path) -> list[tuple[int, float]]:
    with open(path) as f:
        return [(int(r["step"]), float(r["nll"])) for r in csv.DictReader(f)]


def cmd_report(args) -> int:
    from .plotting import plot_degree_histograms, plot_training_curves

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    summary = []
    if args.curves:
        curves = {k: _read_curve(p) for k, p in _labelled(args.curves).items()}
        written.append(str(plot_training_curves(curves, outdir / "training_curves.png",
                                                args.window)))
        for label, c in curves.items():
            tail = [v for _, v in c[-args.window:]]
            summary.append({"kind": "curve", "label": label, "steps": len(c),
                            "value": float(np.mean(tail)) if tail else float("nan")})
    if args.samples:
        sets = {k: read_jsonl(p) for k, p in _labelled(args.samples).items()}
        written.append(str(plot_degree_histograms(sets, outdir / "degree_histograms.png")))
        if args.reference:
            ref = read_jsonl(args.reference)
            for label, graphs in sets.items():
                summary.append({"kind": "degree_kl", "label": label, "steps": len(graphs),
                                "value": metrics.degree_kl(graphs, ref)})
    if not written:
        raise UsageError("report needs --curves and/or --samples")
    table = outdir / "summary.csv"
    with open(table, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["kind", "label", "steps", "value"])
        w.writeheader()
        w.writerows(summary)
    written.append(str(table))
    _emit(args, {"files": written}, "\n".join(written))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphgen", description=__doc__.splitlines()[0])
    p.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic JSONL dataset")
    g.add_argument("--family", choices=FAMILIES, required=True)
    g.add_argument("--n-min", type=int, default=10)
    g.add_argument("--n-max", type=int, default=20)
    g.add_argument("--n", type=int, default=15, help="BA node count")
    g.add_argument("--m", type=int, default=2, help="BA edges per new node")
    g.add_argument("--rank", type=int, default=None, help="fixed cycle rank (family rank)")
    g.add_argument("--ranks", type=_ints, default=[0, 1, 3])
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--model", choices=("graph", "lstm", "er"), default="graph")
    t.add_argument("--config", help="TOML or JSON file of training settings")
    src = t.add_mutually_exclusive_group()
    src.add_argument("--data", help="JSONL training graphs")
    src.add_argument("--family", choices=FAMILIES, help="generate training graphs on the fly")
    t.add_argument("--er-count", type=int, default=10000,
                   help="graphs drawn to fit E-R when no --data is given")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--curve", help="CSV path for the NLL curve (default: OUT.curve.csv)")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="draw graphs from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--condition", type=_triple)
    s.add_argument("--bias-addnode", type=float, default=0.0)
    s.add_argument("--bias-addedge", type=float, default=0.0)
    s.add_argument("--max-nodes", type=int, default=25)
    s.add_argument("--trace-dir")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="metrics JSON for a sample file")
    e.add_argument("--samples", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--task", choices=metrics.TASKS, required=True)
    e.add_argument("--condition", type=_triple)
    e.add_argument("--reverse-kl", action="store_true")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    m = sub.add_parser("marginal", help="fixed / best / marginal NLL per graph")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--graphs", required=True)
    m.add_argument("--mode", choices=("brute", "is-uniform", "is-canonical"), default="brute")
    m.add_argument("--samples", type=int, default=1000)
    m.add_argument("--family", choices=("cycle", "tree"), default=None,
                   help="family whose canonical ordering defines the fixed column")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out")
    m.set_defaults(fn=cmd_marginal)

    b = sub.add_parser("bias-sweep", help="sample under a grid of bias shifts")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--head", choices=("addnode", "addedge"), default="addnode")
    b.add_argument("--deltas", type=_floats, default=[-1.0, 0.0, 1.0, 2.0])
    b.add_argument("--count", type=int, default=1000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--condition", type=_triple)
    b.add_argument("--max-nodes", type=int, default=25)
    b.add_argument("--out", required=True, help="CSV output; the figure goes next to it")
    b.add_argument("--plot")
    b.set_defaults(fn=cmd_bias_sweep)

    r = sub.add_parser("report", help="render figures and a summary CSV")
    r.add_argument("--curves", nargs="*", default=[], help="LABEL=curve.csv ...")
    r.add_argument("--samples", nargs="*", default=[], help="LABEL=samples.jsonl ...")
    r.add_argument("--reference", help="reference JSONL for degree KL")
    r.add_argument("--window", type=int, default=50)
    r.add_argument("--outdir", required=True)
    r.set_defaults(fn=cmd_report)

    x = sub.add_parser("experiment", help="train (cached) and evaluate one experiment suite")
    x.add_argument("suite", choices=("cycle", "tree", "ba", "bias", "conditional"))
    x.add_argument("--artifacts", required=True, help="checkpoint cache directory")
    x.add_argument("--outdir", required=True)
    x.add_argument("--steps", type=int, default=6000)
    x.add_argument("--lr", type=float, default=1e-3)
    x.add_argument("--dropout", type=float, default=0.0)
    x.add_argument("--chunk", type=int, default=250)
    x.add_argument("--samples", type=int, default=10000)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--cond-n-min", type=int, default=10)
    x.add_argument("--cond-n-max", type=int, default=20)
    x.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"graphgen {args.command}: error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"graphgen {args.command}: training diverged: {e}", file=sys.stderr)
        return 1
    except (CheckpointError, GraphTooLargeError, OSError, ValueError, KeyError) as e:
        print(f"graphgen {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
