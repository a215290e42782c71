"""End-to-end experiment protocols with resumable, cached training.

Training is the expensive part, so every model is checkpointed under an
artifacts directory every ``chunk`` steps and resumed from there; a finished
checkpoint is reused as is.  Evaluation (sampling and metrics) always runs
from the checkpoint with fixed seeds, so results are reproducible from the
artifacts alone.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tn
from .baselines import SeqConfig, SeqModel, er_fit, er_samples, seq_samples
from .generator import Limits, sample_graphs, shift_bias
from .graphcore import Graph, gen_synthetic
from .heads import GraphModel
from .metrics import cond_match, condition_of, metrics_report
from .trainer import (GraphStream, TrainConfig, batch_logprobs, load_checkpoint, order_graph,
                      save_checkpoint, train)

__all__ = [
    "Protocol",
    "FAMILY_TASK",
    "train_cached",
    "heldout_nll",
    "run_family",
    "run_bias_sweep",
    "run_conditional",
    "run_suite",
    "SUITES",
]

FAMILY_TASK = {"cycle": "cycles", "tree": "trees", "ba": "ba"}
Log = Callable[[str], None]


@dataclass
class Protocol:
    """Knobs shared by the experiment runners."""

    steps: int = 6000
    lr: float = 1e-3
    dropout: float = 0.0
    batch_size: int = 32
    chunk: int = 250
    num_samples: int = 10000
    num_reference: int = 10000
    num_heldout: int = 1000
    seed: int = 0
    cond_n_min: int = 10
    cond_n_max: int = 20
    cond_steps: int | None = None

    def train_config(self, family: str, **kw) -> TrainConfig:
        return TrainConfig(lr=self.lr, dropout=self.dropout, batch_size=self.batch_size,
                           max_steps=self.steps, seed=self.seed, family=family, log_every=0,
                           **kw)


def _lstm_for(config: TrainConfig) -> SeqModel:
    return SeqModel(SeqConfig(hidden=config.lstm_hidden, embed=config.lstm_hidden,
                              node_types=config.node_types, edge_types=config.edge_types,
                              max_nodes=config.max_nodes,
                              cond_dim=config.cond_dim if config.conditional else 0),
                    seed=config.seed)


def _read_curve(path: Path) -> list[tuple[int, float]]:
    if not path.exists():
        return []
    with open(path) as f:
        return [(int(r["step"]), float(r["nll"])) for r in csv.DictReader(f)]


def _append_curve(path: Path, rows: list[tuple[int, float]]) -> None:
    new = not path.exists()
    with open(path, "a") as f:
        if new:
            f.write("step,nll\n")
        for s, v in rows:
            f.write(f"{s},{v!r}\n")


def train_cached(name: str, config: TrainConfig, artifacts: Path, chunk: int = 250,
                 log: Log | None = None):
    """Train (or resume, or load) ``artifacts/name.ckpt``; returns (model, curve).

    ``config.model`` picks the graph model or the LSTM.  The stored config must
    match ``config`` up to a larger ``max_steps`` (which resumes training);
    otherwise the artifact is stale and an error is raised.
    """
    artifacts = Path(artifacts)
    artifacts.mkdir(parents=True, exist_ok=True)
    ckpt_path = artifacts / f"{name}.ckpt"
    curve_path = artifacts / f"{name}.curve.csv"
    stream = GraphStream(config)
    if ckpt_path.exists():
        ck = load_checkpoint(ckpt_path)
        # a longer step budget extends a run; any other change makes it stale
        if (ck.config is None or replace(ck.config, max_steps=config.max_steps) != config
                or ck.step > config.max_steps):
            raise ValueError(f"{ckpt_path} was trained with a different config; "
                             "delete it to retrain")
        model, step, adam, rng = ck.model, ck.step, ck.adam, ck.rng
        curve = _read_curve(curve_path)[:step]
    else:
        model = GraphModel(config.model_config(), seed=config.seed) if config.model == "graph" \
            else _lstm_for(config)
        step, adam, rng, curve = 0, None, np.random.default_rng(config.seed), []
        if curve_path.exists():
            curve_path.unlink()
    t0 = time.time()
    while step < config.max_steps:
        stop = min(step + chunk, config.max_steps)
        res = train(replace(config, max_steps=stop), stream, model, adam=adam, rng=rng,
                    start_step=step)
        model, adam, rng, step = res.model, res.adam, res.rng, stop
        _append_curve(curve_path, res.curve)
        curve.extend(res.curve)
        save_checkpoint(ckpt_path, model, config=config, step=step, adam=adam, rng=rng)
        if log is not None:
            recent = np.mean([v for _, v in curve[-chunk:]])
            log(f"{name}: step {step}/{config.max_steps} nll {recent:.3f} "
                f"({time.time() - t0:.0f}s)")
    return model, curve


def heldout_nll(model, graphs: list[Graph], seed: int, conds=None, chunk: int = 200) -> float:
    """Mean NLL of one uniform random ordering per graph (no dropout)."""
    rng = np.random.default_rng(seed)
    seqs = [order_graph(g, "uniform_random", rng) for g in graphs]
    out = []
    with tn.no_tape():
        for i in range(0, len(seqs), chunk):
            c = None if conds is None else conds[i:i + chunk]
            out.append(-batch_logprobs(model, seqs[i:i + chunk], c).data)
    return float(np.mean(np.concatenate(out)))


def _reference(family: str, count: int, seed: int, **kw) -> list[Graph]:
    rng = np.random.default_rng(seed)
    return [gen_synthetic(family, rng, **kw) for _ in range(count)]


def _summary(samples: list[Graph], reference: list[Graph], task: str) -> dict:
    rep = metrics_report(samples, reference, task)
    rep["mean_nodes"] = float(np.mean([g.num_nodes for g in samples]))
    rep["mean_edges"] = float(np.mean([g.num_edges for g in samples]))
    rep["pct_truncated"] = float(np.mean(["truncated" in g.flags for g in samples]))
    return rep


def run_family(family: str, protocol: Protocol, artifacts: Path,
               log: Log | None = None) -> dict:
    """Graph model, LSTM and E-R on one synthetic family.

    Both neural models see the same stream settings and step budget.  Each
    model draws ``num_samples`` graphs; metrics compare them with a fresh
    reference set from the family.
    """
    task = FAMILY_TASK[family]
    config = protocol.train_config(family)
    graph, graph_curve = train_cached(f"{family}_graph", config, artifacts, protocol.chunk, log)
    lstm, lstm_curve = train_cached(f"{family}_lstm", replace(config, model="lstm"), artifacts,
                                    protocol.chunk, log)
    stream = GraphStream(config)
    er = er_fit(stream.batch(np.random.default_rng(protocol.seed + 1), 10000))

    reference = _reference(family, protocol.num_reference, protocol.seed + 2)
    heldout = _reference(family, protocol.num_heldout, protocol.seed + 3)
    n = protocol.num_samples
    sets = {
        "graph": [s.graph for s in sample_graphs(graph, n, np.random.default_rng(11))],
        "lstm": [s.graph for s in seq_samples(lstm, n, np.random.default_rng(12))],
        "er": er_samples(er, n, np.random.default_rng(13)),
    }
    out = {"family": family, "task": task, "protocol": asdict(protocol),
           "er_p": er.p, "models": {}}
    for label, samples in sets.items():
        out["models"][label] = _summary(samples, reference, task)
    out["models"]["graph"]["heldout_nll"] = heldout_nll(graph, heldout, protocol.seed + 4)
    out["models"]["lstm"]["heldout_nll"] = heldout_nll(lstm, heldout, protocol.seed + 4)
    tail = max(1, min(500, protocol.steps // 10))
    out["models"]["graph"]["train_nll_tail"] = float(np.mean([v for _, v in graph_curve[-tail:]]))
    out["models"]["lstm"]["train_nll_tail"] = float(np.mean([v for _, v in lstm_curve[-tail:]]))
    out["num_parameters"] = {"graph": graph.num_parameters(), "lstm": lstm.num_parameters()}
    out["curves"] = {"graph": graph_curve, "lstm": lstm_curve}
    out["samples"] = sets
    out["reference"] = reference
    return out


def run_bias_sweep(model: GraphModel, deltas=(-1.0, 0.0, 1.0, 2.0), count: int = 2000,
                   seed: int = 21) -> dict:
    """Mean node count under add-node shifts and mean degree under add-edge shifts."""
    rows = {"addnode": [], "addedge": []}
    samples = {"addnode": {}, "addedge": {}}
    for head in rows:
        for d in deltas:
            got = sample_graphs(shift_bias(model, head, d), count, np.random.default_rng(seed),
                                Limits())
            gs = [s.graph for s in got]
            nodes = np.array([g.num_nodes for g in gs])
            edges = np.array([g.num_edges for g in gs])
            nz = nodes > 0
            rows[head].append({
                "delta": d,
                "mean_nodes": float(nodes.mean()),
                "mean_edges": float(edges.mean()),
                "mean_degree": float(np.mean(2 * edges[nz] / nodes[nz])) if nz.any() else 0.0,
            })
            samples[head][d] = (nodes if head == "addnode" else edges).tolist()
    return {"rows": rows, "samples": samples}


def _sample_conditioned(model, kind: str, conds: np.ndarray, seed: int) -> list[Graph]:
    rng = np.random.default_rng(seed)
    if kind == "graph":
        return [s.graph for s in sample_graphs(model, len(conds), rng, conds=conds)]
    return [s.graph for s in seq_samples(model, len(conds), rng, conds=conds)]


def _match_rates(graphs: list[Graph], conds: np.ndarray) -> dict:
    rows = [cond_match(g, c) for g, c in zip(graphs, conds)]
    return {k: float(np.mean([r[k] for r in rows])) for k in ("nodes", "edges", "rank", "all")}


def run_conditional(protocol: Protocol, artifacts: Path, log: Log | None = None,
                    num_conditions: int = 1000) -> dict:
    """Condition on (n, |E|, cycle rank); train on ranks {0, 1, 3}.

    Evaluated on conditions drawn from the training distribution, on held-out
    rank 2 (interpolation) and on rank 4 (extrapolation).
    """
    steps = protocol.cond_steps or protocol.steps
    config = replace(protocol.train_config("rank", conditional=True, ranks=(0, 1, 3),
                                           n_min=protocol.cond_n_min,
                                           n_max=protocol.cond_n_max),
                     max_steps=steps)
    graph, graph_curve = train_cached("cond_graph", config, artifacts, protocol.chunk, log)
    lstm, lstm_curve = train_cached("cond_lstm", replace(config, model="lstm"), artifacts,
                                    protocol.chunk, log)
    rng = np.random.default_rng(protocol.seed + 5)
    stream = GraphStream(config)
    splits = {
        "train": np.array([condition_of(g) for g in stream.batch(rng, num_conditions)]),
    }
    for name, rank in (("interp_rank2", 2), ("extrap_rank4", 4)):
        splits[name] = np.array([condition_of(gen_synthetic(
            "rank", rng, n_min=protocol.cond_n_min, n_max=protocol.cond_n_max, rank=rank))
            for _ in range(num_conditions)])
    out = {"protocol": asdict(protocol), "splits": {}, "curves": {"graph": graph_curve,
                                                                  "lstm": lstm_curve}}
    for name, conds in splits.items():
        out["splits"][name] = {
            "graph": _match_rates(_sample_conditioned(graph, "graph", conds, 31), conds),
            "lstm": _match_rates(_sample_conditioned(lstm, "lstm", conds, 32), conds),
        }
    return out


SUITES = ("cycle", "tree", "ba", "bias", "conditional")


def _write_rows(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def run_suite(suite: str, protocol: Protocol, artifacts: Path, outdir: Path,
              log: Log | None = None,
              bias_families: tuple[str, ...] = ("ba", "cycle", "tree")) -> dict:
    """Run one experiment and write results.json, summary.csv and figures to ``outdir``."""
    from .plotting import plot_bias_sweep, plot_degree_histograms, plot_training_curves

    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    if suite in FAMILY_TASK:
        res = run_family(suite, protocol, artifacts, log)
        plot_training_curves(res["curves"], outdir / "training_curves.png",
                             title=f"{suite}: training NLL")
        plot_degree_histograms({"data": res["reference"], **res["samples"]},
                               outdir / "degree_histograms.png", title=f"{suite}: degrees")
        for label, rep in res["models"].items():
            rows.append({"model": label, **{k: rep.get(k) for k in (
                "pct_valid", "degree_kl", "pct_novel", "pct_unique", "mean_nodes",
                "mean_edges", "pct_truncated", "heldout_nll", "train_nll_tail")}})
    elif suite == "bias":
        res = {}
        for fam in bias_families:
            config = protocol.train_config(fam)
            model, _ = train_cached(f"{fam}_graph", config, artifacts, protocol.chunk, log)
            res[fam] = run_bias_sweep(model)
            for head, quantity in (("addnode", "node count"), ("addedge", "edge count")):
                plot_bias_sweep(res[fam]["samples"][head], outdir / f"{fam}_{head}.png",
                                quantity, title=f"{fam}: {head} bias shift")
                rows.extend({"family": fam, "head": head, **r} for r in res[fam]["rows"][head])
            del res[fam]["samples"]
    else:
        res = run_conditional(protocol, artifacts, log)
        plot_training_curves(res["curves"], outdir / "training_curves.png",
                             title="conditional: training NLL")
        for split, models in res["splits"].items():
            for label, rates in models.items():
                rows.append({"split": split, "model": label, **rates})
    _write_rows(rows, outdir / "summary.csv")
    slim = {k: v for k, v in res.items() if k not in ("samples", "reference", "curves")}
    (outdir / "results.json").write_text(json.dumps(slim, indent=2, sort_keys=True) + "\n")
    return res
