"""Teacher-forced maximum-likelihood training and the checkpoint container."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .graphcore import (Decision, Graph, canonical_ordering, decisions_from_graph,
                        gen_synthetic, uniform_random_ordering)
from .generator import sequence_logprobs
from .heads import Dropout, GraphModel, ModelConfig
from .metrics import condition_of
from .tensor import AdamState, DivergenceError

__all__ = [
    "TrainConfig",
    "TrainResult",
    "CheckpointError",
    "GraphStream",
    "order_graph",
    "minibatch_loss",
    "train",
    "write_curve",
    "save_checkpoint",
    "load_checkpoint",
    "write_container",
    "read_container",
    "REQUIRED_KEYS",
]

ORDERINGS = ("canonical", "uniform_random")
REQUIRED_KEYS = ("hidden", "rounds", "lr", "batch_size", "ordering", "max_steps")


@dataclass
class TrainConfig:
    hidden: int = 16
    rounds: int = 2
    lr: float = 5e-4
    batch_size: int = 32
    ordering: str = "uniform_random"
    max_steps: int = 1000
    dropout: float = 0.2
    seed: int = 0
    conditional: bool = False
    cond_dim: int = 128
    family: str = "cycle"
    n_min: int = 10
    n_max: int = 20
    ranks: tuple[int, ...] = (0, 1, 3)
    clip: float | None = None
    node_types: int = 1
    edge_types: int = 1
    untie_reverse: bool = False
    mask_connected: bool = False
    log_every: int = 50
    model: str = "graph"
    lstm_hidden: int = 64
    max_nodes: int = 25

    def __post_init__(self):
        if self.hidden <= 0:
            raise ValueError("hidden must be positive")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.ordering not in ORDERINGS:
            raise ValueError(f"ordering must be one of {ORDERINGS}, got {self.ordering!r}")
        if self.model not in ("graph", "lstm", "er"):
            raise ValueError(f"unknown model kind {self.model!r}")
        self.ranks = tuple(int(r) for r in self.ranks)

    def model_config(self) -> ModelConfig:
        return ModelConfig(hidden=self.hidden, rounds=self.rounds, node_types=self.node_types,
                           edge_types=self.edge_types,
                           cond_dim=self.cond_dim if self.conditional else 0,
                           untie_reverse=self.untie_reverse,
                           mask_connected=self.mask_connected)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ranks"] = list(self.ranks)
        return d

    @classmethod
    def from_dict(cls, d: dict, require: Sequence[str] = ()) -> "TrainConfig":
        for key in require:
            if key not in d:
                raise KeyError(f"config is missing required key {key!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class GraphStream:
    """Training graphs: generated on the fly for a family, or drawn from a list.

    A finite dataset is shuffled once per pass.
    """

    def __init__(self, config: TrainConfig, graphs: Sequence[Graph] | None = None):
        self.config = config
        self.graphs = list(graphs) if graphs is not None else None
        if self.graphs is not None and not self.graphs:
            raise ValueError("empty training dataset")
        self._perm: np.ndarray | None = None
        self._pos = 0

    def _one(self, rng: np.random.Generator) -> Graph:
        c = self.config
        if self.graphs is None:
            if c.family == "rank":
                rank = int(rng.choice(c.ranks))
                return gen_synthetic("rank", rng, n_min=c.n_min, n_max=c.n_max, rank=rank)
            if c.family in ("ba", "barabasi_albert"):
                return gen_synthetic(c.family, rng)
            return gen_synthetic(c.family, rng, n_min=c.n_min, n_max=c.n_max)
        if self._perm is None or self._pos >= len(self._perm):
            self._perm = rng.permutation(len(self.graphs))
            self._pos = 0
        g = self.graphs[self._perm[self._pos]]
        self._pos += 1
        return g

    def batch(self, rng: np.random.Generator, size: int) -> list[Graph]:
        return [self._one(rng) for _ in range(size)]

    def state(self) -> dict:
        return {"pos": self._pos,
                "perm": None if self._perm is None else self._perm.tolist()}

    def restore(self, s: dict) -> None:
        self._pos = int(s.get("pos", 0))
        perm = s.get("perm")
        self._perm = None if perm is None else np.asarray(perm, dtype=np.intp)


def order_graph(g: Graph, policy: str, rng: np.random.Generator,
                family: str | None = None) -> list[Decision]:
    if policy == "canonical":
        return decisions_from_graph(g, canonical_ordering(g, family))
    if policy == "uniform_random":
        return decisions_from_graph(g, uniform_random_ordering(g, rng))
    raise ValueError(f"unknown ordering policy {policy!r}")


def batch_logprobs(model, seqs: Sequence[Sequence[Decision]], conds=None,
                   dropout: Dropout | None = None) -> tn.Tensor:
    """Per-sequence log-probabilities on the active tape, for any model kind."""
    if isinstance(model, GraphModel):
        return sequence_logprobs(model, seqs, conds, dropout)[0]
    return model.batch_logprobs(seqs, conds, dropout)


def minibatch_loss(model, seqs: Sequence[Sequence[Decision]], conds=None,
                   dropout: Dropout | None = None) -> tn.Tensor:
    """Mean negative log-likelihood of a batch of decision sequences."""
    if len(seqs) == 0:
        raise ValueError("empty batch")
    return -tn.mean(batch_logprobs(model, seqs, conds, dropout))


@dataclass
class TrainResult:
    model: object
    curve: list[tuple[int, float]]
    adam: AdamState
    rng: np.random.Generator
    step: int
    stream: GraphStream | None = None
    extra: dict = field(default_factory=dict)


def train(config: TrainConfig, stream: GraphStream, model=None, *,
          adam: AdamState | None = None, rng: np.random.Generator | None = None,
          start_step: int = 0, log: Callable[[str], None] | None = None) -> TrainResult:
    """Adam on the minibatch NLL for ``config.max_steps`` steps.

    ``model`` defaults to a fresh :class:`GraphModel`; any object with
    ``params`` and ``batch_logprobs`` also works.  The returned curve holds the
    (pre-update) training NLL of every step.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if model is None:
        model = GraphModel(config.model_config(), seed=config.seed)
    cond_model = getattr(model, "config", None)
    conditional = bool(getattr(cond_model, "conditional", False))
    if conditional and start_step == 0:
        stats = np.array([condition_of(g) for g in stream.batch(rng, 2000)])
        model.set_condition_stats(stats)
    adam = adam if adam is not None else AdamState(lr=config.lr)
    params = model.params
    dropout = Dropout(config.dropout, rng) if config.dropout > 0 else None
    curve: list[tuple[int, float]] = []
    for step in range(start_step, config.max_steps):
        graphs = stream.batch(rng, config.batch_size)
        seqs = [order_graph(g, config.ordering, rng, config.family) for g in graphs]
        conds = np.array([condition_of(g) for g in graphs]) if conditional else None
        with tn.Tape() as tape:
            loss = minibatch_loss(model, seqs, conds, dropout)
        value = float(loss.data)
        if not np.isfinite(value):
            raise DivergenceError(
                f"loss became {value} at step {step}; try a lower learning rate "
                f"(current {adam.lr:g}, e.g. {adam.lr * 0.4:g})")
        grads = tn.backward(tape, loss, wrt=params.values())
        garr = {k: grads[t] for k, t in params.items()}
        if config.clip is not None:
            tn.clip_grad_norm(garr, config.clip)
        tn.adam_step({k: t.data for k, t in params.items()}, garr, adam)
        curve.append((step, value))
        if log is not None and config.log_every and (step + 1) % config.log_every == 0:
            recent = np.mean([v for _, v in curve[-config.log_every:]])
            log(f"step {step + 1} nll {recent:.4f}")
    return TrainResult(model, curve, adam, rng, config.max_steps, stream)


def write_curve(curve: Sequence[tuple[int, float]], path) -> None:
    with open(path, "w") as f:
        f.write("step,nll\n")
        for s, v in curve:
            f.write(f"{s},{v!r}\n")


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout: MAGIC | uint32 version | uint64 header length | JSON header |
#         concatenated little-endian float64 arrays (order given in header)

MAGIC = b"GGENCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    index = []
    offset = 0
    for name, a in arrays.items():
        a = np.asarray(a, dtype=np.float64)
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
    head = dict(header, arrays=index)
    hb = json.dumps(head, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(hb)))
        f.write(hb)
        for a in arrays.values():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp.replace(path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<IQ", raw, pos)
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated header") from e
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    pos += struct.calcsize("<IQ")
    try:
        header = json.loads(raw[pos:pos + hlen])
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    body = raw[pos + hlen:]
    total = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["arrays"])
    if len(body) != 8 * total:
        raise CheckpointError(f"{path}: expected {8 * total} data bytes, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f8")
    arrays = {}
    for e in header.pop("arrays"):
        size = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = flat[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    return header, arrays


def save_checkpoint(path, model, *, config: TrainConfig | None = None, step: int = 0,
                    adam: AdamState | None = None, rng: np.random.Generator | None = None,
                    kind: str | None = None, extra: dict | None = None) -> None:
    """Write model parameters, optimizer state and RNG state to ``path``."""
    if kind is None:
        kind = "graph" if isinstance(model, GraphModel) else getattr(model, "kind", "unknown")
    arrays: dict[str, np.ndarray] = {}
    header: dict = {"kind": kind, "step": step,
                    "train_config": config.to_dict() if config else None,
                    "extra": extra or {}}
    if kind == "er":
        header["model"] = model.to_dict()
    else:
        header["model_config"] = model.config.to_dict()
        arrays.update({f"param.{k}": v for k, v in model.arrays().items()})
        if hasattr(model, "cond_mean"):
            arrays["cond.mean"] = model.cond_mean
            arrays["cond.std"] = model.cond_std
    if adam is not None:
        header["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                          "epsilon": adam.epsilon, "t": adam.t}
        for k in adam.m:
            arrays[f"adam.m.{k}"] = adam.m[k]
            arrays[f"adam.v.{k}"] = adam.v[k]
    if rng is not None:
        header["rng"] = rng.bit_generator.state
    write_container(path, header, arrays)


@dataclass
class Checkpoint:
    kind: str
    model: object
    step: int
    config: TrainConfig | None
    adam: AdamState | None
    rng: np.random.Generator | None
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    header, arrays = read_container(path)
    kind = header.get("kind")
    if kind == "graph":
        mc = ModelConfig(**header["model_config"])
        params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
        model = GraphModel(mc, params)
        model.cond_mean = arrays.get("cond.mean", model.cond_mean)
        model.cond_std = arrays.get("cond.std", model.cond_std)
    elif kind == "lstm":
        from .baselines import SeqConfig, SeqModel
        params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
        model = SeqModel(SeqConfig(**header["model_config"]), params)
        model.cond_mean = arrays.get("cond.mean", model.cond_mean)
        model.cond_std = arrays.get("cond.std", model.cond_std)
    elif kind == "er":
        from .baselines import ERModel
        model = ERModel.from_dict(header["model"])
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    adam = None
    if "adam" in header:
        adam = AdamState(**header["adam"])
        for k, v in arrays.items():
            if k.startswith("adam.m."):
                adam.m[k[len("adam.m."):]] = v
            elif k.startswith("adam.v."):
                adam.v[k[len("adam.v."):]] = v
    rng = None
    if "rng" in header:
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng"]
    tc = header.get("train_config")
    config = TrainConfig.from_dict(tc) if tc else None
    return Checkpoint(kind, model, int(header.get("step", 0)), config, adam, rng,
                      header.get("extra", {}))

