"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every operation returns a :class:`Tensor`.  When a :class:`Tape` is active
and at least one input requires a gradient, the operation appends a record
``(output, inputs, backward_fn)`` to the tape.  :func:`backward` walks the
records in reverse order and returns gradients for the requested leaves.

The model structure changes with every training example, so a tape is built
from scratch for each forward pass and thrown away afterwards.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DivergenceError",
    "backward",
    "no_tape",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "concat",
    "gather",
    "take",
    "columns",
    "segment_sum",
    "segment_log_softmax",
    "sigmoid",
    "log_sigmoid",
    "tanh",
    "relu",
    "softmax",
    "log_softmax",
    "log",
    "exp",
    "mean",
    "sum_all",
    "reshape",
    "linear",
    "gru_cell",
    "message_sum",
    "gated_sum",
    "grad_check",
    "GradCheckReport",
    "AdamState",
    "adam_step",
    "clip_grad_norm",
]


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an operation."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DivergenceError(FloatingPointError):
    """Non-finite values reached the optimizer."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def _not_scalar(t: Tensor):
    raise ShapeError("item", t.shape, detail="tensor is not a scalar")


# ---------------------------------------------------------------------------
# tape


_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


class Tape:
    """Ordered record of primitive operations, used as a context manager."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)


class no_tape:
    """Suspend recording, e.g. for sampling with frozen parameters."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()


def _active() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    tape = _active()
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                out = Tensor.__new__(Tensor)
                out.data = out_data
                out.requires_grad = True
                out.name = None
                tape.records.append((out, inputs, backward_fn))
                return out
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.name = None
    return out


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict:
    """Gradients of scalar ``loss`` with respect to leaf tensors.

    Returns a dict keyed by tensor.  With ``wrt`` given, every tensor in it
    gets an entry (zeros when the loss does not depend on it); otherwise all
    reached leaves are returned.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    produced = {id(rec[0]) for rec in tape.records}
    for out, inputs, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in produced:
                leaves[key] = t
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    if wrt is None:
        return {t: grads[k] for k, t in leaves.items()}
    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in wrt}


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or not sb or not sa or (len(sb) == 1 and sa[-1] == sb[0]):
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def fn(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _record(ad @ bd, (a, b), fn)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def fn(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _record(ad * bd, (a, b), fn)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_wrap(t) for t in tensors)
    if not ts:
        raise ShapeError("concat", detail="no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(out, ts, fn)


def _scatter_rows(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` buckets; ``bincount`` beats ``np.add.at`` here."""
    rest = values.shape[1:]
    w = int(np.prod(rest, dtype=np.int64))
    if w == 1:
        flat, wts = idx, values.reshape(-1)
    else:
        flat = (idx[:, None] * w + np.arange(w)).reshape(-1)
        wts = values.reshape(-1)
    return np.bincount(flat, weights=wts, minlength=n * w).reshape((n,) + rest)


def gather(a, index) -> Tensor:
    """Row gather ``a[index]`` along axis 0 (duplicates allowed)."""
    a = _wrap(a)
    idx = np.asarray(index, dtype=np.intp)
    n = a.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError("gather", a.shape, idx.shape, detail="index out of range")
    pos = idx % n if n else idx

    def fn(g):
        return (_scatter_rows(pos, g, n),)

    return _record(a.data[idx], (a,), fn)


def columns(a, start: int, stop: int) -> Tensor:
    """Column slice ``a[:, start:stop]`` of a matrix."""
    a = _wrap(a)
    if a.data.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise ShapeError("columns", a.shape, detail=f"slice {start}:{stop}")
    shape = a.shape

    def fn(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _record(a.data[:, start:stop], (a,), fn)


def take(a, index) -> Tensor:
    """General numpy-style indexing; gradients scatter-add back."""
    a = _wrap(a)
    try:
        out = a.data[index]
    except IndexError:
        raise ShapeError("take", a.shape, detail=f"bad index {index!r}") from None
    shape = a.shape

    def fn(g):
        res = np.zeros(shape)
        np.add.at(res, index, g)
        return (res,)

    return _record(np.array(out, dtype=np.float64), (a,), fn)


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets by ``segment_ids``."""
    a = _wrap(a)
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.shape[0] != a.shape[0]:
        raise ShapeError("segment_sum", a.shape, seg.shape)
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ShapeError("segment_sum", a.shape, seg.shape, detail="segment id out of range")
    out = _scatter_rows(seg, a.data, num_segments)

    def fn(g):
        return (g[seg],)

    return _record(out, (a,), fn)


def segment_log_softmax(a, segment_ids, num_segments: int) -> Tensor:
    """Log-softmax of a flat vector within each segment."""
    a = _wrap(a)
    x = a.data
    seg = np.asarray(segment_ids, dtype=np.intp)
    if x.ndim != 1 or seg.shape != x.shape:
        raise ShapeError("segment_log_softmax", a.shape, seg.shape)
    m = np.full(num_segments, -np.inf)
    np.maximum.at(m, seg, x)
    m = np.where(np.isfinite(m), m, 0.0)
    z = x - m[seg]
    s = np.bincount(seg, weights=np.exp(z), minlength=num_segments)
    out = z - np.log(s)[seg]
    p = np.exp(out)

    def fn(g):
        gs = np.bincount(seg, weights=g, minlength=num_segments)
        return (g - p * gs[seg],)

    return _record(out, (a,), fn)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # stable for any finite input

    def fn(g):
        return (g * out * (1.0 - out),)

    return _record(out, (a,), fn)


def log_sigmoid(a) -> Tensor:
    """Numerically stable ``log(sigmoid(a))``."""
    a = _wrap(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    def fn(g):
        return (g * np.exp(-np.logaddexp(0.0, x)),)  # 1 - sigmoid(x)

    return _record(out, (a,), fn)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def fn(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), fn)


def log(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    return _record(np.log(x), (a,), lambda g: (g / x,))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def mean(a) -> Tensor:
    a = _wrap(a)
    n = a.data.size
    shape = a.shape
    return _record(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n),))


def sum_all(a) -> Tensor:
    a = _wrap(a)
    shape = a.shape
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, g),))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _record(out, (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# fused layers
#
# Each of these records a single tape entry with a hand-derived backward.
# They compute exactly what the corresponding compositions of the primitives
# above compute; the tests compare both routes.


def _sig(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def linear(x, W, b) -> Tensor:
    """``x @ W + b``."""
    x, W, b = _wrap(x), _wrap(W), _wrap(b)
    xd, Wd = x.data, W.data
    if xd.ndim != 2 or Wd.ndim != 2 or xd.shape[1] != Wd.shape[0] or b.shape != (Wd.shape[1],):
        raise ShapeError("linear", x.shape, W.shape, b.shape)

    def fn(g):
        return (g @ Wd.T if x.requires_grad else None, xd.T @ g, g.sum(axis=0))

    return _record(xd @ Wd + b.data, (x, W, b), fn)


def gru_cell(a, h, Wz, Wr, Wh, Uz, Ur, Uh, bz, br, bh) -> Tensor:
    """GRU update of states ``h`` from inputs ``a``.

    ``z = s(a Wz + h Uz + bz)``, ``r = s(a Wr + h Ur + br)``,
    ``c = tanh(a Wh + (r * h) Uh + bh)``, output ``(1 - z) h + z c``.
    """
    ts = tuple(_wrap(t) for t in (a, h, Wz, Wr, Wh, Uz, Ur, Uh, bz, br, bh))
    a, h, Wz, Wr, Wh, Uz, Ur, Uh, bz, br, bh = ts
    ad, hd = a.data, h.data
    H = hd.shape[1] if hd.ndim == 2 else -1
    if (ad.ndim != 2 or hd.ndim != 2 or ad.shape[0] != hd.shape[0]
            or Wz.shape != (ad.shape[1], H) or Uz.shape != (H, H)):
        raise ShapeError("gru_cell", a.shape, h.shape, Wz.shape, Uz.shape)
    z = _sig(ad @ Wz.data + hd @ Uz.data + bz.data)
    r = _sig(ad @ Wr.data + hd @ Ur.data + br.data)
    rh = r * hd
    c = np.tanh(ad @ Wh.data + rh @ Uh.data + bh.data)
    out = hd + z * (c - hd)

    def fn(g):
        dza = g * (c - hd) * z * (1.0 - z)
        dca = g * z * (1.0 - c * c)
        drh = dca @ Uh.data.T
        dra = drh * hd * r * (1.0 - r)
        dh = g * (1.0 - z) + drh * r + dra @ Ur.data.T + dza @ Uz.data.T
        da = None
        if a.requires_grad:
            da = dza @ Wz.data.T + dra @ Wr.data.T + dca @ Wh.data.T
        dW = ad.T @ np.concatenate([dza, dra, dca], axis=1)
        dU = hd.T @ np.concatenate([dza, dra], axis=1)
        return (da, dh, dW[:, :H], dW[:, H:2 * H], dW[:, 2 * H:], dU[:, :H], dU[:, H:],
                rh.T @ dca, dza.sum(axis=0), dra.sum(axis=0), dca.sum(axis=0))

    return _record(out, ts, fn)


def message_sum(h, send, recv, edge_x, W, b, num_nodes: int) -> Tensor:
    """Per-receiver sum of ``[h[send], h[recv], edge_x] @ W + b``."""
    h, edge_x, W, b = _wrap(h), _wrap(edge_x), _wrap(W), _wrap(b)
    send = np.asarray(send, dtype=np.intp)
    recv = np.asarray(recv, dtype=np.intp)
    hd, xd, Wd = h.data, edge_x.data, W.data
    H = hd.shape[1]
    if (send.shape != recv.shape or xd.shape[0] != send.shape[0]
            or Wd.shape[0] != 2 * H + xd.shape[1]):
        raise ShapeError("message_sum", h.shape, edge_x.shape, W.shape)
    X = np.concatenate([hd[send], hd[recv], xd], axis=1)
    out = _scatter_rows(recv, X @ Wd + b.data, num_nodes)

    def fn(g):
        gm = g[recv]
        dX = gm @ Wd.T
        dh = (_scatter_rows(send, dX[:, :H], hd.shape[0])
              + _scatter_rows(recv, dX[:, H:2 * H], hd.shape[0]))
        return dh, dX[:, 2 * H:], X.T @ gm, gm.sum(axis=0)

    return _record(out, (h, edge_x, W, b), fn)


def gated_sum(h, seg, num_segments: int, Wf, bf, Wg, bg) -> Tensor:
    """Per-segment ``sum s(h Wg + bg) * (h Wf + bf)``."""
    h, Wf, bf, Wg, bg = (_wrap(t) for t in (h, Wf, bf, Wg, bg))
    seg = np.asarray(seg, dtype=np.intp)
    hd = h.data
    if hd.ndim != 2 or Wf.shape[0] != hd.shape[1] or seg.shape != (hd.shape[0],):
        raise ShapeError("gated_sum", h.shape, Wf.shape, seg.shape)
    gate = _sig(hd @ Wg.data + bg.data)
    val = hd @ Wf.data + bf.data
    out = _scatter_rows(seg, gate * val, num_segments)

    def fn(g):
        gp = g[seg]
        dval = gp * gate
        dgate = gp * val * gate * (1.0 - gate)
        dh = dval @ Wf.data.T + dgate @ Wg.data.T
        return dh, hd.T @ dval, dval.sum(axis=0), hd.T @ dgate, dgate.sum(axis=0)

    return _record(out, (h, Wf, bf, Wg, bg), fn)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(fn: Callable[[], Tensor], params: dict[str, Tensor],
               eps: float = 1e-5, tol: float = 1e-4,
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients with central differences.

    Relative error per parameter array is ``|a - n| / max(|a|, |n|)`` in the
    Euclidean norm; arrays whose gradients are both zero score 0.  With
    ``max_entries`` only that many randomly chosen entries per array are
    perturbed and compared.
    """
    rng = np.random.default_rng(seed)
    with Tape() as tape:
        loss = fn()
    analytic = backward(tape, loss, wrt=params.values())
    errors = {}
    for name, p in params.items():
        num = np.zeros_like(p.data)
        flat, nflat = p.data.reshape(-1), num.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            with no_tape():
                fp = fn().item()
            flat[i] = orig - eps
            with no_tape():
                fm = fn().item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * eps)
        a = analytic[p].reshape(-1)[idx]
        num = nflat[idx]
        denom = max(np.linalg.norm(a), np.linalg.norm(num))
        errors[name] = 0.0 if denom == 0 else float(np.linalg.norm(a - num) / denom)
    return GradCheckReport(max(errors.values(), default=0.0), errors, tol)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place to global norm ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(
                f"non-finite gradient for {name!r}; try a lower learning rate")
    if state.lr < 0:
        raise ValueError("learning rate must be non-negative")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape, detail=name)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params
