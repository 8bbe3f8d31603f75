"""Minimal dense numeric kernel: tensors, recorded forward ops, reverse-mode
gradients, and Adam.

Tensors wrap row-major numpy arrays (rank 0..2) and are immutable once
created, except through explicit optimizer updates. Forward ops run eagerly;
when a ComputationRecord is active (see `recording`) each op is appended to
it, and `backward` walks the record in reverse to accumulate d(loss)/d(param)
for every tensor created with requires_grad=True.

Precision is a process-global setting: float32 by default, float64 for
oracle tests (`set_default_dtype` / the `precision` context manager).
No broadcasting beyond bias-row addition; other shape mismatches raise.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_STATE = threading.local()
_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors created from raw data (float32/float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported default dtype {dt}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def precision(dtype):
    """Temporarily switch the global default dtype (used by 64-bit oracle tests)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    """Immutable dense array with an optional gradient-tracking flag.

    data is row-major, rank 0 (scalar), 1, or 2. requires_grad marks leaf
    tensors whose gradients `backward` reports; name is used in optimizer
    diagnostics and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        if arr.ndim > 2:
            raise DimensionError(f"rank {arr.ndim} tensor not supported (max 2)")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class OpEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    aux: dict = field(default_factory=dict)


@dataclass
class ComputationRecord:
    """Ordered log of primitive ops from one forward pass.

    Topological by construction (ops append as they execute). `replay`
    re-executes every entry from its inputs' current data and returns the
    recomputed outputs, which must equal the recorded ones bit-exactly.
    """

    entries: list[OpEntry] = field(default_factory=list)

    def append(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, **aux):
        self.entries.append(OpEntry(op, inputs, output, aux))

    def replay(self) -> dict[Tensor, np.ndarray]:
        out: dict[Tensor, np.ndarray] = {}
        for e in self.entries:
            fn = _FORWARD[e.op]
            out[e.output] = fn(*[t.data for t in e.inputs], **e.aux)
        return out


def _active_stack() -> list[ComputationRecord]:
    if not hasattr(_STATE, "records"):
        _STATE.records = []
    return _STATE.records


@contextmanager
def recording(record: ComputationRecord | None = None):
    """Activate a ComputationRecord; ops executed inside are appended to it."""
    rec = record if record is not None else ComputationRecord()
    stack = _active_stack()
    stack.append(rec)
    try:
        yield rec
    finally:
        stack.pop()


def _emit(op: str, inputs: tuple[Tensor, ...], output: Tensor, **aux) -> Tensor:
    stack = _active_stack()
    if stack:
        stack[-1].append(op, inputs, output, **aux)
    return output


# ---------------------------------------------------------------------------
# Forward kernels (pure array -> array; shared by ops, replay, and backward)
# ---------------------------------------------------------------------------

def _affine_fwd(x, w, b):
    return x @ w + b


def _relu_fwd(x):
    return np.maximum(x, 0)


def _sigmoid_fwd(x):
    # Evaluate via exp(-|x|) so the exponent never overflows.
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t)).astype(x.dtype, copy=False)


def _dot_fwd(a, b):
    if a.ndim == 1:
        return np.asarray(a @ b)
    return np.einsum("ij,ij->i", a, b)


def _sum_fwd(x):
    return np.asarray(x.sum())


def _scale_fwd(x, c):
    return x * x.dtype.type(c)


def _add_fwd(a, b):
    return a + b


def _mul_fwd(a, b):
    return a * b


def _log_fwd(x):
    return np.log(x)


def _clamp_fwd(x, lo, hi):
    return np.clip(x, lo, hi)


def _softplus_fwd(x):
    # log(1 + e^x) without overflow: max(x, 0) + log1p(e^{-|x|})
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def _gather_fwd(table, idx):
    return table[idx]


def _repeat_fwd(x, k):
    return np.repeat(x, k, axis=0)


_FORWARD = {
    "affine": _affine_fwd,
    "relu": _relu_fwd,
    "sigmoid": _sigmoid_fwd,
    "dot": _dot_fwd,
    "sum": _sum_fwd,
    "scale": _scale_fwd,
    "add": _add_fwd,
    "mul": _mul_fwd,
    "log": _log_fwd,
    "clamp": _clamp_fwd,
    "softplus": _softplus_fwd,
    "gather_rows": _gather_fwd,
    "repeat_rows": _repeat_fwd,
}


# ---------------------------------------------------------------------------
# Recorded ops
# ---------------------------------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b. x (B,in) or (in,), w (in,out), b (out,) -> (B,out) or (out,)."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(
            f"affine: input {x.data.shape} does not conform with weight {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise DimensionError(
            f"affine: bias {b.data.shape} does not match weight {w.data.shape}")
    out = Tensor(_affine_fwd(x.data, w.data, b.data), dtype=x.data.dtype)
    return _emit("affine", (x, w, b), out)


def relu(x: Tensor) -> Tensor:
    out = Tensor(_relu_fwd(x.data), dtype=x.data.dtype)
    return _emit("relu", (x,), out)


def sigmoid(x: Tensor) -> Tensor:
    out = Tensor(_sigmoid_fwd(x.data), dtype=x.data.dtype)
    return _emit("sigmoid", (x,), out)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Vector dot -> scalar; or row-wise dot of two (B,D) -> (B,)."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"dot: shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(_dot_fwd(a.data, b.data), dtype=a.data.dtype)
    return _emit("dot", (a, b), out)


def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all entries -> scalar."""
    out = Tensor(_sum_fwd(x.data), dtype=x.data.dtype)
    return _emit("sum", (x,), out)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    out = Tensor(_scale_fwd(x.data, c), dtype=x.data.dtype)
    return _emit("scale", (x,), out, c=float(c))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; the single allowed broadcast is (B,D) + (D,) bias rows."""
    if a.data.shape != b.data.shape:
        row_bias = (a.data.ndim == 2 and b.data.ndim == 1
                    and a.data.shape[1] == b.data.shape[0])
        if not row_bias:
            raise DimensionError(f"add: shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(_add_fwd(a.data, b.data), dtype=a.data.dtype)
    return _emit("add", (a, b), out)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul: shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(_mul_fwd(a.data, b.data), dtype=a.data.dtype)
    return _emit("mul", (a, b), out)


def log(x: Tensor) -> Tensor:
    out = Tensor(_log_fwd(x.data), dtype=x.data.dtype)
    return _emit("log", (x,), out)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only strictly inside the interval."""
    out = Tensor(_clamp_fwd(x.data, lo, hi), dtype=x.data.dtype)
    return _emit("clamp", (x,), out, lo=float(lo), hi=float(hi))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x); the stable building block for log-sigmoid loss terms
    (log sigma(z) = -softplus(-z)), with gradient sigma(x) everywhere."""
    out = Tensor(_softplus_fwd(x.data), dtype=x.data.dtype)
    return _emit("softplus", (x,), out)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows table[idx]. idx (N,) int -> (N,D); backward scatter-adds."""
    idx = np.asarray(idx)
    if idx.ndim != 1 or table.data.ndim != 2:
        raise DimensionError("gather_rows: need 2-d table and 1-d index")
    out = Tensor(_gather_fwd(table.data, idx), dtype=table.data.dtype)
    return _emit("gather_rows", (table,), out, idx=idx)


def repeat_rows(x: Tensor, k: int) -> Tensor:
    """Tile each row k times consecutively: (B,D) -> (B*k,D)."""
    if x.data.ndim != 2:
        raise DimensionError("repeat_rows: need a 2-d tensor")
    out = Tensor(_repeat_fwd(x.data, k), dtype=x.data.dtype)
    return _emit("repeat_rows", (x,), out, k=int(k))


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def _affine_bwd(g, x, w, b):
    gx = g @ w.data.T
    if x.data.ndim == 1:
        gw = np.outer(x.data, g)
        gb = g
    else:
        gw = x.data.T @ g
        gb = g.sum(axis=0)
    return gx, gw, gb


def _dot_bwd(g, a, b):
    if a.data.ndim == 1:
        return g * b.data, g * a.data
    return g[:, None] * b.data, g[:, None] * a.data


def _scatter_rows(g, idx, shape):
    """Segment-sum rows of g into a zero array of `shape` (gather backward).
    Sort + reduceat is much faster than np.add.at for many repeated rows."""
    out = np.zeros(shape, dtype=g.dtype)
    if len(idx) == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    boundaries = np.concatenate(
        [[0], np.nonzero(np.diff(sorted_idx))[0] + 1])
    sums = np.add.reduceat(g[order], boundaries, axis=0)
    out[sorted_idx[boundaries]] = sums
    return out


def _add_bwd(g, a, b):
    gb = g.sum(axis=0) if b.data.ndim < g.ndim else g
    return g, gb


def backward(record: ComputationRecord, loss: Tensor,
             params: list[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(t) for requires_grad tensors used in the record.

    loss must be a scalar produced by the record. Gradients add across every
    use of a tensor; tensors that never feed the loss (detached) get zeros.
    Returns {tensor: grad} for `params` when given, else for every
    requires_grad leaf seen in the record.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}

    for e in reversed(record.entries):
        g = grads.pop(id(e.output), None)
        if g is None:
            continue
        op, ins = e.op, e.inputs
        if op == "affine":
            contribs = _affine_bwd(g, *ins)
        elif op == "relu":
            contribs = (g * (ins[0].data > 0),)
        elif op == "sigmoid":
            s = e.output.data
            contribs = (g * s * (1 - s),)
        elif op == "dot":
            contribs = _dot_bwd(g, *ins)
        elif op == "sum":
            contribs = (np.broadcast_to(g, ins[0].data.shape),)
        elif op == "scale":
            contribs = (g * ins[0].data.dtype.type(e.aux["c"]),)
        elif op == "add":
            contribs = _add_bwd(g, *ins)
        elif op == "mul":
            contribs = (g * ins[1].data, g * ins[0].data)
        elif op == "log":
            contribs = (g / ins[0].data,)
        elif op == "clamp":
            x = ins[0].data
            inside = (x > e.aux["lo"]) & (x < e.aux["hi"])
            contribs = (g * inside,)
        elif op == "softplus":
            contribs = (g * _sigmoid_fwd(ins[0].data),)
        elif op == "gather_rows":
            contribs = (_scatter_rows(g, e.aux["idx"], ins[0].data.shape),)
        elif op == "repeat_rows":
            k = e.aux["k"]
            contribs = (g.reshape(ins[0].data.shape[0], k, -1).sum(axis=1),)
        else:  # pragma: no cover
            raise ContractError(f"unknown op {op!r}")

        for t, gc in zip(ins, contribs):
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gc
            else:
                grads[key] = np.array(gc, copy=True) if gc.base is not None else gc

    if params is None:
        seen: dict[int, Tensor] = {}
        for e in record.entries:
            for t in e.inputs:
                if t.requires_grad:
                    seen[id(t)] = t
        params = list(seen.values())
    return {p: grads.get(id(p), np.zeros_like(p.data)) for p in params}


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter first/second moments plus step count and hyperparameters."""

    params: list[Tensor]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
        if not self.v:
            self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(params: list[Tensor], grads: dict[Tensor, np.ndarray],
              state: AdamState) -> AdamState:
    """One Adam update with bias correction; mutates param data in place.

    Aborts (raises NumericError, state untouched) if any gradient is
    non-finite, naming the offending parameter.
    """
    if params is not state.params and params != state.params:
        raise ContractError("adam_step: params do not match optimizer state")
    gs = []
    for i, p in enumerate(params):
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != param shape {p.data.shape}"
                f" for {p.name or f'param[{i}]'}")
        if not np.all(np.isfinite(g)):
            raise NumericError(
                f"non-finite gradient for parameter {p.name or f'param[{i}]'}")
        gs.append(g)

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, gs, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(
            p.data.dtype, copy=False)
    return state
