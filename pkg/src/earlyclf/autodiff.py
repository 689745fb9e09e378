"""Dense float64 tensors with taped reverse-mode differentiation.

Every operation goes through a small registry (`apply`) that validates
shapes, checks outputs for NaN/Inf, and — while a `Tape` is recording —
appends a record so a single reverse sweep can propagate gradients.
Gradients accumulate additively into the persistent `.grad` slot of
learnable tensors; call `Tensor.zero_grad` (or let the optimizer do it)
between minibatches.

The op set is deliberately small: just enough to express an LSTM body,
feed-forward softmax heads, and the cross-entropy / surrogate losses
built on top of them. No broadcasting beyond the fused bias forms, no
higher-order derivatives.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

# Clamp applied to log arguments inside cross-entropy so saturated
# predictions keep losses finite.
LOG_CLAMP = 1e-12


class AutodiffError(Exception):
    """Base error for tensor/tape misuse."""


class ShapeError(AutodiffError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(AutodiffError):
    """A tensor value became NaN or Inf."""


def _check_finite(values: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{where}: non-finite values encountered")


class Tensor:
    """A dense float64 array, optionally with a persistent gradient slot.

    Learnable tensors are constructed with ``requires_grad=True`` and keep
    a ``grad`` array of identical shape; everything else carries values
    only. Intermediates produced by ops remember the tape they were
    recorded on so ``backward`` can find the computation.
    """

    __slots__ = ("values", "grad", "requires_grad", "tape", "name")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(values, dtype=np.float64)
        _check_finite(arr, "tensor init" if name is None else f"tensor init ({name})")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.tape: Optional[Tape] = None
        self.name = name

    @classmethod
    def _from_op(cls, values: np.ndarray) -> "Tensor":
        # Fast path for op outputs: finiteness already checked in apply().
        out = cls.__new__(cls)
        out.values = values
        out.requires_grad = False
        out.grad = None
        out.tape = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        if self.values.shape != ():
            raise ShapeError(f"item() expects a scalar tensor, got shape {self.values.shape}")
        return float(self.values)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"<Tensor{tag} shape={self.values.shape} grad={'yes' if self.grad is not None else 'no'}>"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("kind", "inputs", "output", "ctx")

    def __init__(self, kind, inputs, output, ctx):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.ctx = ctx


class Tape:
    """Ordered record of applied ops; consumed by one reverse sweep.

    Records are appended in execution order, which is a topological order
    by construction, so the reverse sweep visits each op exactly once.
    Use as a context manager around the forward computation::

        with Tape():
            loss = ...
        backward(loss)
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise AutodiffError("a tape is already recording; nested tapes are not supported")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = None

    def __len__(self) -> int:
        return len(self.records)


_active_tape: Optional[Tape] = None


class _OpDef:
    __slots__ = ("name", "arity", "forward", "vjp")

    def __init__(self, name, arity, forward, vjp):
        self.name = name
        self.arity = arity  # -1 means variadic
        self.forward = forward
        self.vjp = vjp


OPS: dict[str, _OpDef] = {}


def register_op(name: str, arity: int, forward: Callable, vjp: Callable) -> None:
    """Add an op to the registry. `forward(*values, **ctx) -> ndarray`;
    `vjp(g, in_values, out_values, ctx) -> tuple of per-input grads` (None
    for inputs the op does not differentiate)."""
    if name in OPS:
        raise AutodiffError(f"op {name!r} already registered")
    OPS[name] = _OpDef(name, arity, forward, vjp)


def unregister_op(name: str) -> None:
    OPS.pop(name, None)


def apply(kind: str, *inputs, **ctx) -> Tensor:
    """Run a registered op on the inputs, recording it if a tape is active."""
    op = OPS.get(kind)
    if op is None:
        raise AutodiffError(f"unknown op {kind!r}")
    if op.arity >= 0 and len(inputs) != op.arity:
        raise ShapeError(f"{kind}: expected {op.arity} inputs, got {len(inputs)}")
    tensors = tuple(as_tensor(x) for x in inputs)
    out_values = op.forward(*(t.values for t in tensors), **ctx)
    _check_finite(out_values, kind)
    out = Tensor._from_op(out_values)
    if _active_tape is not None:
        _active_tape.records.append(_Record(kind, tensors, out, ctx))
        out.tape = _active_tape
    return out


def backward(loss: Tensor) -> None:
    """Reverse sweep from a recorded scalar loss.

    Populates ``.grad`` (additively) on every learnable tensor the loss
    depends on. A tape can be swept once; record a fresh computation for
    another backward pass.
    """
    if loss.values.shape != ():
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.values.shape}")
    tape = loss.tape
    if tape is None:
        raise AutodiffError("loss was not recorded on a tape")
    if tape.consumed:
        raise AutodiffError("backward already ran on this tape; record a fresh computation")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue  # op did not feed the loss
        in_values = tuple(t.values for t in rec.inputs)
        in_grads = OPS[rec.kind].vjp(g, in_values, rec.output.values, rec.ctx)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = gi if acc is None else acc + gi
            if t.tape is not tape:  # constant w.r.t. this tape
                leaves[id(t)] = t
    for key, t in leaves.items():
        if t.requires_grad:
            t.grad += grads[key]


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Op registry
# ---------------------------------------------------------------------------

def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def ce_values(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise cross-entropy -sum(p * log(max(q, LOG_CLAMP))) over the last axis.

    Shared by the autodiff op and by plain-numpy consumers (reward curves,
    reference losses) so the clamp convention lives in one place.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _require(p.shape == q.shape, f"cross_entropy: shapes {p.shape} vs {q.shape}")
    return -np.sum(p * np.log(np.maximum(q, LOG_CLAMP)), axis=-1)


def _fw_matmul(a, b):
    _require(a.ndim == 2 and b.ndim == 2, f"matmul: need 2-D operands, got {a.shape} @ {b.shape}")
    _require(a.shape[1] == b.shape[0], f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    return a @ b


def _vjp_matmul(g, ins, out, ctx):
    a, b = ins
    return g @ b.T, a.T @ g


def _fw_add(a, b):
    _require(a.shape == b.shape, f"add: shapes {a.shape} vs {b.shape}")
    return a + b


def _fw_add_bias(x, b):
    _require(b.ndim == 1 and x.shape[-1] == b.shape[0], f"add_bias: {x.shape} + {b.shape}")
    return x + b


def _vjp_add_bias(g, ins, out, ctx):
    return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


def _fw_mul(a, b):
    _require(a.shape == b.shape, f"mul: shapes {a.shape} vs {b.shape}")
    return a * b


def _fw_scale(x, *, k):
    return x * k


def _fw_scale_rows(y, s):
    _require(y.ndim == 2 and s.shape == (y.shape[0],), f"scale_rows: {y.shape} by {s.shape}")
    return y * s[:, None]


def _vjp_scale_rows(g, ins, out, ctx):
    y, s = ins
    return g * s[:, None], np.sum(g * y, axis=1)


def _fw_slice_cols(x, *, lo, hi):
    _require(x.ndim == 2 and 0 <= lo < hi <= x.shape[1], f"slice_cols: [{lo}:{hi}] of {x.shape}")
    return x[:, lo:hi]


def _vjp_slice_cols(g, ins, out, ctx):
    (x,) = ins
    gx = np.zeros_like(x)
    gx[:, ctx["lo"]:ctx["hi"]] = g
    return (gx,)


def _fw_select_col(x, *, j):
    _require(x.ndim == 2 and 0 <= j < x.shape[1], f"select_col: col {j} of {x.shape}")
    return x[:, j]


def _vjp_select_col(g, ins, out, ctx):
    (x,) = ins
    gx = np.zeros_like(x)
    gx[:, ctx["j"]] = g
    return (gx,)


def _fw_select_per_row(x, *, idx):
    _require(x.ndim == 2 and idx.shape == (x.shape[0],), f"select_per_row: idx {idx.shape} on {x.shape}")
    return x[np.arange(x.shape[0]), idx]


def _vjp_select_per_row(g, ins, out, ctx):
    (x,) = ins
    gx = np.zeros_like(x)
    gx[np.arange(x.shape[0]), ctx["idx"]] = g
    return (gx,)


def _fw_concat_rows(*parts):
    _require(len(parts) >= 1, "concat_rows: needs at least one input")
    width = parts[0].shape[-1:]
    for p in parts:
        _require(p.ndim == 2 and p.shape[-1:] == width, f"concat_rows: mismatched part {p.shape}")
    return np.concatenate(parts, axis=0)


def _vjp_concat_rows(g, ins, out, ctx):
    sizes = [p.shape[0] for p in ins]
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=0))


def _fw_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fw_relu(x):
    return np.maximum(x, 0.0)


def _fw_softmax(x):
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _vjp_softmax(g, ins, out, ctx):
    dot = np.sum(g * out, axis=-1, keepdims=True)
    return ((g - dot) * out,)


def _fw_cross_entropy(p, q):
    return ce_values(p, q)


def _vjp_cross_entropy(g, ins, out, ctx):
    p, q = ins
    qc = np.maximum(q, LOG_CLAMP)
    ge = g[..., None]
    gp = -np.log(qc) * ge
    gq = -(p / qc) * (q > LOG_CLAMP) * ge  # clamped region is flat in q
    return gp, gq


def _fw_reduce_sum(x):
    return np.asarray(x.sum())


def _vjp_reduce_sum(g, ins, out, ctx):
    return (np.full_like(ins[0], float(g)),)


def _fw_row_sum(x):
    _require(x.ndim >= 1, "row_sum: needs at least 1-D input")
    return x.sum(axis=-1)


def _vjp_row_sum(g, ins, out, ctx):
    (x,) = ins
    return (np.broadcast_to(g[..., None], x.shape).copy(),)


def _fw_minimum(a, b):
    _require(a.shape == b.shape, f"minimum: shapes {a.shape} vs {b.shape}")
    return np.minimum(a, b)


def _vjp_minimum(g, ins, out, ctx):
    a, b = ins
    take_a = a <= b  # ties route to the first operand
    return g * take_a, g * ~take_a


def _fw_clip(x, *, lo, hi):
    _require(lo < hi, f"clip: empty interval [{lo}, {hi}]")
    return np.clip(x, lo, hi)


def _vjp_clip(g, ins, out, ctx):
    (x,) = ins
    inside = (x > ctx["lo"]) & (x < ctx["hi"])
    return (g * inside,)


def _fw_affine(x, w, b):
    _require(x.ndim == 2 and w.ndim == 2 and x.shape[1] == w.shape[0],
             f"affine: {x.shape} @ {w.shape}")
    _require(b.shape == (w.shape[1],), f"affine: bias {b.shape} vs width {w.shape[1]}")
    return x @ w + b


def _vjp_affine(g, ins, out, ctx):
    x, w, b = ins
    return g @ w.T, x.T @ g, g.sum(axis=0)


def _fw_affine2(x, wx, h, wh, b):
    _require(x.ndim == 2 and wx.ndim == 2 and x.shape[1] == wx.shape[0],
             f"affine2: {x.shape} @ {wx.shape}")
    _require(h.ndim == 2 and wh.ndim == 2 and h.shape[1] == wh.shape[0],
             f"affine2: {h.shape} @ {wh.shape}")
    _require(wx.shape[1] == wh.shape[1] == b.shape[0],
             f"affine2: widths {wx.shape[1]}/{wh.shape[1]}/{b.shape[0]} differ")
    _require(x.shape[0] == h.shape[0], f"affine2: batch {x.shape[0]} vs {h.shape[0]}")
    return x @ wx + h @ wh + b


def _vjp_affine2(g, ins, out, ctx):
    x, wx, h, wh, b = ins
    return g @ wx.T, x.T @ g, g @ wh.T, h.T @ g, g.sum(axis=0)


def _fw_embedding(table, *, ids):
    _require(table.ndim == 2, f"embedding: table must be 2-D, got {table.shape}")
    _require(ids.ndim == 1, f"embedding: ids must be 1-D, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table with {table.shape[0]} rows")
    return table[ids]


def _vjp_embedding(g, ins, out, ctx):
    (table,) = ins
    gt = np.zeros_like(table)
    np.add.at(gt, ctx["ids"], g)
    return (gt,)


register_op("matmul", 2, _fw_matmul, _vjp_matmul)
register_op("add", 2, _fw_add, lambda g, ins, out, ctx: (g, g))
register_op("add_bias", 2, _fw_add_bias, _vjp_add_bias)
register_op("mul", 2, _fw_mul, lambda g, ins, out, ctx: (g * ins[1], g * ins[0]))
register_op("scale", 1, _fw_scale, lambda g, ins, out, ctx: (g * ctx["k"],))
register_op("scale_rows", 2, _fw_scale_rows, _vjp_scale_rows)
register_op("slice_cols", 1, _fw_slice_cols, _vjp_slice_cols)
register_op("select_col", 1, _fw_select_col, _vjp_select_col)
register_op("select_per_row", 1, _fw_select_per_row, _vjp_select_per_row)
register_op("concat_rows", -1, _fw_concat_rows, _vjp_concat_rows)
register_op("sigmoid", 1, _fw_sigmoid, lambda g, ins, out, ctx: (g * out * (1.0 - out),))
register_op("tanh", 1, np.tanh, lambda g, ins, out, ctx: (g * (1.0 - out * out),))
register_op("relu", 1, _fw_relu, lambda g, ins, out, ctx: (g * (ins[0] > 0),))
register_op("softmax", 1, _fw_softmax, _vjp_softmax)
register_op("cross_entropy", 2, _fw_cross_entropy, _vjp_cross_entropy)
register_op("reduce_sum", 1, _fw_reduce_sum, _vjp_reduce_sum)
register_op("row_sum", 1, _fw_row_sum, _vjp_row_sum)
register_op("minimum", 2, _fw_minimum, _vjp_minimum)
register_op("clip", 1, _fw_clip, _vjp_clip)
register_op("affine", 3, _fw_affine, _vjp_affine)
register_op("affine2", 5, _fw_affine2, _vjp_affine2)
register_op("embedding", 1, _fw_embedding, _vjp_embedding)


# ---------------------------------------------------------------------------
# Convenience wrappers
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    return apply("matmul", a, b)


def add(a, b) -> Tensor:
    return apply("add", a, b)


def add_bias(x, b) -> Tensor:
    return apply("add_bias", x, b)


def mul(a, b) -> Tensor:
    return apply("mul", a, b)


def scale(x, k: float) -> Tensor:
    return apply("scale", x, k=float(k))


def scale_rows(y, s) -> Tensor:
    return apply("scale_rows", y, s)


def slice_cols(x, lo: int, hi: int) -> Tensor:
    return apply("slice_cols", x, lo=int(lo), hi=int(hi))


def select_col(x, j: int) -> Tensor:
    return apply("select_col", x, j=int(j))


def select_per_row(x, idx) -> Tensor:
    return apply("select_per_row", x, idx=np.asarray(idx, dtype=np.intp))


def concat_rows(parts) -> Tensor:
    return apply("concat_rows", *parts)


def sigmoid(x) -> Tensor:
    return apply("sigmoid", x)


def tanh(x) -> Tensor:
    return apply("tanh", x)


def relu(x) -> Tensor:
    return apply("relu", x)


def softmax(x) -> Tensor:
    return apply("softmax", x)


def cross_entropy(p, q) -> Tensor:
    return apply("cross_entropy", p, q)


def reduce_sum(x) -> Tensor:
    return apply("reduce_sum", x)


def row_sum(x) -> Tensor:
    return apply("row_sum", x)


def minimum(a, b) -> Tensor:
    return apply("minimum", a, b)


def clip(x, lo: float, hi: float) -> Tensor:
    return apply("clip", x, lo=float(lo), hi=float(hi))


def affine(x, w, b) -> Tensor:
    return apply("affine", x, w, b)


def affine2(x, wx, h, wh, b) -> Tensor:
    return apply("affine2", x, wx, h, wh, b)


def embedding_lookup(table, ids) -> Tensor:
    return apply("embedding", table, ids=np.asarray(ids, dtype=np.intp))
