"""Reverse-mode automatic differentiation over numpy arrays.

Tensors store fp32 by default (fp64 is supported for reference paths);
reductions accumulate in fp64 regardless of storage dtype. Every primitive
records itself on a thread-local tape, and backward() replays the tape once
in reverse. Single-threaded within one tape; separate threads get separate
tapes.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np


class ShapeMismatch(Exception):
    pass


class InvalidAxis(Exception):
    pass


class NotScalar(Exception):
    pass


class EmptyMask(Exception):
    pass


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """Dense array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, (np.ndarray, np.generic)):
            # numpy values keep fp64 so reference paths stay fp64 (0-d
            # arithmetic yields numpy scalars); everything else lands in
            # fp32 storage
            arr = np.asarray(data)
            if arr.dtype != np.float32 and arr.dtype != np.float64:
                arr = arr.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=np.float32)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; every operator routes through a recorded primitive
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class TapeEntry:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered record of primitives.

    Append order is a topological order by construction: an operation can
    only run after its inputs exist.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.backward_visits = 0  # instrumentation for the replay invariant

    def __len__(self):
        return len(self.entries)

    def clear(self):
        self.entries.clear()
        self.backward_visits = 0


_tls = threading.local()


def get_tape() -> Tape:
    tape = getattr(_tls, "tape", None)
    if tape is None:
        tape = Tape()
        _tls.tape = tape
    return tape


@contextmanager
def fresh_tape():
    """Run a scope on its own empty tape (restores the previous one on exit)."""
    prev = getattr(_tls, "tape", None)
    tape = Tape()
    _tls.tape = tape
    try:
        yield tape
    finally:
        _tls.tape = prev


def grad_enabled() -> bool:
    return getattr(_tls, "grad_on", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _tls.grad_on = False
    try:
        yield
    finally:
        _tls.grad_on = prev


def _record(op: str, inputs: tuple, out: Tensor, backward_fn) -> Tensor:
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        get_tape().entries.append(TapeEntry(op, inputs, out, backward_fn))
    return out


def _accum(t: Tensor, g: np.ndarray):
    if g is None or not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    if g.dtype != t.grad.dtype:
        g = g.astype(t.grad.dtype)
    t.grad += g.reshape(t.data.shape)


def backward(loss: Tensor):
    """Populate .grad for every requires_grad ancestor of `loss`.

    Gradients accumulate additively across fan-out. Deterministic: the tape
    is walked once, in strict reverse execution order.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    needed = {id(loss)}
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        if id(entry.output) not in needed:
            continue
        tape.backward_visits += 1
        grads = entry.backward_fn(entry.output.grad)
        for t, g in zip(entry.inputs, grads):
            if t.requires_grad:
                _accum(t, g)
                needed.add(id(t))
    # tensors on the tape but off the loss path still get a (zero) buffer
    for entry in tape.entries:
        for t in entry.inputs + (entry.output,):
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# Shape helpers
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), out, bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record("div", (a, b), out, bwd)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    out = Tensor(a.data * s)

    def bwd(g):
        return (g * s,)

    return _record("scale", (a,), out, bwd)


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    """np.matmul semantics for 2-D and batched operands (matching batch dims)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", (a, b), out, bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeMismatch("concat: empty input list")
    ndim = tensors[0].data.ndim
    if not -ndim <= axis < ndim:
        raise InvalidAxis(f"concat: axis {axis} out of range for ndim {ndim}")
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError as e:
        raise ShapeMismatch(f"concat: {e}") from None
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(pieces)

    return _record("concat", tensors, out, bwd)


def slice_(a, key) -> Tensor:
    """Basic slicing; backward scatters the gradient into a zero buffer."""
    a = _as_tensor(a)
    out = Tensor(a.data[key])

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[key] = g.reshape(ga[key].shape)
        return (ga,)

    return _record("slice", (a,), out, bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _record("reshape", (a,), out, bwd)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record("transpose", (a,), out, bwd)


def embedding_gather(table, ids) -> Tensor:
    """Rows of `table` at integer `ids`; duplicate ids accumulate in backward."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeMismatch(f"embedding_gather: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeMismatch("embedding_gather: id out of range")
    out = Tensor(table.data[idx])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record("embedding_gather", (table,), out, bwd)


def scatter_rows(base, idx, rows) -> Tensor:
    """Copy of `base` with rows at `idx` replaced by `rows` (indices unique)."""
    base, rows = _as_tensor(base), _as_tensor(rows)
    idx = np.asarray(idx, dtype=np.int64)
    if rows.shape != (idx.size,) + base.shape[1:]:
        raise ShapeMismatch(f"scatter_rows: rows {rows.shape} vs base {base.shape} at {idx.size} indices")
    data = base.data.copy()
    data[idx] = rows.data
    out = Tensor(data)

    def bwd(g):
        gb = g.copy()
        gb[idx] = 0.0
        return gb, g[idx]

    return _record("scatter_rows", (base, rows), out, bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))

    def bwd(g):
        return (g * (a.data > 0),)

    return _record("relu", (a,), out, bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximation gelu."""
    a = _as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + th))

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du
        return (g * d,)

    return _record("gelu", (a,), out, bwd)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # stable two-sided computation; exp(-|x|) never overflows
    z = np.exp(-np.abs(a.data))
    s = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(a.data.dtype)
    out = Tensor(s)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _record("sigmoid", (a,), out, bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data)
    out = Tensor(e)

    def bwd(g):
        return (g * e,)

    return _record("exp", (a,), out, bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))

    def bwd(g):
        return (g / a.data,)

    return _record("log", (a,), out, bwd)


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    out = Tensor(a.data**p)

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record("power", (a,), out, bwd)


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient routes to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "minimum")
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data))

    def bwd(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _record("minimum", (a, b), out, bwd)


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "maximum")
    take_a = a.data >= b.data
    out = Tensor(np.where(take_a, a.data, b.data))

    def bwd(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _record("maximum", (a, b), out, bwd)


def clip(a, lo=None, hi=None) -> Tensor:
    """Clamp with pass-through gradient strictly inside [lo, hi]."""
    a = _as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi

    def bwd(g):
        return (g * inside,)

    return _record("clip", (a,), out, bwd)


def softmax(a) -> Tensor:
    """Softmax along the last axis."""
    a = _as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e / e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(a.data.dtype)
    out = Tensor(s)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _record("softmax", (a,), out, bwd)


def layernorm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine part)."""
    a = _as_tensor(a)
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    y = ((x - mu) * inv).astype(x.dtype)
    out = Tensor(y)

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _record("layernorm", (a,), out, bwd)


def cross_entropy(logits, target_ids, ignore_mask=None) -> Tensor:
    """Mean token cross-entropy over positions not excluded by `ignore_mask`.

    logits: (T, V); target_ids: (T,) ints; ignore_mask: (T,) bool, True = skip.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"cross_entropy: logits must be (T, V), got {logits.shape}")
    tgt = np.asarray(target_ids, dtype=np.int64)
    if tgt.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy: targets {tgt.shape} vs logits {logits.shape}")
    if ignore_mask is None:
        keep = np.ones(tgt.shape, dtype=bool)
    else:
        keep = ~np.asarray(ignore_mask, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise EmptyMask("cross_entropy: every position is masked out")
    x = logits.data.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    picked = x[np.arange(x.shape[0]), tgt]
    loss = (lse - picked)[keep].sum() / count
    out = Tensor(np.asarray(loss, dtype=logits.data.dtype))

    def bwd(g):
        p = np.exp(x - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(x.shape[0]), tgt] -= 1.0
        p[~keep] = 0.0
        return ((float(g) / count) * p.astype(logits.data.dtype),)

    return _record("cross_entropy", (logits,), out, bwd)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.asarray(a.data.mean(dtype=np.float64), dtype=a.data.dtype))

    def bwd(g):
        return (np.full_like(a.data, float(g) / a.data.size),)

    return _record("mean", (a,), out, bwd)


def sum_(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype))

    def bwd(g):
        return (np.full_like(a.data, float(g)),)

    return _record("sum", (a,), out, bwd)


def l1_distance(a, b) -> Tensor:
    """Mean absolute difference."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"l1_distance: {a.shape} vs {b.shape}")
    d = a.data - b.data
    out = Tensor(np.asarray(np.abs(d).mean(dtype=np.float64), dtype=a.data.dtype))

    def bwd(g):
        s = np.sign(d) * (float(g) / d.size)
        return s.astype(a.data.dtype), (-s).astype(b.data.dtype)

    return _record("l1_distance", (a, b), out, bwd)


def squared_error(a, b) -> Tensor:
    """Mean squared difference."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"squared_error: {a.shape} vs {b.shape}")
    d = a.data - b.data
    out = Tensor(np.asarray((d.astype(np.float64) ** 2).mean(), dtype=a.data.dtype))

    def bwd(g):
        s = d * (2.0 * float(g) / d.size)
        return s.astype(a.data.dtype), (-s).astype(b.data.dtype)

    return _record("squared_error", (a, b), out, bwd)


def conv2d(x, w, b=None, padding: int = 1) -> Tensor:
    """2-D convolution, stride 1. x: (B, Cin, H, W), w: (Cout, Cin, kh, kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: need 4-D x and w, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: channel mismatch {x.shape} vs {w.shape}")
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho, Wo = H + 2 * padding - kh + 1, W + 2 * padding - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Cin * kh * kw)
    wm = w.data.reshape(Cout, Cin * kh * kw).T
    y = (cols @ wm).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    inputs = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (Cout,):
            raise ShapeMismatch(f"conv2d: bias must be ({Cout},), got {b.shape}")
        y = y + b.data.reshape(1, Cout, 1, 1)
        inputs = (x, w, b)
    out = Tensor(y)

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
        gw = (gmat.T @ cols).reshape(w.data.shape)
        gcols = gmat @ wm.T
        gwin = gcols.reshape(B, Ho, Wo, Cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + Ho, j : j + Wo] += gwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        if len(inputs) == 3:
            return gx, gw, gmat.sum(axis=0)
        return gx, gw

    return _record("conv2d", inputs, out, bwd)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of (B, C, H, W)."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeMismatch(f"upsample2: need 4-D input, got {x.shape}")
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3))
    B, C, H, W = x.shape

    def bwd(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _record("upsample2", (x,), out, bwd)


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "concat": concat,
    "slice": slice_,
    "embedding_gather": embedding_gather,
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "layernorm": layernorm,
    "cross_entropy": cross_entropy,
    "mean": mean,
    "sum": sum_,
    "l1_distance": l1_distance,
    "squared_error": squared_error,
    # extras the model and losses need beyond the core set
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "power": power,
    "minimum": minimum,
    "maximum": maximum,
    "clip": clip,
    "reshape": reshape,
    "transpose": transpose,
    "scatter_rows": scatter_rows,
    "conv2d": conv2d,
    "upsample2": upsample2,
}


def forward_primitives(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by id."""
    fn = PRIMITIVES.get(op)
    if fn is None:
        raise ValueError(f"unknown primitive {op!r}")
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_check(f, x, eps: float = 1e-5, promote: bool = True) -> float:
    """Max relative error between backward() and central differences.

    Returns max over coordinates of |analytic - cd| / max(1, |cd|), with all
    oracle arithmetic at fp64. With promote=True the checked tensor is cast
    to fp64 so the function runs on the fp64 reference path; promote=False
    leaves the storage dtype alone (end-to-end fp32 checks).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-6, 1e-3]")
    base = x.data if isinstance(x, Tensor) else np.asarray(x)
    dtype = np.float64 if promote else base.dtype
    xt = Tensor(np.array(base, dtype=dtype), requires_grad=True, dtype=dtype)
    with fresh_tape():
        out = f(xt)
        if out.data.size != 1:
            raise NotScalar("finite_difference_check: f must be scalar-valued")
        backward(out)
    analytic = np.zeros_like(xt.data, dtype=np.float64) if xt.grad is None else xt.grad.astype(np.float64)
    flat = xt.data.reshape(-1)
    numeric = np.zeros(flat.size, dtype=np.float64)
    with no_grad(), fresh_tape():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(xt).data.reshape(-1)[0])
            flat[i] = orig - eps
            fm = float(f(xt).data.reshape(-1)[0])
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
    err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def _away_from(rng, shape, kinks=(0.0,), margin=0.06, lo=-1.5, hi=1.5):
    """Sample values keeping a margin from non-differentiable points."""
    x = rng.uniform(lo, hi, size=shape)
    for k in kinks:
        near = np.abs(x - k) < margin
        x = np.where(near, x + np.sign(x - k + 1e-12) * 2 * margin, x)
    return x


def primitive_gradient_checks(seeds: int = 32, eps: float = 1e-5) -> dict[str, float]:
    """Finite-difference suite over every differentiable primitive.

    Returns {check_name: max relative error over `seeds` seeded instances}.
    """
    results: dict[str, float] = {}

    def run(name, make):
        worst = 0.0
        for s in range(seeds):
            rng = np.random.default_rng(1000 + s)
            f, x = make(rng)
            worst = max(worst, finite_difference_check(f, x, eps=eps))
        results[name] = worst

    def proj(rng, shape):
        c = Tensor(rng.standard_normal(shape), dtype=np.float64)
        return lambda t: sum_(mul(t, c))

    run("matmul_lhs", lambda rng: (
        (lambda a, B=Tensor(rng.standard_normal((3, 4)), dtype=np.float64), pr=proj(rng, (2, 4)):
         pr(matmul(a, B))), Tensor(rng.standard_normal((2, 3)))))
    run("matmul_rhs", lambda rng: (
        (lambda b, A=Tensor(rng.standard_normal((2, 3)), dtype=np.float64), pr=proj(rng, (2, 4)):
         pr(matmul(A, b))), Tensor(rng.standard_normal((3, 4)))))
    run("matmul_batched", lambda rng: (
        (lambda a, B=Tensor(rng.standard_normal((2, 4, 3)), dtype=np.float64), pr=proj(rng, (2, 3, 3)):
         pr(matmul(a, B))), Tensor(rng.standard_normal((2, 3, 4)))))
    run("add", lambda rng: (
        (lambda a, B=Tensor(rng.standard_normal((3, 4)), dtype=np.float64), pr=proj(rng, (3, 4)):
         pr(add(a, B))), Tensor(rng.standard_normal((3, 4)))))
    run("add_broadcast", lambda rng: (
        (lambda a, B=Tensor(rng.standard_normal((3, 4)), dtype=np.float64), pr=proj(rng, (3, 4)):
         pr(add(B, a))), Tensor(rng.standard_normal((4,)))))
    run("sub", lambda rng: (
        (lambda a, B=Tensor(rng.standard_normal((3, 4)), dtype=np.float64), pr=proj(rng, (3, 4)):
         pr(sub(a, B))), Tensor(rng.standard_normal((3, 4)))))
    run("mul", lambda rng: (
        (lambda a, B=Tensor(rng.standard_normal((3, 4)), dtype=np.float64), pr=proj(rng, (3, 4)):
         pr(mul(a, B))), Tensor(rng.standard_normal((3, 4)))))
    run("div", lambda rng: (
        (lambda a, B=Tensor(_away_from(rng, (3, 4), margin=0.3), dtype=np.float64), pr=proj(rng, (3, 4)):
         pr(div(a, B))), Tensor(rng.standard_normal((3, 4)))))
    run("scale", lambda rng: (
        (lambda a, pr=proj(rng, (5,)): pr(scale(a, 1.7))), Tensor(rng.standard_normal(5))))
    run("concat", lambda rng: (
        (lambda a, B=Tensor(rng.standard_normal((2, 3)), dtype=np.float64), pr=proj(rng, (4, 3)):
         pr(concat([a, B], axis=0))), Tensor(rng.standard_normal((2, 3)))))
    run("slice", lambda rng: (
        (lambda a, pr=proj(rng, (2, 2)): pr(slice_(a, (slice(1, 3), slice(0, 2))))),
        Tensor(rng.standard_normal((4, 3)))))
    run("reshape", lambda rng: (
        (lambda a, pr=proj(rng, (6,)): pr(reshape(a, (6,)))), Tensor(rng.standard_normal((2, 3)))))
    run("transpose", lambda rng: (
        (lambda a, pr=proj(rng, (3, 2)): pr(transpose(a, (1, 0)))), Tensor(rng.standard_normal((2, 3)))))
    run("embedding_gather", lambda rng: (
        (lambda t, ids=rng.integers(0, 5, size=6), pr=proj(rng, (6, 3)):
         pr(embedding_gather(t, ids))), Tensor(rng.standard_normal((5, 3)))))
    run("scatter_rows_base", lambda rng: (
        (lambda t, R=Tensor(rng.standard_normal((2, 3)), dtype=np.float64), pr=proj(rng, (5, 3)):
         pr(scatter_rows(t, np.array([1, 3]), R))), Tensor(rng.standard_normal((5, 3)))))
    run("scatter_rows_rows", lambda rng: (
        (lambda r, B=Tensor(rng.standard_normal((5, 3)), dtype=np.float64), pr=proj(rng, (5, 3)):
         pr(scatter_rows(B, np.array([0, 4]), r))), Tensor(rng.standard_normal((2, 3)))))
    run("relu", lambda rng: (
        (lambda a, pr=proj(rng, (4, 4)): pr(relu(a))), Tensor(_away_from(rng, (4, 4)))))
    run("gelu", lambda rng: (
        (lambda a, pr=proj(rng, (4, 4)): pr(gelu(a))), Tensor(rng.standard_normal((4, 4)))))
    run("sigmoid", lambda rng: (
        (lambda a, pr=proj(rng, (4, 4)): pr(sigmoid(a))), Tensor(rng.standard_normal((4, 4)))))
    run("exp", lambda rng: (
        (lambda a, pr=proj(rng, (4,)): pr(exp(a))), Tensor(rng.uniform(-1, 1, 4))))
    run("log", lambda rng: (
        (lambda a, pr=proj(rng, (4,)): pr(log(a))), Tensor(rng.uniform(0.2, 2.0, 4))))
    run("power", lambda rng: (
        (lambda a, pr=proj(rng, (4,)): pr(power(a, 2.0))), Tensor(rng.uniform(0.2, 2.0, 4))))
    run("minimum", lambda rng: (
        (lambda a, B=Tensor(rng.standard_normal((4, 4)), dtype=np.float64), pr=proj(rng, (4, 4)):
         pr(minimum(a, B))), Tensor(rng.standard_normal((4, 4)) + 0.5)))
    run("maximum", lambda rng: (
        (lambda a, B=Tensor(rng.standard_normal((4, 4)), dtype=np.float64), pr=proj(rng, (4, 4)):
         pr(maximum(a, B))), Tensor(rng.standard_normal((4, 4)) + 0.5)))
    run("clip", lambda rng: (
        (lambda a, pr=proj(rng, (5,)): pr(clip(a, -1.0, 1.0))),
        Tensor(_away_from(rng, (5,), kinks=(-1.0, 1.0)))))
    run("softmax", lambda rng: (
        (lambda a, pr=proj(rng, (3, 5)): pr(softmax(a))), Tensor(rng.standard_normal((3, 5)))))
    run("layernorm", lambda rng: (
        (lambda a, pr=proj(rng, (3, 6)): pr(layernorm(a))), Tensor(rng.standard_normal((3, 6)))))
    run("cross_entropy", lambda rng: (
        (lambda a, t=rng.integers(0, 7, size=5), m=rng.random(5) < 0.3:
         cross_entropy(a, t, np.array([False] + list(m[1:])))),
        Tensor(rng.standard_normal((5, 7)))))
    run("mean", lambda rng: ((lambda a: mean(a)), Tensor(rng.standard_normal((3, 4)))))
    run("sum", lambda rng: ((lambda a: sum_(a)), Tensor(rng.standard_normal((3, 4)))))
    run("l1_distance", lambda rng: (
        (lambda a, B=Tensor(rng.standard_normal(6), dtype=np.float64):
         l1_distance(a, B)), Tensor(_away_from(rng, (6,), margin=0.2) + 3.0)))
    run("squared_error", lambda rng: (
        (lambda a, B=Tensor(rng.standard_normal(6), dtype=np.float64):
         squared_error(a, B)), Tensor(rng.standard_normal(6))))
    run("conv2d_x", lambda rng: (
        (lambda x, W=Tensor(rng.standard_normal((2, 3, 3, 3)) * 0.5, dtype=np.float64),
                bb=Tensor(rng.standard_normal(2), dtype=np.float64), pr=proj(rng, (1, 2, 4, 4)):
         pr(conv2d(x, W, bb))), Tensor(rng.standard_normal((1, 3, 4, 4)))))
    run("conv2d_w", lambda rng: (
        (lambda w, X=Tensor(rng.standard_normal((1, 3, 4, 4)), dtype=np.float64), pr=proj(rng, (1, 2, 4, 4)):
         pr(conv2d(X, w))), Tensor(rng.standard_normal((2, 3, 3, 3)) * 0.5)))
    run("conv2d_b", lambda rng: (
        (lambda b, X=Tensor(rng.standard_normal((1, 3, 4, 4)), dtype=np.float64),
                W=Tensor(rng.standard_normal((2, 3, 3, 3)) * 0.5, dtype=np.float64), pr=proj(rng, (1, 2, 4, 4)):
         pr(conv2d(X, W, b))), Tensor(rng.standard_normal(2))))
    run("upsample2", lambda rng: (
        (lambda x, pr=proj(rng, (1, 2, 4, 4)): pr(upsample2(x))),
        Tensor(rng.standard_normal((1, 2, 2, 2)))))
    return results
