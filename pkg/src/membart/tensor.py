"""Dense tensors with tape-based reverse-mode differentiation.

Arrays are stored as numpy ndarrays; the differentiation graph is recorded on
an explicit tape so that backward visits every op exactly once in reverse
execution order, and so that the number of live recorded nodes can be
measured (the memory-replay trainer relies on this).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}


class _State:
    dtype = np.float32
    recording = True
    check_finite = True


_state = _State()


def set_precision(name: str) -> None:
    _state.dtype = _DTYPES[name]


def get_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(name: str):
    old = _state.dtype
    _state.dtype = _DTYPES[name]
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    old = _state.recording
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = old


def is_recording() -> bool:
    return _state.recording


class GradTape:
    """Ordered record of executed ops.

    Entries are tensors produced by differentiable ops; each holds its parents
    and a backward closure. ``boundaries`` stores the tape length at each
    detach point, purely for inspection.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.boundaries: list[int] = []
        self.peak = 0

    def record(self, t: "Tensor") -> None:
        self.nodes.append(t)
        if len(self.nodes) > self.peak:
            self.peak = len(self.nodes)

    def mark_boundary(self) -> None:
        self.boundaries.append(len(self.nodes))

    def clear(self) -> None:
        for t in self.nodes:
            t._parents = ()
            t._backward = None
        self.nodes = []
        self.boundaries = []

    def __len__(self) -> int:
        return len(self.nodes)


_tape = GradTape()


def get_tape() -> GradTape:
    return _tape


@contextlib.contextmanager
def fresh_tape():
    """Run a block on a private tape (restores the previous tape afterwards)."""
    global _tape
    old = _tape
    _tape = GradTape()
    try:
        yield _tape
    finally:
        _tape = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _state.dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self, requires_grad: bool = False) -> "Tensor":
        """New leaf sharing the data; gradient never crosses this point."""
        _tape.mark_boundary()
        return Tensor(self.data, requires_grad=requires_grad, dtype=self.data.dtype)

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    # a single reduction: any NaN/Inf makes the sum non-finite
    if _state.check_finite and data.size and not np.isfinite(data.sum()):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    needs = _state.recording and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        _tape.record(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _make(a.data / b.data, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids exp overflow for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(y, (x,), bw, "gelu")


# -- shape ---------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=()) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(x.data[idx]), (x,), bw, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _make(table.data[ids], (table,), bw, "embedding")


# -- reductions ----------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(n))


# -- linear algebra ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) with w stored as [in, out]; x may have any leading shape."""
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ w.data
    if b is not None:
        y = y + b.data
    y = y.reshape(*lead, w.shape[1])

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, bw, "linear")


# -- normalisation / softmax ----------------------------------------------

def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction.

    ``mask`` (broadcastable, True = keep) zeroes excluded entries; a row with
    every entry excluded yields all zeros rather than NaN.
    """
    xd = x.data
    if mask is None:
        m = xd.max(axis=-1, keepdims=True)
        e = np.exp(xd - m)
        y = e / e.sum(axis=-1, keepdims=True)
    else:
        mask = np.broadcast_to(mask, xd.shape)
        masked = np.where(mask, xd, -np.inf)
        m = masked.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(np.where(mask, xd, m) - m), 0.0)
        s = e.sum(axis=-1, keepdims=True)
        y = (e / np.where(s == 0, 1.0, s)).astype(xd.dtype, copy=False)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data
    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(y.astype(xd.dtype, copy=False), (x, gain, bias), bw, "layer_norm")


def cross_entropy_sum(logits: Tensor, targets: np.ndarray, weights: np.ndarray, scale: float = 1.0) -> Tensor:
    """scale * sum_i weights_i * -log softmax(logits_i)[targets_i].

    logits has shape [..., V]; targets/weights have the leading shape.
    """
    ld = logits.data
    v = ld.shape[-1]
    flat = ld.reshape(-1, v)
    t = np.asarray(targets).reshape(-1)
    w = np.asarray(weights, dtype=ld.dtype).reshape(-1)
    m = flat.max(axis=-1, keepdims=True)
    shifted = flat - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    nll = -logp[np.arange(len(t)), t]
    loss = np.asarray(scale * np.sum(w * nll), dtype=ld.dtype)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(len(t)), t] -= 1.0
        return ((p * (w * scale * g)[:, None]).reshape(ld.shape),)

    return _make(loss, (logits,), bw, "cross_entropy")


# -- differentiation -------------------------------------------------------

def backward(loss: Tensor, seed_grads: dict | Iterable | None = None,
             capture: Sequence[Tensor] = ()) -> list[np.ndarray | None]:
    """Reverse sweep over the active tape.

    ``seed_grads`` maps (or lists pairs of) recorded tensors to extra upstream
    gradients injected alongside the loss. Leaf gradients accumulate into
    ``.grad`` across calls; intermediate gradients live only for the sweep.
    Returns the gradients of the tensors in ``capture``. The tape is cleared.
    """
    tape = _tape
    grads: dict[int, np.ndarray] = {}
    if loss is not None:
        if loss.size != 1:
            raise ValueError("backward needs a scalar loss")
        grads[id(loss)] = np.ones_like(loss.data)
    if seed_grads:
        pairs = seed_grads.items() if isinstance(seed_grads, dict) else seed_grads
        recorded = {id(t) for t in tape.nodes}
        for t, g in pairs:
            if id(t) not in recorded:
                raise ValueError("seed target is not recorded on the active tape")
            g = np.asarray(g, dtype=t.data.dtype)
            grads[id(t)] = grads[id(t)] + g if id(t) in grads else g.copy()
    if loss is not None and not loss.requires_grad:
        raise ValueError("loss is not recorded on the active tape")

    captured = {id(t): None for t in capture}

    def push(t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            if id(t) in captured:
                captured[id(t)] = t.grad
            return
        k = id(t)
        if k in grads:
            grads[k] = grads[k] + g
        else:
            grads[k] = g

    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in captured:
            captured[id(node)] = g
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is not None:
                push(p, pg)
    tape.clear()
    return [captured[id(t)] for t in capture]


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element."""
    base = np.array(x.data, dtype=np.float64)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(Tensor(base.copy(), dtype=x.data.dtype)).data)
            flat[i] = orig - step
            fm = float(f(Tensor(base.copy(), dtype=x.data.dtype)).data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError("non-finite function value in finite differences")
            gflat[i] = (fp - fm) / (2.0 * step)
    return out
