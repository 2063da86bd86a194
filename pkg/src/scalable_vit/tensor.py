"""Dense float tensors with a small, closed set of differentiable operations.

Every operation returns a new :class:`Tensor`; when gradients are enabled and
any input requires them, the output keeps a link to its inputs and a closure
computing the vector-Jacobian product.  :func:`backward` linearises that graph
into a :class:`Tape` (topological order) and walks it once in reverse.

f64 is the default dtype.  f32 is preserved when inputs are f32, which is
what the benchmark paths use.
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import counters
from .errors import ConfigError, ContractError, ShapeError

_ids = itertools.count(1)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_faults: contextvars.ContextVar[dict] = contextvars.ContextVar("faults", default={})

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_id", "op", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.tape_id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return crop(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Build a leaf tensor, rejecting non-finite values."""
    t = Tensor(data, requires_grad=requires_grad, dtype=dtype)
    if not np.all(np.isfinite(t.data)):
        raise ValueError("tensor data must be finite")
    return t


def _wrap(x, dtype=np.float64) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.tape_id = next(_ids)
    out.op = op
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def inject_fault(name: str, value: float):
    """Test hook: perturb a registered gradient rule (``softmax_grad_scale``)."""
    token = _faults.set({**_faults.get(), name: value})
    try:
        yield
    finally:
        _faults.reset(token)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def pad(a: Tensor, widths) -> Tensor:
    """Zero-pad; ``widths`` is one ``(before, after)`` pair per axis."""
    widths = tuple((int(b), int(e)) for b, e in widths)
    if len(widths) != a.ndim:
        raise ShapeError(f"pad: {len(widths)} pad pairs for rank-{a.ndim} tensor {a.shape}")
    if all(b == 0 and e == 0 for b, e in widths):
        return a
    idx = tuple(slice(b, b + n) for (b, _), n in zip(widths, a.shape))
    return _node(np.pad(a.data, widths), (a,), lambda g: (g[idx],), "pad")


def crop(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing recorded on the tape."""
    if not isinstance(idx, tuple):
        idx = (idx,)
    for i in idx:
        if not isinstance(i, (slice, int, type(Ellipsis))) and i is not None:
            raise TypeError("crop supports basic slicing only")
    shape, dtype = a.shape, a.dtype

    def back(g):
        z = np.zeros(shape, dtype=dtype)
        z[idx] += g
        return (z,)

    return _node(np.ascontiguousarray(a.data[idx]), (a,), back, "crop")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Mean over ``axis``; ``mean(tokens, 0)`` is global average pooling."""
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims do not broadcast: {a.shape} x {b.shape}") from None
    ad, bd = a.data, b.data
    out = ad @ bd
    counters.record(out.size * ad.shape[-1])

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _node(out, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Token-wise affine map ``x @ w + b`` (a 1x1 convolution)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0,
           depthwise: bool = False) -> Tensor:
    """2-D convolution over channels-last maps ``(..., H, W, Cin)``.

    Kernels are ``(k, k, Cin, Cout)``, or ``(k, k, C)`` when ``depthwise``.
    Padding is symmetric zero fill of ``pad`` on every side.
    """
    if x.ndim < 3:
        raise ShapeError(f"conv2d: expected (..., H, W, C) input, got {x.shape}")
    k = w.shape[0]
    if k < 1 or w.shape[1] != k:
        raise ConfigError(f"conv2d: kernel must be square, got {w.shape}")
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv2d: invalid stride={stride} pad={pad}")
    H, W, cin = x.shape[-3:]
    if depthwise:
        if w.ndim != 3 or w.shape[2] != cin:
            raise ShapeError(f"conv2d: depthwise kernel {w.shape} does not match {cin} channels")
        cout = cin
    else:
        if w.ndim != 4 or w.shape[2] != cin:
            raise ShapeError(f"conv2d: kernel {w.shape} does not match input channels {cin}")
        cout = w.shape[3]
    ho = (H + 2 * pad - k) // stride + 1
    wo = (W + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ConfigError(f"conv2d: non-positive output extent for input {H}x{W}, k={k}, "
                          f"stride={stride}, pad={pad}")
    lead = x.shape[:-3]
    widths = [(0, 0)] * len(lead) + [(pad, pad), (pad, pad), (0, 0)]
    xp = np.pad(x.data, widths) if pad else x.data
    wd = w.data
    he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    def window(arr, i, j):
        return arr[..., i:i + he:stride, j:j + we:stride, :]

    out = np.zeros(lead + (ho, wo, cout), dtype=np.result_type(xp, wd))
    for i in range(k):
        for j in range(k):
            patch = window(xp, i, j)
            out += patch * wd[i, j] if depthwise else patch @ wd[i, j]
    if b is not None:
        out += b.data
    counters.record(out.size * k * k * (1 if depthwise else cin))

    def back(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    window(gxp, i, j)[...] += g * wd[i, j] if depthwise else g @ wd[i, j].T
            gx = gxp[..., pad:pad + H, pad:pad + W, :] if pad else gxp
        if w.requires_grad:
            gw = np.zeros_like(wd)
            g2 = g.reshape(-1, cout)
            for i in range(k):
                for j in range(k):
                    patch = window(xp, i, j).reshape(-1, cin)
                    gw[i, j] = (patch * g2).sum(axis=0) if depthwise else patch.T @ g2
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, back, "conv2d")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max subtraction, so large logits never overflow."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    counters.record_aux(y.size)
    fault = _faults.get().get("softmax_grad_scale", 1.0)

    def back(g):
        gx = y * (g - (g * y).sum(axis=axis, keepdims=True))
        return (gx * fault if fault != 1.0 else gx,)

    return _node(y, (x,), back, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply a per-channel affine map."""
    if eps <= 0:
        raise ConfigError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    counters.record_aux(xd.size)

    def back(g):
        dxhat = g * gd
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(xd.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _node(xhat * gd + beta.data, (x, gamma, beta), back, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    counters.record_aux(xd.size)

    def back(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _node((xd * cdf).astype(xd.dtype, copy=False), (x,), back, "gelu")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; ``logits`` is ``(B, K)`` or ``(K,)``."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    ld = logits.data.reshape(-1, logits.shape[-1])
    if ld.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy: {ld.shape[0]} rows but {labels.shape[0]} labels")
    z = ld - ld.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((g * p / len(labels)).reshape(logits.shape),)

    return _node(np.asarray(loss, dtype=ld.dtype), (logits,), back, "cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

@dataclass
class TapeNode:
    op: str
    input_ids: tuple[int, ...]
    output_id: int
    tensor: Tensor = field(repr=False)


@dataclass
class Tape:
    nodes: list[TapeNode]

    @property
    def next_id(self) -> int:
        return max((n.output_id for n in self.nodes), default=0) + 1


def build_tape(root: Tensor) -> Tape:
    """Topologically ordered interior nodes reachable from ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if t.tape_id in seen or t.is_leaf:
            continue
        seen.add(t.tape_id)
        stack.append((t, True))
        for p in t._parents:
            if p.requires_grad and not p.is_leaf and p.tape_id not in seen:
                stack.append((p, False))
    return Tape([TapeNode(t.op, tuple(p.tape_id for p in t._parents), t.tape_id, t) for t in order])


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf's ``grad``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return Tape([])
    tape = build_tape(loss)
    pending: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        t = node.tensor
        g = pending.pop(t.tape_id, None)
        if g is None:
            continue
        for p, gp in zip(t._parents, t._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            if p.is_leaf:
                p.grad = gp.astype(p.dtype, copy=True) if p.grad is None else p.grad + gp
            elif p.tape_id in pending:
                pending[p.tape_id] = pending[p.tape_id] + gp
            else:
                pending[p.tape_id] = gp
    return tape
