"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records a :class:`Node` carrying a
monotonically increasing sequence number. :func:`backward` collects the nodes
reachable from a scalar loss into a :class:`Tape` and replays their adjoints
in exact reverse execution order.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

from pvnet._kernels import gather_max_kernel, scatter_max_grad_kernel

__all__ = [
    "DimensionError",
    "DomainError",
    "Node",
    "Tape",
    "Tensor",
    "abs",
    "add",
    "backward",
    "concat",
    "conv2d",
    "default_dtype",
    "gather_max",
    "gather_rows",
    "get_default_dtype",
    "grad_check",
    "grad_check_tensors",
    "log",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "reduce_max",
    "relu",
    "repeat_rows",
    "reshape",
    "sigmoid",
    "softmax_cross_entropy",
    "split",
    "sub",
    "sum",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside an operation's domain."""


_state = threading.local()
_seq = itertools.count()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Node:
    # ``output`` is a weak reference: a strong one would form a tensor<->node
    # cycle and keep whole graphs alive until the cyclic collector runs
    __slots__ = ("op", "inputs", "backward_fn", "seq", "_output")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self._output = None

    @property
    def output(self) -> "Tensor | None":
        return self._output() if self._output is not None else None

    @output.setter
    def output(self, t: "Tensor") -> None:
        self._output = weakref.ref(t)


class Tensor:
    """A dense array that may participate in gradient recording.

    ``data`` is a plain numpy array. ``grad`` is populated by :func:`backward`
    and accumulates across calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"zero extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum(self, axis)

    def max(self, axis):
        return reduce_max(self, axis)

    def relu(self):
        return relu(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, tuple(inputs), backward_fn)
        node.output = out
        out.node = node
    return out


# --- broadcasting restricted to extent-1 axes ---------------------------------

def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) != len(b):
        raise DimensionError(f"{op}: rank mismatch between {a} and {b}")
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise DimensionError(f"{op}: shapes {a} and {b} are not broadcast-compatible")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (s, t) in enumerate(zip(shape, g.shape)) if s == 1 and t != 1)
    return g.sum(axis=axes, keepdims=True)


# --- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _make(out, "relu", (x,), lambda g: (g * (out > 0),))


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        # exp overflow to inf gives the correct limit 0
        out = np.exp(-x.data)
    out += 1
    np.reciprocal(out, out=out)
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1 - out),))


def log(x: Tensor, strict: bool = True) -> Tensor:
    d = x.data
    if strict and np.any(d <= 0):
        raise DomainError("log of non-positive input")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(d)
    return _make(out, "log", (x,), lambda g: (g / d,))


def abs(x: Tensor) -> Tensor:
    d = x.data
    return _make(np.abs(d), "abs", (x,), lambda g: (g * np.sign(d),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


# --- linear algebra and shape ops -------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched product of equal-batch 3-D operands."""
    if a.ndim != b.ndim or a.ndim not in (2, 3) or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if need_a else None
        gb = np.swapaxes(ad, -1, -2) @ g if need_b else None
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {shape}") from exc
    return _make(out, "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inv),))


def _getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(np.array(out, copy=True), "getitem", (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: empty operand list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    if len(tensors) == 1:
        return _make(tensors[0].data.copy(), "concat", tensors, lambda g: (g,))
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, "concat", tensors, lambda g: tuple(np.split(g, cuts, axis=ax)))


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split ``x`` into consecutive pieces with the given extents along ``axis``."""
    ax = axis % x.ndim
    if int(np.sum(sizes)) != x.shape[ax]:
        raise DimensionError(f"split: sizes {list(sizes)} do not sum to extent {x.shape[ax]}")
    pieces = []
    start = 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + s)
        pieces.append(_getitem(x, tuple(idx)))
        start += s
    return pieces


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """Repeat each row of a 2-D tensor ``n`` times consecutively: (B, K) -> (B*n, K)."""
    if x.ndim != 2:
        raise DimensionError(f"repeat_rows expects a 2-D tensor, got {x.shape}")
    b, k = x.shape
    out = np.repeat(x.data, n, axis=0)
    return _make(out, "repeat_rows", (x,), lambda g: (g.reshape(b, n, k).sum(axis=1),))


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of ``x`` by an integer array of any shape; output shape index.shape + x.shape[1:]."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError("gather_rows: index out of range")
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index.ravel(), g.reshape((-1,) + shape[1:]))
        return (full,)

    return _make(x.data[index], "gather_rows", (x,), bw)


# --- reductions -----------------------------------------------------------------

def sum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis)
    if axis is None:
        return _make(np.asarray(out, dtype=x.dtype), "sum", (x,),
                     lambda g: (np.broadcast_to(g, shape).astype(g.dtype, copy=True),))
    ax = axis % x.ndim
    return _make(out, "sum", (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / count)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the lowest index among tied maxima."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"reduce_max: axis {axis} out of range for shape {x.shape}")
    ax = axis % x.ndim
    if x.shape[ax] == 0:
        raise DomainError("reduce_max over an empty axis")
    arg = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, arg, axis=ax).squeeze(ax)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, arg, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _make(out, "reduce_max", (x,), bw)


def gather_max(x: Tensor, index: np.ndarray) -> Tensor:
    """out[i, c] = max_j x[index[i, j], c].

    Fused equivalent of ``reduce_max(gather_rows(x, index), axis=1)`` without
    materialising the (n, k, C) intermediate. Ties go to the lowest ``j``.
    """
    if x.ndim != 2:
        raise DimensionError(f"gather_max expects a 2-D tensor, got {x.shape}")
    index = np.ascontiguousarray(index, dtype=np.int64)
    if index.ndim != 2 or index.shape[1] == 0:
        raise DimensionError(f"gather_max: index must be (n, k) with k >= 1, got {index.shape}")
    if index.min() < 0 or index.max() >= x.shape[0]:
        raise IndexError("gather_max: index out of range")
    out, src = gather_max_kernel(np.ascontiguousarray(x.data), index)
    n_src, channels = x.shape

    def bw(g):
        return (scatter_max_grad_kernel(np.ascontiguousarray(g), src, n_src),)

    return _make(out, "gather_max", (x,), bw)


# --- convolution ----------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (N, Cin, H, W), w: (Cout, Cin, kh, kw), b: (Cout,)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(f"conv2d: input {h}x{wd} smaller than kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: (N, Ho, Wo, Cin*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    inputs = (x, w) if b is None else (x, w, b)
    xshape, dtype, need_gx = x.shape, x.dtype, x.requires_grad

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (gm.T @ cols).reshape(w.shape)
        if not need_gx:
            return (None, gw) if b is None else (None, gw, gm.sum(axis=0))
        gcols = (gm @ wmat).reshape(n, ho, wo, cin, kh, kw)
        gxp = np.zeros((n, cin, hp, wp), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + xshape[2], padding:padding + xshape[3]] if padding else gxp
        grads = (gx, gw)
        if b is not None:
            grads = grads + (gm.sum(axis=0),)
        return grads

    return _make(out, "conv2d", inputs, bw)


# --- loss -----------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects (b, C) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if labels.shape[0] != b:
        raise DimensionError(f"{labels.shape[0]} labels for {b} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    loss = -logp[np.arange(b), labels].mean()
    probs = np.exp(logp)

    def bw(g):
        d = probs.copy()
        d[np.arange(b), labels] -= 1
        return (d * (g / b),)

    return _make(np.asarray(loss, dtype=logits.dtype), "softmax_cross_entropy", (logits,), bw)


# --- backward -------------------------------------------------------------------

class Tape:
    """Operations reachable from a loss, in the order they were executed."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [out]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda nd: nd.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def reversed(self) -> Iterable[Node]:
        return reversed(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Populate ``.grad`` on every gradient-requiring tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers; call ``zero_grad`` on
    parameters between steps.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")
    tape = tape or Tape.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in tape.reversed():
        out = node.output
        g = pending.pop(id(out), None) if out is not None else None
        if g is None:
            continue
        _accumulate(out, g)
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if not inp.requires_grad or gi is None:
                continue
            if inp.node is None:
                _accumulate(inp, gi)
            else:
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
    return tape


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    # never updated in place, so aliasing an upstream buffer is safe
    t.grad = g if t.grad is None else t.grad + g


# --- finite differences ---------------------------------------------------------

def grad_check_tensors(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5,
                       max_coords: int | None = None, seed: int = 0, floor: float = 1e-6) -> float:
    """Finite-difference check of ``loss_fn()`` against ``tensors`` perturbed in place.

    ``tensors`` must be float64 leaves with ``requires_grad``. With
    ``max_coords`` only that many randomly chosen coordinates per tensor are
    probed. Returns the worst relative error ``|a - n| / max(|a|, |n|, floor)``;
    NaN anywhere yields ``inf``.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    for t in tensors:
        if t.dtype != np.float64:
            raise ValueError(f"gradient checks run at 64-bit; got {t.dtype}")
        t.grad = None
    loss = loss_fn()
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        analytic = (t.grad if t.grad is not None else np.zeros(t.shape)).reshape(-1)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            hi, lo = orig + eps, orig - eps
            with no_grad():
                flat[i] = hi
                up = float(loss_fn().data)
                flat[i] = lo
                down = float(loss_fn().data)
            flat[i] = orig
            # divide by the representable step, not the nominal one
            numeric = (up - down) / (hi - lo)
            a = float(analytic[i])
            if not (np.isfinite(a) and np.isfinite(numeric)):
                return float("inf")
            err = np.abs(a - numeric) / max(np.abs(a), np.abs(numeric), floor)
            worst = max(worst, float(err))
    return worst


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Worst relative error between autodiff and central differences of ``fn(*inputs)``.

    ``inputs`` are copied to fresh float64 leaves; see :func:`grad_check_tensors`.
    """
    with default_dtype(np.float64):
        leaves = [Tensor(np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64), requires_grad=True)
                  for t in inputs]
        return grad_check_tensors(lambda: fn(*leaves), leaves, eps, max_coords, seed)
