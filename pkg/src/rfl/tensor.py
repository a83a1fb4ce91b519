"""Dense numpy-backed tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When gradient recording is enabled and
any operand requires a gradient, the result remembers its parents and a
closure that maps the output gradient to parent gradients. :func:`backward`
linearises that graph into a :class:`Tape` (topological order) and replays it
in reverse.

Compute is 32-bit by default; wrap a computation in ``precision(np.float64)``
for gradient checking.
"""

from __future__ import annotations

import contextlib
import math
import threading
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, InputError

_local = threading.local()

GELU_C = math.sqrt(2.0 / math.pi)


def grad_enabled() -> bool:
    return getattr(_local, "grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = prev


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Set the dtype used for tensors created from Python scalars/lists."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection -----------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ----------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap constants; a Tensor passes through untouched."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, b)
    else:
        a, b = as_tensor(a), as_tensor(b)
    if a.dtype != b.dtype:
        raise TypeError(f"mixed precision: {a.dtype} and {b.dtype}")
    return a, b


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Result shape of a binary op.

    Shapes are right-aligned; in every position the sizes match or one is 1.
    The result must equal one operand's shape, so only one side ever expands.
    """
    if a == b:
        return a
    n = max(len(a), len(b))
    pa = (1,) * (n - len(a)) + tuple(a)
    pb = (1,) * (n - len(b)) + tuple(b)
    out = []
    for x, y in zip(pa, pb):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"shapes {a} and {b} are not broadcast-compatible")
        out.append(max(x, y))
    out = tuple(out)
    if out != tuple(a) and out != tuple(b):
        raise DimensionError(f"shapes {a} and {b} would both need expanding")
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- binary elementwise ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)

    def bw(g, need):
        return (unbroadcast(g, a.shape) if need[0] else None,
                unbroadcast(g, b.shape) if need[1] else None)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)

    def bw(g, need):
        return (unbroadcast(g, a.shape) if need[0] else None,
                unbroadcast(-g, b.shape) if need[1] else None)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)

    def bw(g, need):
        return (unbroadcast(g * b.data, a.shape) if need[0] else None,
                unbroadcast(g * a.data, b.shape) if need[1] else None)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g, need: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    broadcast_shape(a.shape[:-2], b.shape[:-2])

    def bw(g, need):
        ga = gb = None
        if need[0]:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if need[1]:
            gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# -- unary elementwise -----------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,),
                 lambda g, need: (g * mask,), "relu")


def gelu(a: Tensor) -> Tensor:
    """tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    x = a.data
    x2 = x * x
    t = np.tanh(GELU_C * (x + 0.044715 * x2 * x))
    out = 0.5 * x * (1.0 + t)

    def bw(g, need):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out.astype(a.dtype, copy=False), (a,), bw, "gelu")


def sign(a: Tensor) -> Tensor:
    return _make(np.sign(a.data), (a,), lambda g, need: (np.zeros_like(g),), "sign")


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; gradient passes inside the bounds and is zero outside."""
    x = a.data
    out = np.clip(x, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x >= lo
    if hi is not None:
        inside &= x <= hi
    return _make(out.astype(a.dtype, copy=False), (a,), lambda g, need: (g * inside,), "clamp")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g, need: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g, need: (g / x,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g, need: (g * (1 - out * out),), "tanh")


# -- reductions and shape ops ----------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g, need):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axes, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,), lambda g, need: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g, need: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in parts)


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    basic = _is_basic_index(key)

    def bw(g, need):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) != 1:
        raise TypeError(f"mixed precision in concat: {sorted(map(str, dtypes))}")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g, need):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    broadcast_shape(shape, a.shape)
    return _make(np.broadcast_to(a.data, shape), (a,),
                 lambda g, need: (unbroadcast(g, a.shape),), "broadcast")


# -- fused numerically sensitive ops ---------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g, need):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g, need):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain * xhat + bias``."""
    a, gain = _pair(a, gain)
    a, bias = _pair(a, bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm over {a.shape} needs gain/bias of shape ({d},), "
                             f"got {gain.shape} and {bias.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g, need):
        ga = gg = gb = None
        if need[0]:
            gx = g * gain.data
            ga = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        if need[1]:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if need[2]:
            gb = g.reshape(-1, d).sum(axis=0)
        return ga, gg, gb

    return _make(out.astype(a.dtype, copy=False), (a, gain, bias), bw, "layer_norm")


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy from logits ``[b, C]`` and integer labels ``[b]``.

    ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"`` (per-sample losses).
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError("labels must be integer class indices")
    if b and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c}); got range [{labels.min()}, {labels.max()}]")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(b)
    per = lse - z[rows, labels]
    probs = np.exp(z - lse[:, None])
    if reduction == "none":
        out = per
    elif reduction == "sum":
        out = per.sum()
    elif reduction == "mean":
        out = per.mean() if b else np.zeros((), z.dtype)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g, need):
        d = probs.copy()
        d[rows, labels] -= 1
        if reduction == "none":
            return (d * g[:, None],)
        if reduction == "mean":
            return (d * (g / b),)
        return (d * g,)

    return _make(np.asarray(out, dtype=z.dtype), (logits,), bw, "cross_entropy")


# -- reverse pass ----------------------------------------------------------

class Tape:
    """Topologically ordered record of the graph that produced ``output``.

    Each node appears once, after all of its inputs.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._linearise(output)

    @staticmethod
    def _linearise(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    @property
    def records(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n.op, tuple(id(p) for p in n._parents)) for n in self.nodes]

    def backward(self, inputs: Iterable[Tensor] | None = None, seed=None) -> dict[Tensor, np.ndarray]:
        root = self.output
        targets = None if inputs is None else list(inputs)
        if targets is None:
            relevant = None
        else:
            wanted = {id(t) for t in targets}
            relevant = set()
            for node in self.nodes:
                if id(node) in wanted or any(id(p) in relevant for p in node._parents):
                    relevant.add(id(node))

        target_ids = set() if targets is None else {id(t) for t in targets}
        grads: dict[int, np.ndarray] = {}
        if seed is None:
            seed = np.ones(root.shape, dtype=root.dtype)
        grads[id(root)] = seed
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            key = id(node)
            g = grads.get(key)
            if g is None:
                continue
            keep = key in target_ids or not node._parents
            if keep:
                leaves[key] = node
            if not node._parents:
                continue
            if not keep:
                del grads[key]
            if relevant is None:
                need = tuple(p.requires_grad for p in node._parents)
            else:
                need = tuple(id(p) in relevant for p in node._parents)
            if not any(need):
                continue
            pgrads = node._backward(g, need)
            for p, pg, n in zip(node._parents, pgrads, need):
                if pg is None or not n:
                    continue
                pk = id(p)
                grads[pk] = pg if pk not in grads else grads[pk] + pg

        result: dict[Tensor, np.ndarray] = {}
        for key, node in leaves.items():
            g = np.ascontiguousarray(np.broadcast_to(grads[key], node.shape), dtype=node.dtype)
            node.grad = g
            result[node] = g
        if targets is not None:
            for t in targets:
                if t not in result:
                    result[t] = np.zeros(t.shape, dtype=t.dtype)
        return result


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to graph leaves.

    With ``inputs`` given, only paths reaching those tensors are replayed and
    the returned map holds exactly those tensors (zeros if unreachable).
    Otherwise every leaf with ``requires_grad`` gets a gradient. Fan-out
    contributions are summed. Leaf ``.grad`` attributes are overwritten.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        if inputs is None:
            return {}
        return {t: np.zeros(t.shape, dtype=t.dtype) for t in inputs}
    return Tape(loss).backward(inputs)


def finite_difference_gradient(f: Callable[[Tensor], object], x, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` in 64-bit."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_grad(), precision(np.float64):
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(Tensor(base.copy())))
            flat[i] = orig - h
            fm = _scalar(f(Tensor(base.copy())))
            flat[i] = orig
            grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(np.asarray(v).reshape(-1)[0])


class RngStream:
    """Seeded source of named, independent numpy generators.

    ``stream.generator("init")`` always yields the same PCG64 sequence for the
    same seed and label, independent of platform and of draws made on other
    labels.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._cache: dict[str, np.random.Generator] = {}

    def generator(self, label: str) -> np.random.Generator:
        if label not in self._cache:
            self._cache[label] = self.fresh(label)
        return self._cache[label]

    __call__ = generator

    def fresh(self, label: str) -> np.random.Generator:
        key = zlib.crc32(label.encode("utf-8"))
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(key,))))

    def child(self, label: str) -> "RngStream":
        return RngStream(int(self.fresh(label).integers(0, 2 ** 63)))
