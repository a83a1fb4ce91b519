"""Finite-difference oracle shared by the unit and acceptance suites.

Each case builder takes a generator and returns ``(fn, arrays)``; ``fn`` maps
tensors to a scalar loss. Vector-valued ops are reduced with a fixed random
weighting so every output coordinate contributes.
"""

import numpy as np

from rfl import tensor as T
from rfl.models import ViTConfig, build_tiny_vit
from rfl.peft import Strategy, attach
from rfl.tensor import Tensor


# Structurally zero gradients (e.g. the key bias, which softmax cancels)
# would otherwise compare two round-off residues.
FLOOR = 1e-6


def relative_error(a, b) -> float:
    """Norm-wise relative error with an absolute floor on the denominator."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b), FLOOR)
    return float(np.linalg.norm(a - b) / den)


def _away(x, gap=0.05, kinks=(0.0,)):
    """Push values at least ``gap`` away from non-differentiable points."""
    for k in kinks:
        close = np.abs(x - k) < gap
        x = np.where(close, k + np.where(x >= k, gap, -gap) * 2, x)
    return x


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.tsum(T.mul(out, Tensor(w)))


def _unary(op, transform=lambda x: x):
    def build(rng):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        x = transform(rng.normal(size=shape))
        w = rng.normal(size=shape)
        return (lambda a: _weighted(op(a), w)), [x]
    return build


def _binary(op):
    def build(rng):
        shape = tuple(int(s) for s in rng.integers(1, 4, size=3))
        other = list(shape)
        for i in range(3):
            if rng.random() < 0.4:
                other[i] = 1
        other = tuple(other[int(rng.integers(0, 3)):])
        a, b = rng.normal(size=shape), rng.normal(size=other)
        if rng.random() < 0.5:
            a, b = b, a
        w = rng.normal(size=T.broadcast_shape(a.shape, b.shape))
        return (lambda x, y: _weighted(op(x, y), w)), [a, b]
    return build


def _matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
    batch = int(rng.integers(1, 3))
    a = rng.normal(size=(batch, m, k))
    b = rng.normal(size=(k, n)) if rng.random() < 0.5 else rng.normal(size=(batch, k, n))
    w = rng.normal(size=(batch, m, n))
    return (lambda x, y: _weighted(T.matmul(x, y), w)), [a, b]


def _reduce(op):
    def build(rng):
        shape = tuple(int(s) for s in rng.integers(2, 5, size=3))
        axis = [None, 0, 1, 2, (0, 2), -1][int(rng.integers(0, 6))]
        keep = bool(rng.random() < 0.5)
        x = rng.normal(size=shape)
        w = rng.normal(size=np.asarray(op(T.Tensor(x), axis, keep).data).shape)
        return (lambda a: _weighted(op(a, axis, keep), w)), [x]
    return build


def _reshape(rng):
    x = rng.normal(size=(2, 3, 4))
    shape = [(6, 4), (24,), (4, 3, 2), (2, 12)][int(rng.integers(0, 4))]
    w = rng.normal(size=shape)
    return (lambda a: _weighted(T.reshape(a, shape), w)), [x]


def _transpose(rng):
    x = rng.normal(size=(2, 3, 4))
    axes = tuple(int(i) for i in rng.permutation(3))
    w = rng.normal(size=tuple(x.shape[i] for i in axes))
    return (lambda a: _weighted(T.transpose(a, axes), w)), [x]


def _getitem_basic(rng):
    x = rng.normal(size=(4, 5))
    key = [(slice(1, 3), slice(None)), (0,), (slice(None), 2), (slice(None, None, 2), slice(1, 4))][
        int(rng.integers(0, 4))]
    w = rng.normal(size=x[key].shape)
    return (lambda a: _weighted(T.getitem(a, key), w)), [x]


def _getitem_advanced(rng):
    x = rng.normal(size=(5, 3))
    idx = rng.integers(0, 5, size=7)
    w = rng.normal(size=(7, 3))
    return (lambda a: _weighted(T.getitem(a, idx), w)), [x]


def _concat(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    w = rng.normal(size=(6, 3))
    return (lambda x, y: _weighted(T.concat([x, y], axis=0), w)), [a, b]


def _broadcast_to(rng):
    x = rng.normal(size=(1, 3))
    w = rng.normal(size=(4, 3))
    return (lambda a: _weighted(T.broadcast_to(a, (4, 3)), w)), [x]


def _softmax(rng):
    x = rng.normal(size=(3, 5))
    axis = int(rng.integers(0, 2))
    w = rng.normal(size=x.shape)
    return (lambda a: _weighted(T.softmax(a, axis), w)), [x]


def _log_softmax(rng):
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=x.shape)
    return (lambda a: _weighted(T.log_softmax(a, -1), w)), [x]


def _layer_norm(rng):
    x = rng.normal(size=(2, 3, 6))
    g, b = rng.normal(size=6), rng.normal(size=6)
    w = rng.normal(size=x.shape)
    return (lambda a, gg, bb: _weighted(T.layer_norm(a, gg, bb), w)), [x, g, b]


def _cross_entropy(reduction):
    def build(rng):
        logits = rng.normal(size=(4, 5))
        y = rng.integers(0, 5, size=4)
        if reduction == "none":
            w = rng.normal(size=4)
            return (lambda a: _weighted(T.cross_entropy(a, y, "none"), w)), [logits]
        return (lambda a: T.cross_entropy(a, y, reduction)), [logits]
    return build


OP_CASES = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "scale": _unary(lambda a: T.scale(a, -1.7)),
    "matmul": _matmul,
    "relu": _unary(T.relu, _away),
    "gelu": _unary(T.gelu),
    "sign": _unary(T.sign, _away),
    "clamp": _unary(lambda a: T.clamp(a, -0.5, 0.7), lambda x: _away(x, kinks=(-0.5, 0.7))),
    "exp": _unary(T.exp),
    "log": _unary(T.log, lambda x: np.abs(x) + 0.2),
    "tanh": _unary(T.tanh),
    "sum": _reduce(T.tsum),
    "mean": _reduce(T.mean),
    "reshape": _reshape,
    "transpose": _transpose,
    "getitem": _getitem_basic,
    "getitem-advanced": _getitem_advanced,
    "concat": _concat,
    "broadcast_to": _broadcast_to,
    "softmax": _softmax,
    "log_softmax": _log_softmax,
    "layer_norm": _layer_norm,
    "cross_entropy-mean": _cross_entropy("mean"),
    "cross_entropy-sum": _cross_entropy("sum"),
    "cross_entropy-none": _cross_entropy("none"),
}


def check_case(fn, arrays, h=1e-5) -> float:
    """Largest relative error between reverse-mode and central differences."""
    with T.precision(np.float64):
        ts = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
        grads = T.backward(fn(*ts), ts)
    worst = 0.0
    for i, a in enumerate(arrays):
        def partial(t, i=i):
            args = [t if j == i else Tensor(np.asarray(arrays[j], dtype=np.float64)) for j in range(len(arrays))]
            return fn(*args)
        fd = T.finite_difference_gradient(partial, a, h)
        worst = max(worst, relative_error(grads[ts[i]], fd))
    return worst


VIT = ViTConfig(image_size=8, channels=1, patch_size=4, depth=2, width=8, heads=2, mlp_ratio=2, num_classes=3)


def vit_case(rng, kind: str = "fullft", coords: int = 12, h: float = 1e-5) -> float:
    """Gradient check of the whole tiny-ViT loss (input + sampled parameter
    coordinates of every tensor) in 64-bit."""
    model = build_tiny_vit(VIT, rng).astype(np.float64)
    if kind != "fullft":
        attach(model, Strategy(kind, lora_rank=2, reduction=2, vpt_tokens=2), rng=rng)
        # nonzero new modules so their gradients are nontrivial
        for name in model.params:
            role = model.params.role(name)
            if role in ("lora-B", "adapter-up"):
                model.params[name].data = rng.normal(scale=0.1, size=model.params[name].shape)
    for name in model.params:
        model.params.set_trainable(name, True)
    x = rng.uniform(0.05, 0.95, size=(2, 1, 8, 8))
    y = rng.integers(0, 3, size=2)

    def loss_of(xx):
        return T.cross_entropy(model(xx, strict=False), y)

    with T.precision(np.float64):
        xt = Tensor(x, requires_grad=True)
        tensors = [xt] + [model.params[n] for n in model.params]
        grads = T.backward(loss_of(xt), tensors)
    worst = relative_error(grads[xt], T.finite_difference_gradient(loss_of, x, h))
    for name in model.params:
        p = model.params[name]
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        fd = np.zeros(len(picks))
        with T.no_grad():
            for k, i in enumerate(picks):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_of(x).item()
                flat[i] = orig - h
                fm = loss_of(x).item()
                flat[i] = orig
                fd[k] = (fp - fm) / (2 * h)
        worst = max(worst, relative_error(grads[p].reshape(-1)[picks], fd))
    return worst
