"""L-infinity white-box attacks (FGSM, PGD) and robust-accuracy evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .tensor import Tensor


@dataclass
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    random_start: bool = False
    seed_label: str = "attack"

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("pgd", "fgsm"):
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.kind == "pgd" and self.step_size <= 0:
            raise ConfigError(f"PGD step size must be > 0, got {self.step_size}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")


def train_attack(epsilon: float = 8 / 255, step_size: float = 2 / 255, steps: int = 7) -> AttackConfig:
    """PGD-7 with random start, used inside adversarial training."""
    return AttackConfig("pgd", epsilon, step_size, steps, random_start=True)


def eval_attack(epsilon: float = 8 / 255, step_size: float = 2 / 255, steps: int = 10) -> AttackConfig:
    """PGD-10 without random start, used for reporting and model selection."""
    return AttackConfig("pgd", epsilon, step_size, steps, random_start=False)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    delta: np.ndarray
    loss: np.ndarray
    success: np.ndarray


def input_gradient(model, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(d loss / d x, per-sample loss, logits) for the summed cross-entropy."""
    xt = Tensor(x, requires_grad=True)
    logits = model(xt, strict=False)
    per = T.cross_entropy(logits, y, reduction="none")
    grads = T.backward(per.sum(), [xt])
    return grads[xt], per.data, logits.data


def _ball(x0: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Bounds [lo, hi] with ``x0 - lo <= eps`` and ``hi - x0 <= eps`` exactly.

    ``x0 +- eps`` is rounded in the working dtype, which can overshoot the
    budget by an ulp; those entries are stepped back toward ``x0``.
    """
    e = x0.dtype.type(eps)
    lo, hi = x0 - e, x0 + e
    x64, e64 = x0.astype(np.float64), float(e)
    while True:
        over = hi.astype(np.float64) - x64 > e64
        if not over.any():
            break
        hi = np.where(over, np.nextafter(hi, x0.dtype.type(-np.inf)), hi)
    while True:
        over = x64 - lo.astype(np.float64) > e64
        if not over.any():
            break
        lo = np.where(over, np.nextafter(lo, x0.dtype.type(np.inf)), lo)
    return lo, hi


def project(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Clip to the epsilon-ball first, then to the pixel range."""
    return np.clip(np.clip(x, lo, hi), 0, 1)


def pgd_linf(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
             rng: np.random.Generator | None = None) -> AttackResult:
    """Untargeted L-inf PGD maximising the cross-entropy of ``model``.

    The gradient runs through the whole model (frozen and tunable parts,
    input transform included).
    """
    if cfg.epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {cfg.epsilon}")
    x0 = np.asarray(x, dtype=model.dtype)
    y = np.asarray(y)
    if x0.size and (x0.min() < 0 or x0.max() > 1):
        raise InputError("clean inputs must lie in [0, 1]")
    if cfg.epsilon == 0:
        return _result(model, x0, x0.copy(), y)
    lo, hi = _ball(x0, cfg.epsilon)
    if cfg.random_start:
        if rng is None:
            rng = np.random.default_rng(0)
        noise = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape).astype(x0.dtype)
        xt = project(x0 + noise, lo, hi)
    else:
        xt = x0.copy()
    alpha = x0.dtype.type(cfg.epsilon if cfg.kind == "fgsm" else cfg.step_size)
    steps = 1 if cfg.kind == "fgsm" else cfg.steps
    for _ in range(steps):
        g, _, _ = input_gradient(model, xt, y)
        xt = project(xt + alpha * np.sign(g).astype(x0.dtype), lo, hi)
    return _result(model, x0, xt, y)


def _result(model, x0, x_adv, y) -> AttackResult:
    with T.no_grad():
        logits = model(x_adv, strict=False)
        loss = T.cross_entropy(logits, y, reduction="none").data
    success = np.argmax(logits.data, axis=1) != y
    return AttackResult(x_adv, x_adv - x0, loss, success)


def fgsm(model, x: np.ndarray, y: np.ndarray, epsilon: float) -> AttackResult:
    """One signed-gradient step of size epsilon from the clean point."""
    return pgd_linf(model, x, y, AttackConfig("pgd", epsilon, max(epsilon, 1e-12), 1, random_start=False))


def attack(model, x, y, cfg: AttackConfig, rng=None) -> AttackResult:
    if cfg.kind == "fgsm":
        return fgsm(model, x, y, cfg.epsilon)
    return pgd_linf(model, x, y, cfg, rng)


@dataclass
class Evaluation:
    clean_acc: float
    robust_acc: float
    clean_loss: float
    adv_loss: float
    n: int


def evaluate(model, images: np.ndarray, labels: np.ndarray, cfg: AttackConfig | None,
             rng: np.random.Generator | None = None, batch_size: int = 250) -> Evaluation:
    """Clean and adversarial accuracy/loss over a labelled set, batch by batch
    in dataset order."""
    n = len(labels)
    if n == 0:
        raise InputError("cannot evaluate on an empty dataset")
    clean_hits = adv_hits = 0
    clean_loss = adv_loss = 0.0
    for i in range(0, n, batch_size):
        xb = np.asarray(images[i:i + batch_size], dtype=model.dtype)
        yb = np.asarray(labels[i:i + batch_size])
        with T.no_grad():
            logits = model(xb)
            per = T.cross_entropy(logits, yb, reduction="none").data
        clean_loss += float(per.astype(np.float64).sum())
        clean_hits += int((np.argmax(logits.data, axis=1) == yb).sum())
        if cfg is None:
            continue
        res = attack(model, xb, yb, cfg, rng)
        adv_hits += int((~res.success).sum())
        adv_loss += float(res.loss.astype(np.float64).sum())
    if cfg is None:
        adv_hits, adv_loss = clean_hits, clean_loss
    return Evaluation(clean_hits / n, adv_hits / n, clean_loss / n, adv_loss / n, n)


def robust_accuracy(model, dataset, cfg: AttackConfig, rng: np.random.Generator | None = None,
                    batch_size: int = 250) -> float:
    """Fraction of samples still classified correctly after the attack."""
    return evaluate(model, dataset.images, dataset.labels, cfg, rng, batch_size).robust_acc
