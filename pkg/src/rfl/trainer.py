"""Outer minimisation: AdamW over the tunable parameters, cosine schedule with
linear warm-up, standard/adversarial epochs, early stopping and grid search."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, Evaluation, attack, eval_attack, evaluate
from .errors import ConfigError, ContractError, DivergenceError
from .tensor import RngStream

log = logging.getLogger(__name__)

DECAY_ROLES = frozenset({"weight", "head-weight", "lora-A", "lora-B", "adapter-down", "adapter-up"})
WEIGHT_DECAYS = (0.01, 0.001, 0.0001, 0.0)
BASE_LR_GRID = {
    "fullft": (0.005, 0.001, 0.0001, 0.0005),
    "bias": (0.005, 0.001, 0.0001, 0.0005),
    "linear": (1.0, 0.5, 0.1, 0.05),
    "vpt": (0.5, 0.1, 0.05, 0.01),
    "adapter": (0.05, 0.01, 0.005, 0.001),
    "lora": (0.05, 0.01, 0.005, 0.001),
}


def lr_grid(kind: str, roli: bool = False) -> tuple[float, ...]:
    """Base-lr grid for a strategy; RoLI adds every value divided by ten."""
    grid = BASE_LR_GRID[kind]
    if not roli:
        return grid
    out = list(grid)
    for v in grid:
        low = float(f"{v / 10:.10g}")
        if low not in out:
            out.append(low)
    return tuple(out)


@dataclass
class OptimizerConfig:
    base_lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @property
    def lr(self) -> float:
        """Peak learning rate, ``base_lr * batch_size / 256``."""
        return self.base_lr * self.batch_size / 256


@dataclass
class ScheduleConfig:
    total_steps: int
    warmup_steps: int | None = None

    def __post_init__(self):
        if self.warmup_steps is None:
            self.warmup_steps = int(0.1 * self.total_steps)
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(f"need 0 <= warmup ({self.warmup_steps}) < total ({self.total_steps})")


def cosine_warmup_lr(t: int, lr: float, cfg: ScheduleConfig) -> float:
    tw, tt = cfg.warmup_steps, cfg.total_steps
    if t <= tw:
        return lr * t / tw
    return lr * 0.5 * (1.0 + math.cos(math.pi * (t - tw) / (tt - tw)))


def optimizer_step(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
                   wd: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One decoupled-weight-decay Adam update; returns new (p, m, v)."""
    b1, b2 = betas
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * (g * g)
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    p = p - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * wd * p
    return p, m, v


class AdamW:
    """AdamW over the trainable entries of a ParameterStore.

    Weight decay only touches matrix-like roles; biases, norms and prompts
    are never decayed.
    """

    def __init__(self, params, cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.state: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        for name in self.params.trainable_names():
            t = self.params[name]
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(t.data)
            m, v = self.state.get(name) or (np.zeros_like(t.data), np.zeros_like(t.data))
            wd = self.cfg.weight_decay if self.params.role(name) in DECAY_ROLES else 0.0
            p, m, v = optimizer_step(t.data, g.astype(t.dtype, copy=False), m, v, self.t, lr, wd,
                                     self.cfg.betas, self.cfg.eps)
            t.data = p.astype(t.dtype, copy=False)
            self.state[name] = (m, v)


@dataclass
class TrainConfig:
    epochs: int = 20
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    warmup_fraction: float = 0.1
    train_attack: AttackConfig | None = None
    eval_attack: AttackConfig | None = field(default_factory=eval_attack)
    hflip: bool = False
    clip_grad_norm: float | None = None
    eval_batch_size: int = 250
    restore_best: bool = True

    @property
    def adversarial(self) -> bool:
        return self.train_attack is not None and self.train_attack.epsilon > 0


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_clean_acc: float
    val_robust_acc: float
    val_clean_loss: float
    val_adv_loss: float
    seconds: float
    step: int


@dataclass
class RunRecord:
    stage: str = "finetune"
    rows: list[EpochRow] = field(default_factory=list)
    test: Evaluation | None = None
    seconds: float = 0.0
    base_lr: float | None = None
    weight_decay: float | None = None

    @property
    def selected_epoch(self) -> int:
        return early_stop_select([r.val_robust_acc for r in self.rows])

    @property
    def best_val_robust(self) -> float:
        return self.rows[self.selected_epoch - 1].val_robust_acc

    def series(self, key: str) -> list[float]:
        return [getattr(r, key) for r in self.rows]


def early_stop_select(val_robust: Sequence[float]) -> int:
    """1-based index of the best validation robust accuracy (earliest on ties)."""
    if len(val_robust) == 0:
        raise ContractError("early stopping needs at least one epoch")
    return int(np.argmax(np.asarray(val_robust, dtype=np.float64))) + 1


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


def adversarial_epoch(model, images: np.ndarray, labels: np.ndarray, optimizer: AdamW,
                      schedule: ScheduleConfig, attack_cfg: AttackConfig | None, rng: RngStream,
                      hflip: bool = False, clip_grad_norm: float | None = None) -> float:
    """One pass over the training data; returns the mean training loss.

    Each batch is attacked with the full model (frozen + tunable), then only
    the tunable parameters are updated on the adversarial loss. With
    ``attack_cfg`` None (or epsilon 0) this is a standard epoch.
    """
    params = model.params
    bs = optimizer.cfg.batch_size
    order = rng.generator("data-shuffle").permutation(len(labels))
    flip_rng = rng.generator("augment")
    attack_rng = rng.generator(attack_cfg.seed_label) if attack_cfg is not None else None
    lr = optimizer.cfg.lr
    total, count = 0.0, 0
    for start in range(0, len(order), bs):
        idx = order[start:start + bs]
        xb = images[idx].astype(model.dtype)
        yb = labels[idx]
        if hflip:
            flip = flip_rng.random(len(idx)) < 0.5
            xb[flip] = xb[flip][..., ::-1]
        if attack_cfg is not None and attack_cfg.epsilon > 0:
            res = attack(model, xb, yb, attack_cfg, attack_rng)
            if start == 0:
                _check_attack(res.delta, res.x_adv, attack_cfg.epsilon)
            xb = res.x_adv
        trainable = {n: params[n] for n in params.trainable_names()}
        loss = T.cross_entropy(model(xb, strict=False), yb)
        lr_t = cosine_warmup_lr(optimizer.t + 1, lr, schedule)
        by_tensor = T.backward(loss, list(trainable.values()))
        grads = {n: by_tensor[t] for n, t in trainable.items()}
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} at step {optimizer.t + 1} "
                                  f"(lr {lr_t:.3g}, grad norm {_grad_norm(grads):.3g})")
        if clip_grad_norm is not None:
            norm = _grad_norm(grads)
            if norm > clip_grad_norm:
                grads = {n: g * (clip_grad_norm / norm) for n, g in grads.items()}
        optimizer.step(grads, lr_t)
        total += value * len(idx)
        count += len(idx)
    return total / max(count, 1)


def standard_epoch(model, images, labels, optimizer, schedule, rng, hflip=False, clip_grad_norm=None) -> float:
    return adversarial_epoch(model, images, labels, optimizer, schedule, None, rng, hflip, clip_grad_norm)


def _check_attack(delta: np.ndarray, x_adv: np.ndarray, eps: float) -> None:
    worst = float(np.max(np.abs(delta.astype(np.float64)))) if delta.size else 0.0
    if worst > float(np.float32(eps)) + 1e-9 or x_adv.min() < 0 or x_adv.max() > 1:
        raise ContractError(f"attack left its constraint set (|delta|max {worst:.3g}, eps {eps:.3g})")


def train(model, train_set, val_set, cfg: TrainConfig, rng: RngStream, stage: str = "finetune",
          test_set=None, on_epoch: Callable[[EpochRow], None] | None = None,
          clock: Callable[[], float] = time.perf_counter) -> RunRecord:
    """Train the tunable parameters for ``cfg.epochs`` epochs.

    After every epoch the model is scored on ``val_set`` (clean + evaluation
    attack). With ``restore_best`` the tunable parameters of the epoch with
    the best validation robust accuracy are restored at the end; ``test_set``
    is then evaluated on that model.
    """
    opt = AdamW(model.params, cfg.optim)
    steps_per_epoch = max(1, math.ceil(len(train_set) / cfg.optim.batch_size))
    total = cfg.epochs * steps_per_epoch
    schedule = ScheduleConfig(total, int(cfg.warmup_fraction * total))
    record = RunRecord(stage=stage, base_lr=cfg.optim.base_lr, weight_decay=cfg.optim.weight_decay)
    eval_rng = rng.generator("eval-attack")
    best, best_state = -1.0, None
    start_all = clock()
    for epoch in range(1, cfg.epochs + 1):
        t0 = clock()
        loss = adversarial_epoch(model, train_set.images, train_set.labels, opt, schedule,
                                 cfg.train_attack, rng, cfg.hflip, cfg.clip_grad_norm)
        ev = evaluate(model, val_set.images, val_set.labels, cfg.eval_attack, eval_rng, cfg.eval_batch_size)
        row = EpochRow(epoch, loss, ev.clean_acc, ev.robust_acc, ev.clean_loss, ev.adv_loss,
                       clock() - t0, opt.t)
        record.rows.append(row)
        log.info("%s epoch %d: loss %.4f val clean %.4f robust %.4f", stage, epoch, loss,
                 ev.clean_acc, ev.robust_acc)
        if ev.robust_acc > best:
            best = ev.robust_acc
            best_state = {n: model.params[n].data.copy() for n in model.params.trainable_names()}
        if on_epoch is not None:
            on_epoch(row)
    if cfg.restore_best and best_state is not None:
        for n, value in best_state.items():
            model.params[n].data = value
    if test_set is not None:
        record.test = evaluate(model, test_set.images, test_set.labels, cfg.eval_attack, eval_rng,
                               cfg.eval_batch_size)
    record.seconds = clock() - start_all
    return record


@dataclass
class GridResult:
    best: tuple[float, float]
    records: dict[tuple[float, float], RunRecord]

    @property
    def best_record(self) -> RunRecord:
        return self.records[self.best]


def grid_search(run: Callable[[float, float], RunRecord], base_lrs: Sequence[float],
                weight_decays: Sequence[float] = WEIGHT_DECAYS, workers: int = 1) -> GridResult:
    """Evaluate ``run(base_lr, wd)`` on every cell; the winner maximises the
    validation robust accuracy at its early-stopped epoch (first cell on ties)."""
    cells = [(lr, wd) for lr in base_lrs for wd in weight_decays]
    if not cells:
        raise ConfigError("grid search needs at least one learning rate and one weight decay")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: run(*c), cells))
    else:
        results = [run(*c) for c in cells]
    records = dict(zip(cells, results))
    best = max(cells, key=lambda c: (records[c].best_val_robust, -cells.index(c)))
    return GridResult(best, records)
