"""End-to-end experiments: pretraining arms, linear probes, finetuning with
any head initialisation, RoLI two-stage runs, RegLI fits, transfer metrics,
correlation analysis, gradient maps and the speed/robustness table."""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, Evaluation, evaluate, eval_attack, input_gradient, train_attack
from .data_io import (Dataset, MetricRow, SplitSpec, load_cifar10_bin, load_digits, load_idx,
                      save_checkpoint, split, write_metrics_csv, write_pgm)
from .errors import ConfigError, UndefinedMetricError
from .models import InputTransform, Model, ParameterStore, ViTConfig, bilinear_matrix, build_model, logits_of
from .peft import HeadInit, Strategy, attach
from .tensor import RngStream
from .trainer import (EpochRow, GridResult, OptimizerConfig, RunRecord, TrainConfig, grid_search, lr_grid, train,
                      WEIGHT_DECAYS)

log = logging.getLogger(__name__)


# -- configuration ---------------------------------------------------------

@dataclass
class DataConfig:
    dataset: str = "digits"
    # digits are 8x8; side > 8 upsamples them bilinearly before anything else
    image_size: int = 32
    images_path: str = ""
    labels_path: str = ""
    source_classes: tuple[int, ...] = (0, 1, 2, 3, 4)
    target_classes: tuple[int, ...] = (5, 6, 7, 8, 9)
    source_val_per_class: int = 20
    source_test_per_class: int = 40
    target_train_per_class: int = 80
    target_val_per_class: int = 20
    # None: the remainder of each class
    target_test_per_class: int | None = None


@dataclass
class ScheduleSettings:
    epochs: int = 20
    warmup_fraction: float = 0.1
    hflip: bool = False
    clip_grad_norm: float | None = None


@dataclass
class PipelineSettings:
    tag: str = "digits"
    pretrain_arm: str = "robust"
    pretrain_epsilon: float = 4 / 255
    pretrain_steps: int = 3
    # None: 2 * epsilon / 3
    pretrain_step_size: float | None = None
    pretrain_epochs: int = 30
    pretrain_base_lr: float = 0.001
    pretrain_weight_decay: float = 0.01
    probe_base_lr: float = 0.1
    probe_weight_decay: float = 0.0
    head_init: str = "ranli"
    regli_l2: float = 1e-3
    grid: bool = False
    timing: str = "wall"
    eval_samples: int = 100

    def __post_init__(self):
        if self.pretrain_arm not in ("standard", "robust"):
            raise ConfigError(f"pretrain_arm must be standard or robust, got {self.pretrain_arm!r}")
        if self.timing not in ("wall", "none"):
            raise ConfigError(f"timing must be wall or none, got {self.timing!r}")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ViTConfig = field(default_factory=lambda: ViTConfig(image_size=32, patch_size=16))
    strategy: Strategy = field(default_factory=lambda: Strategy("lora"))
    attack_train: AttackConfig = field(default_factory=train_attack)
    attack_eval: AttackConfig = field(default_factory=eval_attack)
    optim: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(base_lr=0.005, weight_decay=0.0001))
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    seed: int = 0

    def train_config(self, adversarial: bool = True, base_lr: float | None = None,
                     weight_decay: float | None = None, epochs: int | None = None,
                     restore_best: bool = True) -> TrainConfig:
        optim = replace(self.optim,
                        base_lr=self.optim.base_lr if base_lr is None else base_lr,
                        weight_decay=self.optim.weight_decay if weight_decay is None else weight_decay)
        return TrainConfig(epochs=epochs or self.schedule.epochs, optim=optim,
                           warmup_fraction=self.schedule.warmup_fraction,
                           train_attack=self.attack_train if adversarial else None,
                           eval_attack=self.attack_eval, hflip=self.schedule.hflip,
                           clip_grad_norm=self.schedule.clip_grad_norm, restore_best=restore_best)

    @property
    def clock(self) -> Callable[[], float]:
        return time.perf_counter if self.pipeline.timing == "wall" else (lambda: 0.0)


# -- data ------------------------------------------------------------------

@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass
class TransferData:
    source: Splits
    target: Splits


def upsample(dataset: Dataset, side: int) -> Dataset:
    """Bilinear (half-pixel) resize of every image, clipped to [0, 1]."""
    h = dataset.images.shape[-1]
    if side == h:
        return dataset
    m = bilinear_matrix(h, side)
    out = np.einsum("ij,ncjk,lk->ncil", m, dataset.images.astype(np.float64), m)
    return Dataset(np.clip(out, 0, 1).astype(np.float32), dataset.labels, dataset.num_classes,
                   f"{dataset.name}@{side}")


def load_dataset(cfg: DataConfig) -> Dataset:
    if cfg.dataset == "digits":
        ds = load_digits()
    elif cfg.dataset == "idx":
        ds = load_idx(cfg.images_path, cfg.labels_path)
    elif cfg.dataset == "cifar10":
        ds = load_cifar10_bin(p for p in cfg.images_path.split(",") if p)
    else:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}; expected digits, idx or cifar10")
    return upsample(ds, cfg.image_size)


def prepare_data(cfg: ExperimentConfig, rng: RngStream) -> TransferData:
    """Source task on one class subset, target task on a disjoint one."""
    d = cfg.data
    if set(d.source_classes) & set(d.target_classes):
        raise ConfigError("source and target classes must be disjoint")
    ds = load_dataset(d)
    src = ds.select_classes(d.source_classes, f"{ds.name}/source")
    tgt = ds.select_classes(d.target_classes, f"{ds.name}/target")
    s = split(src, SplitSpec(None, d.source_val_per_class, d.source_test_per_class, "source-split"), rng)
    t = split(tgt, SplitSpec(d.target_train_per_class, d.target_val_per_class, d.target_test_per_class,
                             "target-split"), rng)
    return TransferData(Splits(*s), Splits(*t))


# -- metric rows -----------------------------------------------------------

def epoch_rows(stage: str, row: EpochRow) -> list[MetricRow]:
    return [
        MetricRow(stage, row.epoch, "train", "loss", row.train_loss, row.seconds),
        MetricRow(stage, row.epoch, "val", "clean_acc", row.val_clean_acc, row.seconds),
        MetricRow(stage, row.epoch, "val", "robust_acc", row.val_robust_acc, row.seconds),
        MetricRow(stage, row.epoch, "val", "clean_loss", row.val_clean_loss, row.seconds),
        MetricRow(stage, row.epoch, "val", "adv_loss", row.val_adv_loss, row.seconds),
        MetricRow(stage, row.epoch, "train", "step", float(row.step), row.seconds),
    ]


def test_rows(stage: str, record: RunRecord) -> list[MetricRow]:
    if record.test is None:
        return []
    ev, k = record.test, record.selected_epoch
    return [MetricRow(stage, k, "test", m, getattr(ev, m), record.seconds)
            for m in ("clean_acc", "robust_acc", "clean_loss", "adv_loss")]


class MetricSink:
    """Streams rows of one run into a metrics CSV (or nowhere)."""

    def __init__(self, path=None, run_id: str | None = None):
        self.path = Path(path) if path else None
        self.run_id = run_id
        self.started = False

    def write(self, rows: Sequence[MetricRow]) -> None:
        if self.path is None or not rows:
            return
        self.run_id = write_metrics_csv(rows, self.path, self.run_id, resume=self.started)
        self.started = True

    def epoch_hook(self, stage: str) -> Callable[[EpochRow], None]:
        return lambda row: self.write(epoch_rows(stage, row))


# -- stages ----------------------------------------------------------------

def pretrain(cfg: ExperimentConfig, source: Splits, rng: RngStream, arm: str | None = None,
             sink: MetricSink | None = None) -> tuple[Model, RunRecord]:
    """Train a backbone on the source task, standardly or with PGD-k.

    The final weights are kept (no early stopping); the source test set is
    scored with the evaluation attack.
    """
    p = cfg.pipeline
    arm = arm or p.pretrain_arm
    stream = rng.child(f"pretrain-{arm}")
    model = build_model(replace(cfg.model, num_classes=source.train.num_classes), stream.generator("init"))
    tc = cfg.train_config(adversarial=False, base_lr=p.pretrain_base_lr, weight_decay=p.pretrain_weight_decay,
                          epochs=p.pretrain_epochs, restore_best=False)
    if arm == "robust":
        step = p.pretrain_step_size if p.pretrain_step_size is not None else 2 * p.pretrain_epsilon / 3
        tc.train_attack = AttackConfig("pgd", p.pretrain_epsilon, step, p.pretrain_steps, random_start=True)
    sink = sink or MetricSink()
    stage = f"pretrain-{arm}"
    record = train(model, source.train, source.val, tc, stream, stage, test_set=source.test,
                   on_epoch=sink.epoch_hook(stage), clock=cfg.clock)
    sink.write(test_rows(stage, record))
    model.params.freeze_all()
    return model, record


def backbone_from_store(cfg: ExperimentConfig, store: ParameterStore) -> Model:
    store = store.copy()
    store.freeze_all()
    return Model(replace(cfg.model, num_classes=store["head.weight"].shape[0]), store, InputTransform())


def load_model(cfg: ExperimentConfig, path) -> Model:
    """Rebuild a model from a checkpoint; LoRA tensors take their scale from
    ``cfg.strategy``."""
    from .data_io import load_checkpoint

    store = load_checkpoint(path)
    model = Model(replace(cfg.model, num_classes=store["head.weight"].shape[0]), store, InputTransform())
    if any(n.endswith(".lora_A") for n in store):
        model.strategy = cfg.strategy
    return model


def _check_classes(target: Splits, num_classes: int | None) -> int:
    k = target.train.num_classes
    if num_classes is not None and num_classes != k:
        raise ConfigError(f"target task has {k} classes but {num_classes} were requested")
    return k


def linear_probe(backbone: Model, target: Splits, cfg: ExperimentConfig, rng: RngStream,
                 adversarial: bool = True, num_classes: int | None = None, base_lr: float | None = None,
                 weight_decay: float | None = None, sink: MetricSink | None = None,
                 stage: str | None = None) -> tuple[Model, RunRecord]:
    """Train a fresh head on frozen features (adversarially or not)."""
    k = _check_classes(target, num_classes)
    mode = "adv" if adversarial else "std"
    stream = rng.child(f"probe-{mode}")
    model = attach(backbone.clone(), Strategy("linear"), HeadInit("ranli"), stream.generator("head"), k)
    p = cfg.pipeline
    tc = cfg.train_config(adversarial, p.probe_base_lr if base_lr is None else base_lr,
                          p.probe_weight_decay if weight_decay is None else weight_decay)
    stage = stage or f"probe-{mode}"
    sink = sink or MetricSink()
    record = train(model, target.train, target.val, tc, stream, stage, test_set=target.test,
                   on_epoch=sink.epoch_hook(stage), clock=cfg.clock)
    sink.write(test_rows(stage, record))
    return model, record


def finetune(backbone: Model, target: Splits, cfg: ExperimentConfig, rng: RngStream,
             head_init: HeadInit | None = None, adversarial: bool = True, strategy: Strategy | None = None,
             base_lr: float | None = None, weight_decay: float | None = None,
             sink: MetricSink | None = None, stage: str | None = None) -> tuple[Model, RunRecord]:
    """Attach a strategy to a copy of ``backbone`` and train it on the target."""
    strategy = strategy or cfg.strategy
    head_init = head_init or HeadInit("ranli")
    k = _check_classes(target, None)
    stream = rng.child(f"finetune-{strategy.kind}-{head_init.scheme}-{'adv' if adversarial else 'std'}")
    model = attach(backbone.clone(), replace(strategy), head_init, stream.generator("attach"), k)
    stage = stage or f"finetune-{'adv' if adversarial else 'std'}"
    sink = sink or MetricSink()
    record = train(model, target.train, target.val, cfg.train_config(adversarial, base_lr, weight_decay),
                   stream, stage, test_set=target.test, on_epoch=sink.epoch_hook(stage), clock=cfg.clock)
    sink.write(test_rows(stage, record))
    return model, record


def tuned(run: Callable[[float, float], tuple[Model, RunRecord]], base_lrs: Sequence[float],
          weight_decays: Sequence[float] = WEIGHT_DECAYS, workers: int = 1) -> tuple[Model, RunRecord, GridResult]:
    """Grid search over ``run(base_lr, wd)``; returns the winning model too."""
    models: dict[tuple[float, float], Model] = {}

    def cell(lr, wd):
        m, rec = run(lr, wd)
        models[(lr, wd)] = m
        return rec

    result = grid_search(cell, base_lrs, weight_decays, workers)
    return models[result.best], result.best_record, result


@dataclass
class RoliResult:
    model: Model
    probe: RunRecord
    finetune: RunRecord
    probe_model: Model
    step0_max_diff: float


def roli_run(backbone: Model, target: Splits, cfg: ExperimentConfig, rng: RngStream,
             strategy: Strategy | None = None, sink: MetricSink | None = None,
             base_lr: float | None = None, weight_decay: float | None = None,
             stage: str = "roli-finetune") -> RoliResult:
    """Adversarial linear probe, then adversarial finetuning from its head
    with zero-initialised new modules."""
    strategy = strategy or cfg.strategy
    sink = sink or MetricSink()
    probe_model, probe_rec = linear_probe(backbone, target, cfg, rng.child("roli"), True, sink=sink,
                                          stage="roli-probe")
    stream = rng.child(f"roli-{strategy.kind}")
    k = target.train.num_classes
    model = attach(backbone.clone(), replace(strategy), HeadInit("roli", source=probe_model),
                   stream.generator("attach"), k)
    x = target.test.images[:cfg.pipeline.eval_samples]
    diff = float(np.max(np.abs(logits_of(model, x).astype(np.float64) - logits_of(probe_model, x))))
    if diff != 0.0:
        log.warning("RoLI step-0 logits differ from the probe by %.3g", diff)
    rec = train(model, target.train, target.val, cfg.train_config(True, base_lr, weight_decay), stream,
                stage, test_set=target.test, on_epoch=sink.epoch_hook(stage), clock=cfg.clock)
    sink.write(test_rows(stage, rec))
    return RoliResult(model, probe_rec, rec, probe_model, diff)


def overfitting_log(probe: RunRecord, finetune: RunRecord) -> list[MetricRow]:
    """Both stages' validation-loss series on one monotone step axis."""
    rows, offset = [], 0
    for stage, rec in (("probe", probe), ("finetune", finetune)):
        for r in rec.rows:
            rows.append(MetricRow(stage, r.epoch, "val", "adv_loss", r.val_adv_loss, float(offset + r.step)))
            rows.append(MetricRow(stage, r.epoch, "val", "clean_loss", r.val_clean_loss, float(offset + r.step)))
        offset += rec.rows[-1].step if rec.rows else 0
    return rows


# -- logistic-regression head ---------------------------------------------

@dataclass
class RegliFit:
    weight: np.ndarray
    bias: np.ndarray
    iterations: int
    grad_norm: float
    converged: bool


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def regli_fit(features: np.ndarray, labels: np.ndarray, num_classes: int, l2: float = 1e-3,
              tol: float = 1e-6, max_iter: int = 10_000) -> RegliFit:
    """Multinomial logistic regression by accelerated full-batch gradient descent.

    Objective: mean cross-entropy + ``l2 / 2 * ||W||^2`` (bias unpenalised),
    step ``1 / L`` with ``L = ||[X 1]||_2^2 / (2 n) + l2``, Nesterov momentum
    restarted whenever it points uphill. Stops once the gradient norm drops
    below ``tol``; otherwise warns and returns the iterate with the lowest
    objective.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    n, d = x.shape
    xb = np.hstack([x, np.ones((n, 1))])
    onehot = np.eye(num_classes)[y]
    lip = np.linalg.norm(xb, 2) ** 2 / (2 * n) + l2
    step = 1.0 / lip
    reg = np.ones((d + 1, 1))
    reg[-1] = 0.0

    def objective_grad(th):
        z = xb @ th
        zmax = z.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
        obj = float(np.mean(lse - (z * onehot).sum(axis=1))) + 0.5 * l2 * float(np.sum((th * reg) ** 2))
        g = xb.T @ (_softmax_rows(z) - onehot) / n + l2 * th * reg
        return obj, g

    theta = np.zeros((d + 1, num_classes))
    look, t = theta, 1.0
    best = (math.inf, theta, math.inf)
    gnorm = math.inf
    for it in range(max_iter + 1):
        obj, g = objective_grad(theta)
        gnorm = float(np.linalg.norm(g))
        if obj < best[0]:
            best = (obj, theta, gnorm)
        if gnorm < tol:
            return RegliFit(theta[:-1].T.copy(), theta[-1].copy(), it, gnorm, True)
        if it == max_iter:
            break
        _, g_look = objective_grad(look)
        nxt = look - step * g_look
        if float(np.sum(g_look * (nxt - theta))) > 0:
            t = 1.0
        t_next = (1 + math.sqrt(1 + 4 * t * t)) / 2
        look = nxt + (t - 1) / t_next * (nxt - theta)
        theta, t = nxt, t_next
    warnings.warn(f"logistic regression stopped after {max_iter} iterations (grad norm {gnorm:.3g})",
                  RuntimeWarning, stacklevel=2)
    _, theta, gnorm = best
    return RegliFit(theta[:-1].T.copy(), theta[-1].copy(), max_iter, gnorm, False)


def cached_features(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    with T.no_grad():
        return np.concatenate([model.features(images[i:i + batch_size]).data
                               for i in range(0, len(images), batch_size)])


def regli_head(backbone: Model, dataset: Dataset, l2: float) -> tuple[np.ndarray, np.ndarray]:
    fit = regli_fit(cached_features(backbone, dataset.images), dataset.labels, dataset.num_classes, l2)
    return fit.weight.astype(np.float32), fit.bias.astype(np.float32)


# -- transfer metrics ------------------------------------------------------

def transferred_accuracy(acc_lp_std: float, acc_ft_std: float) -> float:
    """Relative clean-accuracy gain of standard probing over standard finetuning."""
    if acc_ft_std == 0:
        raise UndefinedMetricError("transferred accuracy needs a nonzero finetuning accuracy")
    return (acc_lp_std - acc_ft_std) / acc_ft_std


def transferred_robustness(rob_lp_adv: float, rob_ft_adv: float) -> float:
    """Relative robust-accuracy gain of adversarial probing over adversarial finetuning."""
    if rob_ft_adv == 0:
        raise UndefinedMetricError("transferred robustness needs a nonzero finetuning robustness")
    return (rob_lp_adv - rob_ft_adv) / rob_ft_adv


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"pearson needs two equal-length vectors, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise UndefinedMetricError("pearson needs at least two points")
    a = a - a.mean()
    b = b - b.mean()
    sa, sb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if sa == 0 or sb == 0:
        raise UndefinedMetricError("pearson is undefined for a constant axis")
    return float(a @ b) / (sa * sb)


@dataclass
class TransferAnalysis:
    points: list[tuple[float, float]]
    pearson: float | None


def pairwise_transfer_metrics(ft_pairs: Sequence[tuple[float, float]],
                              lp_pairs: Sequence[tuple[float, float]]) -> TransferAnalysis:
    """All (finetune i, probe j) combinations.

    ``ft_pairs[i] = (acc(FT_std)_i, rob(FT_adv)_i)`` and
    ``lp_pairs[j] = (acc(LP_std)_j, rob(LP_adv)_j)``. Pearson is None when
    undefined.
    """
    if not ft_pairs or not lp_pairs:
        raise ConfigError("need at least one finetune pair and one probe pair")
    pts = [(transferred_accuracy(la, fa), transferred_robustness(lr, fr))
           for fa, fr in ft_pairs for la, lr in lp_pairs]
    try:
        r = pearson([p[0] for p in pts], [p[1] for p in pts])
    except UndefinedMetricError:
        r = None
    return TransferAnalysis(pts, r)


# -- gradient maps ---------------------------------------------------------

def gradient_image(g: np.ndarray) -> np.ndarray:
    """One ``[C, H, W]`` gradient to 8-bit grey: channel mean, scaled by the
    max magnitude, zero mapped to 128."""
    m = np.asarray(g, dtype=np.float64).mean(axis=0)
    peak = float(np.max(np.abs(m))) if m.size else 0.0
    u = m / peak if peak > 0 else np.zeros_like(m)
    return np.floor(127.5 * (1.0 + u) + 0.5).astype(np.uint8)


def gradviz(model: Model, images: np.ndarray, labels: np.ndarray, out_dir=None,
            prefix: str = "grad") -> list[np.ndarray]:
    images = np.asarray(images, dtype=model.dtype)
    g, _, _ = input_gradient(model, images, np.asarray(labels))
    pics = [gradient_image(gi) for gi in g]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, p in enumerate(pics):
            write_pgm(p, out / f"{prefix}-{i:04d}.pgm")
    return pics


# -- speed / robustness ----------------------------------------------------

@dataclass
class SpeedRow:
    scheme: str
    seconds: float
    robust_acc: float
    clean_acc: float
    init_seconds: float


def speed_report(backbone: Model, target: Splits, cfg: ExperimentConfig, rng: RngStream,
                 schemes: Sequence[str] = ("ranli", "regli", "stdli", "roli"),
                 clock: Callable[[], float] = time.perf_counter) -> list[SpeedRow]:
    """Time head initialisation plus adversarial finetuning per scheme,
    sorted by total wall-clock."""
    rows = []
    for scheme in schemes:
        t0 = clock()
        if scheme == "ranli":
            head = HeadInit("ranli")
        elif scheme == "regli":
            head = HeadInit("regli", source=regli_head(backbone, target.train, cfg.pipeline.regli_l2))
        elif scheme in ("stdli", "roli"):
            probe, _ = linear_probe(backbone, target, cfg, rng.child(f"speed-{scheme}"), scheme == "roli")
            head = HeadInit(scheme, source=probe)
        else:
            raise ConfigError(f"unknown scheme {scheme!r}")
        t_init = clock() - t0
        _, rec = finetune(backbone, target, cfg, rng.child(f"speed-{scheme}"), head)
        rows.append(SpeedRow(scheme, clock() - t0, rec.test.robust_acc, rec.test.clean_acc, t_init))
    return sorted(rows, key=lambda r: r.seconds)


def save_model(model: Model, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, path)
