"""Acceptance suite: one test per criterion, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per
criterion is printed in the terminal summary. The two desk-scale transfer
experiments (criteria 6 and 7) share cached backbones and dominate runtime.
"""

import functools
import time
from dataclasses import replace

import numpy as np
import pytest

from acceptance_log import criterion
from conftest import small_experiment
from gradcheck import OP_CASES, check_case, vit_case
from oracles import Logistic, box_optimal_delta
from rfl import tensor as T
from rfl.attacks import AttackConfig, eval_attack, evaluate, pgd_linf
from rfl.cli import config_to_ini, main
from rfl.data_io import SplitSpec, load_checkpoint, load_digits, split
from rfl.models import Model, ViTConfig, build_tiny_vit, count_params, logits_of
from rfl.peft import HeadInit, Strategy, attach
from rfl.pipeline import (ExperimentConfig, finetune, linear_probe, pairwise_transfer_metrics, pearson, prepare_data,
                          pretrain, roli_run, transferred_accuracy, transferred_robustness)
from rfl.tensor import RngStream
from rfl.trainer import OptimizerConfig, TrainConfig, train

SEEDS = (0, 1, 2)


@criterion(1, "gradient correctness")
def test_criterion_01_gradients():
    t0 = time.perf_counter()
    errors = []
    for name, build in sorted(OP_CASES.items()):
        for seed in range(4):
            errors.append((name, check_case(*build(np.random.default_rng(seed)))))
    for kind in ("fullft", "adapter", "lora", "bias", "vpt", "linear"):
        for seed in range(2):
            errors.append((f"vit-{kind}", vit_case(np.random.default_rng(100 + seed), kind)))
    worst = max(errors, key=lambda e: e[1])
    elapsed = time.perf_counter() - t0
    assert len(errors) >= 100, len(errors)
    assert worst[1] < 1e-4, f"{worst[0]} relative error {worst[1]:.3g}"
    assert elapsed < 120, f"{elapsed:.0f}s"
    return f"{len(errors)} instances, worst {worst[1]:.2e} ({worst[0]})"


def _digit_classifier():
    ds = load_digits()
    train_set, val, test = split(ds, SplitSpec(train_per_class=60, val_per_class=10), RngStream(0))
    model = build_tiny_vit(ViTConfig(image_size=8, patch_size=4, depth=1, width=32, heads=2, mlp_ratio=2,
                                     num_classes=10), np.random.default_rng(0))
    train(model, train_set, val, TrainConfig(epochs=5, optim=OptimizerConfig(base_lr=0.01, batch_size=32),
                                             eval_attack=None), RngStream(0))
    return model, test


@criterion(2, "attack soundness")
def test_criterion_02_attack_soundness():
    t0 = time.perf_counter()
    model, test = _digit_classifier()
    x0, y = test.images[:1000], test.labels[:1000]
    assert len(x0) == 1000
    robust = []
    for k in (0, 2, 4, 8):
        cfg = replace(eval_attack(), epsilon=k / 255)
        res = pgd_linf(model, x0, y, cfg)
        dist = np.abs(res.x_adv.astype(np.float64) - x0.astype(np.float64)).max()
        assert dist <= float(np.float32(k / 255)), f"eps {k}/255: |delta| {dist}"
        assert res.x_adv.min() >= 0.0 and res.x_adv.max() <= 1.0
        ev = evaluate(model, x0, y, cfg)
        assert ev.adv_loss >= ev.clean_loss, f"eps {k}/255: adversarial loss below clean"
        robust.append(ev.robust_acc)
    assert all(a >= b for a, b in zip(robust, robust[1:])), robust
    elapsed = time.perf_counter() - t0
    assert elapsed < 300, f"{elapsed:.0f}s"
    return "robust acc over eps {0,2,4,8}/255: " + ", ".join(f"{r:.3f}" for r in robust)


@criterion(3, "closed-form attack oracle")
def test_criterion_03_closed_form_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        model = Logistic(rng.normal(size=(2, 16)), rng.normal(size=2))
        x0 = rng.choice([0.0, 0.02, 0.5, 0.98, 1.0, rng.uniform()], size=(16, 1, 4, 4)).astype(np.float32)
        y = rng.integers(0, 2, size=16)
        eps = 8 / 255
        res = pgd_linf(model, x0, y, AttackConfig("pgd", eps, 2 / 255, 20, random_start=False))
        worst = max(worst, float(np.abs(res.delta - box_optimal_delta(model, x0, y, eps)).max()))
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-5, worst
    assert elapsed < 1.0, f"{elapsed:.2f}s"
    return f"max coordinate error {worst:.2e}"


@criterion(4, "RoLI function preservation")
def test_criterion_04_roli_step_zero():
    t0 = time.perf_counter()
    cfg = small_experiment()
    rng = RngStream(0)
    data = prepare_data(cfg, rng)
    backbone, _ = pretrain(cfg, data.source, rng)
    probe, _ = linear_probe(backbone, data.target, cfg, rng, adversarial=True)
    x = np.random.default_rng(1).uniform(size=(100, 1, 8, 8)).astype(np.float32)
    report = []
    for kind in ("adapter", "lora", "bias", "fullft"):
        model = attach(backbone.clone(), Strategy(kind), HeadInit("roli", source=probe),
                       np.random.default_rng(2), data.target.train.num_classes)
        d32 = float(np.abs(logits_of(model, x) - logits_of(probe, x)).max())
        with T.precision(np.float64):
            hi = logits_of(model.astype(np.float64), x.astype(np.float64))
            ref = logits_of(probe.astype(np.float64), x.astype(np.float64))
        assert np.array_equal(hi, ref), f"{kind}: 64-bit logits differ by {np.abs(hi - ref).max():.3g}"
        assert d32 <= 1e-6, f"{kind}: 32-bit diff {d32:.3g}"
        report.append(f"{kind} {d32:.0e}")
    elapsed = time.perf_counter() - t0
    assert elapsed < 60, f"{elapsed:.0f}s"
    return "64-bit identical; 32-bit max diff " + ", ".join(report)


@criterion(5, "transferred metric exactness")
def test_criterion_05_transferred_metrics():
    t0 = time.perf_counter()
    cases = [(transferred_accuracy, 81.79, 77.35, 0.0574), (transferred_accuracy, 54.47, 49.13, 0.1087),
             (transferred_robustness, 84.16, 93.02, -0.09525), (transferred_robustness, 37.30, 59.12, -0.3691)]
    got = [fn(a, b) for fn, a, b, _ in cases]
    for (_, a, b, want), g in zip(cases, got):
        assert abs(g - want) <= 1e-4, f"({a}, {b}) -> {g:.6f}, want {want}"
    assert time.perf_counter() - t0 < 1.0
    return ", ".join(f"{g:.5f}" for g in got)


@functools.lru_cache(maxsize=None)
def _transfer(seed: int):
    """Data and both pretrained arms for one seed of the desk-scale task."""
    cfg = ExperimentConfig(seed=seed)
    rng = RngStream(seed)
    data = prepare_data(cfg, rng)
    arms = {arm: pretrain(cfg, data.source, rng, arm)[0] for arm in ("standard", "robust")}
    return cfg, rng, data, arms


@criterion(6, "robust vs standard pretraining")
def test_criterion_06_robust_pretraining_transfers():
    t0 = time.perf_counter()
    gaps, rows = [], []
    for seed in SEEDS:
        cfg, rng, data, arms = _transfer(seed)
        rob = {arm: linear_probe(arms[arm], data.target, cfg, rng, adversarial=True)[1].test.robust_acc
               for arm in arms}
        gaps.append(100 * (rob["robust"] - rob["standard"]))
        rows.append(f"seed {seed}: {100 * rob['standard']:.1f} vs {100 * rob['robust']:.1f}")
    detail = "; ".join(rows) + f"; mean gap {np.mean(gaps):.2f} points"
    elapsed = time.perf_counter() - t0
    assert np.mean(gaps) >= 10.0, detail
    assert elapsed < 3600, f"{elapsed:.0f}s"
    return detail


@criterion(7, "RoLI vs RanLI with LoRA")
def test_criterion_07_roli_beats_ranli():
    t0 = time.perf_counter()
    diffs, rows = [], []
    for seed in SEEDS:
        cfg, rng, data, arms = _transfer(seed)
        strategy = Strategy("lora")
        _, ranli = finetune(arms["robust"], data.target, cfg, rng, HeadInit("ranli"), strategy=strategy)
        roli = roli_run(arms["robust"], data.target, cfg, rng, strategy)
        a, b = 100 * ranli.test.robust_acc, 100 * roli.finetune.test.robust_acc
        diffs.append(b - a)
        rows.append(f"seed {seed}: RanLI {a:.1f} RoLI {b:.1f}")
    detail = "; ".join(rows) + f"; mean diff {np.mean(diffs):+.2f} points"
    elapsed = time.perf_counter() - t0
    assert min(diffs) >= -0.5, detail
    assert np.mean(diffs) > 0, detail
    assert elapsed < 5400, f"{elapsed:.0f}s"
    return detail


@criterion(8, "correlation machinery")
def test_criterion_08_correlation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    ft = [tuple(rng.uniform(0.3, 0.9, size=2)) for _ in range(5)]
    lp = [tuple(rng.uniform(0.3, 0.9, size=2)) for _ in range(6)]
    res = pairwise_transfer_metrics(ft, lp)
    assert len(res.points) == 30
    x = rng.normal(size=50)
    r_line = pearson(x, 2.5 * x - 1.0)
    assert abs(r_line - 1.0) <= 1e-10, r_line
    px, py = (np.array(v) for v in zip(*res.points))
    r = pearson(px, py)
    for a, b in ((3.0, -2.0), (1e-3, 5.0), (250.0, 0.0)):
        assert abs(pearson(a * px + b, py) - r) <= 1e-10
        assert abs(pearson(px, a * py + b) - r) <= 1e-10
    assert time.perf_counter() - t0 < 1.0
    return f"30 points, line r = {r_line:.12f}, affine-invariant r = {r:.6f}"


@criterion(9, "determinism and persistence")
def test_criterion_09_determinism(tmp_path):
    t0 = time.perf_counter()
    cfg = small_experiment()
    ini = tmp_path / "c.ini"
    ini.write_text(config_to_ini(cfg))
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["finetune", "--config", str(ini), "--strategy", "lora", "--init", "roli",
                     "--out", str(out)]) == 0
    files = sorted(p.name for p in outs[0].iterdir())
    assert files == sorted(p.name for p in outs[1].iterdir())
    assert any(f.endswith(".ckpt") for f in files) and "metrics.csv" in files
    for name in files:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    store = load_checkpoint(outs[0] / "finetune-lora-roli.ckpt")
    model = Model(replace(cfg.model, num_classes=5), store)
    model.strategy = cfg.strategy
    path = tmp_path / "again.ckpt"
    from rfl.data_io import save_checkpoint
    save_checkpoint(model, path)
    again = Model(model.config, load_checkpoint(path))
    again.strategy = cfg.strategy
    x = np.random.default_rng(0).uniform(size=(32, 1, 8, 8)).astype(np.float32)
    assert np.array_equal(logits_of(model, x), logits_of(again, x))
    elapsed = time.perf_counter() - t0
    assert elapsed < 600, f"{elapsed:.0f}s"
    return f"{len(files)} files bitwise identical across runs; logits preserved"


@criterion(10, "frozen-parameter immutability")
def test_criterion_10_frozen_parameters():
    t0 = time.perf_counter()
    cfg = small_experiment()
    rng = RngStream(0)
    data = prepare_data(cfg, rng)
    backbone, _ = pretrain(cfg, data.source, rng)
    reference = backbone.params.state()
    checked = 0
    for kind in ("fullft", "adapter", "lora", "bias", "vpt", "linear"):
        model, _ = finetune(backbone, data.target, cfg, rng, HeadInit("ranli"), strategy=Strategy(kind))
        for name in model.params.frozen_names():
            if name in reference:
                assert np.array_equal(model.params[name].data, reference[name]), f"{kind}: {name} moved"
                checked += 1
        if kind != "fullft":
            assert model.params.frozen_names(), kind
    assert all(np.array_equal(backbone.params[n].data, v) for n, v in reference.items())
    counts = {}
    for kind in ("fullft", "adapter", "lora", "bias", "vpt", "linear"):
        m = attach(build_tiny_vit(ViTConfig(), np.random.default_rng(0)), Strategy(kind),
                   rng=np.random.default_rng(1))
        counts[kind] = count_params(m, trainable_only=True)
    order = list(counts)
    assert all(counts[a] > counts[b] for a, b in zip(order, order[1:])), counts
    elapsed = time.perf_counter() - t0
    assert elapsed < 600, f"{elapsed:.0f}s"
    return f"{checked} frozen tensors unchanged; counts " + " > ".join(f"{k} {v}" for k, v in counts.items())


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
