"""Desk-scale transferred accuracy vs transferred robustness.

Runs standard and adversarial full finetuning and linear probing over a
small learning-rate sweep, writes every test result to a metrics CSV and
hands it to ``rfl analyze`` for the pairwise points, Pearson r and SVG.
"""

import argparse
from pathlib import Path

from rfl import cli
from rfl.peft import HeadInit, Strategy
from rfl.pipeline import ExperimentConfig, MetricSink, finetune, linear_probe, prepare_data, pretrain
from rfl.tensor import RngStream


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/correlation")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ft-lrs", type=float, nargs="+", default=[0.005, 0.001, 0.0005, 0.0001, 0.002])
    ap.add_argument("--lp-lrs", type=float, nargs="+", default=[1.0, 0.5, 0.1, 0.05, 0.2, 0.02])
    ap.add_argument("--epochs", type=int, default=10)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv = out / "metrics.csv"
    cfg = ExperimentConfig(seed=args.seed)
    cfg.schedule.epochs = args.epochs
    rng = RngStream(args.seed)
    data = prepare_data(cfg, rng)
    backbone, _ = pretrain(cfg, data.source, rng, "robust")
    tag = cfg.pipeline.tag
    for lr in args.ft_lrs:
        for adv in (False, True):
            stage = f"finetune-{'adv' if adv else 'std'}"
            sink = MetricSink(csv, f"{tag}/lr{lr:g}/{stage}")
            finetune(backbone, data.target, cfg, rng.child(f"ft{lr}"), HeadInit("ranli"), adv,
                     Strategy("fullft"), base_lr=lr, sink=sink, stage=stage)
            print(f"{stage} lr {lr:g} done", flush=True)
    for lr in args.lp_lrs:
        for adv in (False, True):
            stage = f"probe-{'adv' if adv else 'std'}"
            sink = MetricSink(csv, f"{tag}/lr{lr:g}/{stage}")
            linear_probe(backbone, data.target, cfg, rng.child(f"lp{lr}"), adv, base_lr=lr, sink=sink,
                         stage=stage)
            print(f"{stage} lr {lr:g} done", flush=True)
    raise SystemExit(cli.main(["analyze", str(csv), "--out", str(out)]))


if __name__ == "__main__":
    main()
