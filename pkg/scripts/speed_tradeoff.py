"""Wall-clock and robustness of RanLI, RegLI, StdLI and RoLI initialisation."""

import argparse

from rfl.peft import Strategy
from rfl.pipeline import ExperimentConfig, prepare_data, pretrain, speed_report
from rfl.tensor import RngStream


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--strategy", default="lora")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = ExperimentConfig(seed=args.seed, strategy=Strategy(args.strategy))
    rng = RngStream(args.seed)
    data = prepare_data(cfg, rng)
    backbone, _ = pretrain(cfg, data.source, rng, "robust")
    print("scheme  seconds  init_s  clean  robust")
    for r in speed_report(backbone, data.target, cfg, rng):
        print(f"{r.scheme:6s} {r.seconds:8.1f} {r.init_seconds:7.1f} {r.clean_acc:.3f} {r.robust_acc:.3f}")


if __name__ == "__main__":
    main()
