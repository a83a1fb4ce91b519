"""Adversarial linear probes on top of a standard and a robust backbone.

Pretrains both arms on digits 0-4, probes digits 5-9 with PGD-7 training and
reports PGD-10 robust accuracy per seed plus the mean gap.
"""

import argparse

import numpy as np

from rfl.pipeline import ExperimentConfig, linear_probe, prepare_data, pretrain
from rfl.tensor import RngStream


def run(seed: int) -> dict[str, float]:
    cfg = ExperimentConfig(seed=seed)
    rng = RngStream(seed)
    data = prepare_data(cfg, rng)
    out = {}
    for arm in ("standard", "robust"):
        backbone, _ = pretrain(cfg, data.source, rng, arm)
        _, rec = linear_probe(backbone, data.target, cfg, rng, adversarial=True)
        out[arm] = rec.test.robust_acc
        print(f"seed {seed} {arm:8s} clean {rec.test.clean_acc:.3f} robust {rec.test.robust_acc:.3f}", flush=True)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    gaps = []
    for s in args.seeds:
        r = run(s)
        gaps.append(100 * (r["robust"] - r["standard"]))
    print(f"mean gap {np.mean(gaps):.2f} points over seeds {args.seeds}")


if __name__ == "__main__":
    main()
