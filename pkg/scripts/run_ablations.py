#!/usr/bin/env python3
"""Stage-2 configuration ablations over several seeds.

Trains one teacher per seed, then distills a student under each variant
and reports per-variant SLF robust accuracy plus the cross-seed median.
Variants: weight decay low/high, strong augmentation on the attacked
view, projector head on, collapse-prevention term on, random student
init (with a clean-term convergence-speed comparison against teacher
init).

Usage: python3 scripts/run_ablations.py [--seeds 1,2,3,4,5]
"""

import argparse
import copy
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from deacl import evaluate
from deacl.config import child_seed
from deacl.distill import train_stage2
from deacl.pipeline import resolve_dataset
from deacl.pretrain import train_stage1
from run_benchmark import benchmark_config

VARIANTS = {
    "default": {},
    "wd-low": {"weight_decay": 1e-6},
    "strong-on-AE": {"augment_adv": "strong"},
    "projector-on": {"projector_enabled": True},
    "collapse-on": {"collapse_prevention": True},
    "random-init": {"student_init": "random"},
}


def epochs_to_90pct(log):
    """Epochs until 90% of the total clean-term loss reduction is reached."""
    clean = [r["loss_clean_term"] for r in log]
    total = clean[0] - clean[-1]
    if total <= 0:
        return 0
    for i, v in enumerate(clean):
        if clean[0] - v >= 0.9 * total:
            return i
    return len(clean)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="1,2,3,4,5")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    base = benchmark_config()
    train_ds, test_ds = resolve_dataset(base.dataset)
    results = {name: [] for name in VARIANTS}
    convergence = {"teacher": [], "random": []}

    for seed in seeds:
        t0 = time.time()
        s1 = copy.deepcopy(base.stage1)
        s1.seed = child_seed(seed, "stage1")
        teacher, _, _ = train_stage1(train_ds, s1)
        ev = copy.deepcopy(base.eval)
        ev.seed = child_seed(seed, "eval")
        for name, overrides in VARIANTS.items():
            s2 = copy.deepcopy(base.stage2)
            s2.seed = child_seed(seed, "stage2")
            for k, v in overrides.items():
                setattr(s2, k, v)
            student, _, log = train_stage2(train_ds, teacher, s2)
            _, rec = evaluate.slf(student, train_ds, test_ds, ev)
            results[name].append(rec.ra)
            print(f"seed {seed} {name:14s} SA={rec.sa:5.1f} RA={rec.ra:5.1f}", flush=True)
            if name == "default":
                convergence["teacher"].append(epochs_to_90pct(log))
            elif name == "random-init":
                convergence["random"].append(epochs_to_90pct(log))
        print(f"seed {seed} done in {time.time() - t0:.0f}s", flush=True)

    print("\nmedian RA over seeds:")
    for name, ras in results.items():
        print(f"  {name:14s} {np.median(ras):5.1f}")
    print(f"epochs to 90% clean-term reduction: teacher-init "
          f"{np.median(convergence['teacher'])}, random-init {np.median(convergence['random'])}")


if __name__ == "__main__":
    main()
