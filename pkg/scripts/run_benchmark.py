#!/usr/bin/env python3
"""Run the full two-stage pipeline on the synthetic benchmark for one or
more seeds and print SA/RA of the distilled student under SLF.

Usage: python3 scripts/run_benchmark.py [--seeds 1,2,3] [--out runs/benchmark]
"""

import argparse
import copy
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from deacl.attack import AttackConfig
from deacl.distill import Stage2Config
from deacl.evaluate import EvalConfig
from deacl.models import EncoderConfig, ProjectorConfig
from deacl.pipeline import DatasetSpec, RunConfig, run_pipeline
from deacl.pretrain import Stage1Config


def benchmark_config(master_seed=1, out_dir="runs/benchmark"):
    """Desk-scale configuration: trains in a couple of minutes on a CPU."""
    return RunConfig(
        dataset=DatasetSpec(n_per_class=40, n_per_class_test=25, num_classes=4),
        stage1=Stage1Config(
            epochs=40, batch_size=32, lr=0.05, warmup_epochs=3,
            encoder=EncoderConfig(in_shape=(1, 16, 16), widths=(8, 16, 16, 32), rep_dim=32),
            projector=ProjectorConfig(hidden=64, out_dim=32)),
        stage2=Stage2Config(
            epochs=30, batch_size=32, lr=0.1,
            attack=AttackConfig(epsilon=8 / 255, alpha=2 / 255, steps=5,
                                objective="cosine-to-target")),
        eval=EvalConfig(epochs=25, lr=0.5),
        master_seed=master_seed,
        out_dir=out_dir,
    )


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="1", help="comma-separated master seeds")
    ap.add_argument("--out", default="runs/benchmark")
    args = ap.parse_args()

    for seed in (int(s) for s in args.seeds.split(",")):
        rc = copy.deepcopy(benchmark_config(master_seed=seed,
                                            out_dir=os.path.join(args.out, f"seed{seed}")))
        t0 = time.time()
        result = run_pipeline(rc)
        rec = result["record"]
        print(f"seed {seed}: run_id={result['run_id']} "
              f"SA={rec.sa:.2f} RA={rec.ra:.2f} ({time.time() - t0:.0f}s)")


if __name__ == "__main__":
    main()
