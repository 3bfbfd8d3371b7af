#!/usr/bin/env python3
"""Robust-accuracy sweep over attack steps and budgets for a trained run.

Expects a pipeline output directory (see run_benchmark.py) containing
stage2.ckpt; writes sweep.csv next to it.

Usage: python3 scripts/run_sweep.py RUN_DIR [--steps 1,5,10,20] [--eps 0,2/255,4/255,8/255,16/255]
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from deacl import evaluate, models
from deacl.config import parse_fraction
from deacl.models import Encoder
from deacl.pipeline import resolve_dataset
from run_benchmark import benchmark_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("run_dir")
    ap.add_argument("--steps", default="1,5,10,20")
    ap.add_argument("--eps", default="0,2/255,4/255,8/255,16/255")
    args = ap.parse_args()

    base = benchmark_config()
    enc = Encoder(base.stage1.encoder, np.random.default_rng(0))
    models.load_model_checkpoint(os.path.join(args.run_dir, "stage2.ckpt"), {"encoder": enc})
    train_ds, test_ds = resolve_dataset(base.dataset)
    classifier = evaluate.train_linear_probe(enc, train_ds, base.eval)

    def forward(x, mode="eval"):
        return classifier.forward(enc.forward(x, mode=mode))

    steps = [int(s) for s in args.steps.split(",")]
    eps = [parse_fraction(e) for e in args.eps.split(",")]
    rows = evaluate.sweep(forward, test_ds, steps, eps)
    out = os.path.join(args.run_dir, "sweep.csv")
    evaluate.write_sweep_csv(out, rows)
    for r in rows:
        print(f"steps={r['steps']:3d} eps={r['eps']:.6f} RA={r['ra']:.2f}")
    print(f"written to {out}")


if __name__ == "__main__":
    main()
