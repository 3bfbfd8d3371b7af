"""Command-line surface for the two-stage pipeline.

Subcommands: pretrain, distill, slf, aff, sweep, ablate, export-emb,
report. Every command takes a JSON run-config file; the DEACL_OUT env
var overrides the configured output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from . import evaluate, models, pipeline
from .distill import train_stage2
from .evaluate import slf as slf_protocol
from .models import Encoder, Projector
from .pretrain import train_stage1

ABLATION_AXES = {
    "weight_decay": lambda rc, v: setattr(rc.stage2, "weight_decay", float(v)),
    "trade_off": lambda rc, v: setattr(rc.stage2, "trade_off", float(v)),
    "augment_adv": lambda rc, v: setattr(rc.stage2, "augment_adv", v),
    "projector": lambda rc, v: setattr(rc.stage2, "projector_enabled", v in ("on", "true", "1")),
    "collapse_prevention": lambda rc, v: setattr(rc.stage2, "collapse_prevention", v in ("on", "true", "1")),
    "student_init": lambda rc, v: setattr(rc.stage2, "student_init", v),
}


def _out_dir(run_cfg, override=None):
    return override or os.environ.get("DEACL_OUT") or run_cfg.out_dir


def _load(args):
    rc = pipeline.load_run_config(args.config)
    if getattr(args, "out", None):
        rc.out_dir = args.out
    rc.out_dir = _out_dir(rc)
    return rc


def _load_encoder(ckpt_path, run_cfg):
    rc = run_cfg.resolved()
    streams = cfgmod.SeedStreams(0)
    enc = Encoder(rc.stage1.encoder, streams.rng("load"))
    try:
        models.load_model_checkpoint(ckpt_path, {"encoder": enc})
    except models.CheckpointError:
        proj = Projector(rc.stage1.projector, rc.stage1.encoder.rep_dim, streams.rng("load-proj"))
        models.load_model_checkpoint(ckpt_path, {"encoder": enc, "projector": proj})
    return enc


def cmd_pretrain(args):
    rc = _load(args)
    resolved = rc.resolved()
    if args.dry_run:
        print(json.dumps(cfgmod.config_to_dict(resolved), indent=2, sort_keys=True))
        return 0
    os.makedirs(rc.out_dir, exist_ok=True)
    train_ds, _ = pipeline.resolve_dataset(resolved.dataset)
    train_stage1(train_ds, resolved.stage1,
                 checkpoint_path=os.path.join(rc.out_dir, "stage1.ckpt"),
                 log_path=os.path.join(rc.out_dir, "stage1_loss.csv"))
    print(f"stage-1 checkpoint written to {rc.out_dir}/stage1.ckpt")
    return 0


def cmd_distill(args):
    rc = _load(args)
    resolved = rc.resolved()
    os.makedirs(rc.out_dir, exist_ok=True)
    teacher = _load_encoder(args.teacher or os.path.join(rc.out_dir, "stage1.ckpt"), rc)
    train_ds, _ = pipeline.resolve_dataset(resolved.dataset)
    train_stage2(train_ds, teacher, resolved.stage2,
                 checkpoint_path=os.path.join(rc.out_dir, "stage2.ckpt"),
                 log_path=os.path.join(rc.out_dir, "stage2_loss.csv"))
    print(f"stage-2 checkpoint written to {rc.out_dir}/stage2.ckpt")
    return 0


def cmd_slf(args):
    rc = _load(args)
    resolved = rc.resolved()
    os.makedirs(rc.out_dir, exist_ok=True)
    enc = _load_encoder(args.checkpoint or os.path.join(rc.out_dir, "stage2.ckpt"), rc)
    train_ds, test_ds = pipeline.resolve_dataset(resolved.dataset)
    _, record = slf_protocol(enc, train_ds, test_ds, resolved.eval,
                             run_id=rc.run_id(), seed=rc.master_seed)
    evaluate.write_metrics_csv(os.path.join(rc.out_dir, "metrics.csv"), [record],
                               config_hash=rc.hash())
    print(f"SLF SA={record.sa:.2f} RA={record.ra:.2f}")
    return 0


def cmd_aff(args):
    rc = _load(args)
    resolved = rc.resolved()
    os.makedirs(rc.out_dir, exist_ok=True)
    enc = _load_encoder(args.checkpoint or os.path.join(rc.out_dir, "stage2.ckpt"), rc)
    train_ds, test_ds = pipeline.resolve_dataset(resolved.dataset)
    _, _, record, _ = evaluate.aff(enc, train_ds, test_ds, resolved.eval,
                                   run_id=rc.run_id(), seed=rc.master_seed)
    evaluate.write_metrics_csv(os.path.join(rc.out_dir, "metrics_aff.csv"), [record],
                               config_hash=rc.hash())
    print(f"AFF SA={record.sa:.2f} RA={record.ra:.2f}")
    return 0


def cmd_sweep(args):
    rc = _load(args)
    resolved = rc.resolved()
    os.makedirs(rc.out_dir, exist_ok=True)
    enc = _load_encoder(args.checkpoint or os.path.join(rc.out_dir, "stage2.ckpt"), rc)
    train_ds, test_ds = pipeline.resolve_dataset(resolved.dataset)
    classifier = evaluate.train_linear_probe(enc, train_ds, resolved.eval)
    forward = evaluate._composite_forward(enc, classifier)
    steps = [int(s) for s in args.steps.split(",")]
    eps = [cfgmod.parse_fraction(e) for e in args.eps.split(",")]
    rows = evaluate.sweep(forward, test_ds, steps, eps, seed=resolved.eval.seed)
    evaluate.write_sweep_csv(os.path.join(rc.out_dir, "sweep.csv"), rows)
    print(f"sweep written to {rc.out_dir}/sweep.csv ({len(rows)} rows)")
    return 0


def cmd_ablate(args):
    rc = _load(args)
    if args.axis not in ABLATION_AXES:
        print(f"unknown ablation axis {args.axis!r}; known: {sorted(ABLATION_AXES)}", file=sys.stderr)
        return 2
    values = args.values.split(",")
    records = []
    for v in values:
        import copy
        variant = copy.deepcopy(rc)
        ABLATION_AXES[args.axis](variant, v)
        variant.out_dir = os.path.join(rc.out_dir, f"{args.axis}={v}")
        result = pipeline.run_pipeline(variant)
        records.append((v, result["record"]))
        print(f"{args.axis}={v}: SA={result['record'].sa:.2f} RA={result['record'].ra:.2f}")
    with open(os.path.join(rc.out_dir, f"ablate_{args.axis}.csv"), "w") as f:
        f.write(f"{args.axis},SA,RA\n")
        for v, r in records:
            f.write(f"{v},{r.sa:.4f},{r.ra:.4f}\n")
    return 0


def cmd_export_emb(args):
    rc = _load(args)
    resolved = rc.resolved()
    os.makedirs(rc.out_dir, exist_ok=True)
    enc = _load_encoder(args.checkpoint or os.path.join(rc.out_dir, "stage2.ckpt"), rc)
    _, test_ds = pipeline.resolve_dataset(resolved.dataset)
    path = os.path.join(rc.out_dir, "embeddings.csv")
    evaluate.export_embeddings(enc, test_ds, path)
    print(f"embeddings written to {path}")
    return 0


def cmd_report(args):
    rows = []
    header = None
    hashes = set()
    for run_dir in args.runs:
        path = os.path.join(run_dir, "metrics.csv")
        if not os.path.exists(path):
            print(f"missing metrics.csv under {run_dir}", file=sys.stderr)
            return 2
        with open(path) as f:
            lines = f.read().splitlines()
        header = lines[0]
        for line in lines[1:]:
            rows.append(line)
            hashes.add(line.rsplit(",", 1)[-1])
    if len(hashes) > 1 and not args.force:
        print("refusing to aggregate runs with mismatched config hashes (use --force)", file=sys.stderr)
        return 2
    out = args.out or "report.csv"
    with open(out, "w") as f:
        f.write(header + "\n")
        for r in rows:
            f.write(r + "\n")
    print(f"aggregated {len(rows)} rows into {out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="deacl", description="two-stage adversarial contrastive pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument("--out", help="output directory override")
        if checkpoint:
            sp.add_argument("--checkpoint", help="encoder checkpoint path")

    sp = sub.add_parser("pretrain", help="stage 1: contrastive pretraining")
    common(sp)
    sp.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("distill", help="stage 2: adversarial distillation")
    common(sp)
    sp.add_argument("--teacher", help="stage-1 checkpoint path")
    sp.set_defaults(fn=cmd_distill)

    sp = sub.add_parser("slf", help="standard linear finetuning evaluation")
    common(sp, checkpoint=True)
    sp.set_defaults(fn=cmd_slf)

    sp = sub.add_parser("aff", help="adversarial full finetuning evaluation")
    common(sp, checkpoint=True)
    sp.set_defaults(fn=cmd_aff)

    sp = sub.add_parser("sweep", help="RA over attack steps and budgets")
    common(sp, checkpoint=True)
    sp.add_argument("--steps", default="1,5,10,20")
    sp.add_argument("--eps", default="0,2/255,4/255,8/255,16/255")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("ablate", help="grid over one stage-2 configuration axis")
    common(sp)
    sp.add_argument("--axis", required=True)
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("export-emb", help="export representation vectors to CSV")
    common(sp, checkpoint=True)
    sp.set_defaults(fn=cmd_export_emb)

    sp = sub.add_parser("report", help="aggregate metrics CSVs across runs")
    sp.add_argument("runs", nargs="+", help="run directories")
    sp.add_argument("--out", help="output CSV path")
    sp.add_argument("--force", action="store_true", help="allow mismatched config hashes")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (FileNotFoundError, ValueError, models.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
