"""Full-run orchestration: dataset resolution, both training stages,
linear finetuning and artifact emission (config copy, checkpoints,
metrics and timing CSVs). All artifacts embed the config hash; the run
id is derived from it, never from the clock."""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from . import data, evaluate, models
from .attack import AttackConfig
from .distill import Stage2Config, train_stage2
from .evaluate import EvalConfig
from .models import Encoder, EncoderConfig, Projector, ProjectorConfig
from .pretrain import Stage1Config, train_stage1


@dataclass
class DatasetSpec:
    source: str = "synthetic"        # synthetic | cifar
    path: str = ""                   # cifar binary file(s), train
    test_path: str = ""
    n_per_class: int = 40
    n_per_class_test: int = 20
    num_classes: int = 4
    channels: int = 1
    size: int = 16
    seed: int = 1234


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)
    master_seed: int = 0
    out_dir: str = "runs/out"

    def resolved(self):
        """Copy with the master seed pushed into every stage."""
        import copy
        out = copy.deepcopy(self)
        out.stage1.seed = cfgmod.child_seed(self.master_seed, "stage1")
        out.stage2.seed = cfgmod.child_seed(self.master_seed, "stage2")
        out.eval.seed = cfgmod.child_seed(self.master_seed, "eval")
        return out

    def hash(self):
        d = cfgmod.config_to_dict(self)
        d.pop("out_dir", None)  # output location is not part of run identity
        return cfgmod.config_hash(d)

    def run_id(self):
        return f"{self.hash()[:10]}-s{self.master_seed}"


def _coerce(cls, value):
    if isinstance(value, cls):
        return value
    kwargs = dict(value)
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for k in list(kwargs):
        if k not in hints:
            raise ValueError(f"unknown config field {k!r} for {cls.__name__}")
    for k in ("epsilon", "alpha"):
        if k in kwargs:
            kwargs[k] = cfgmod.parse_fraction(kwargs[k])
    return cls(**kwargs)


def run_config_from_dict(d):
    d = dict(d)
    rc = RunConfig()
    if "dataset" in d:
        rc.dataset = _coerce(DatasetSpec, d.pop("dataset"))
    for name, cls in (("stage1", Stage1Config), ("stage2", Stage2Config), ("eval", EvalConfig)):
        if name in d:
            sub = dict(d.pop(name))
            if "attack" in sub:
                sub["attack"] = _coerce(AttackConfig, sub["attack"])
            if "encoder" in sub:
                sub["encoder"] = _coerce(EncoderConfig, sub["encoder"])
            if "projector" in sub:
                sub["projector"] = _coerce(ProjectorConfig, sub["projector"])
            setattr(rc, name, _coerce(cls, sub))
    for k in ("master_seed", "out_dir"):
        if k in d:
            setattr(rc, k, d.pop(k))
    if d:
        raise ValueError(f"unknown config fields: {sorted(d)}")
    return rc


def load_run_config(path):
    with open(path) as f:
        return run_config_from_dict(json.load(f))


def resolve_dataset(spec: DatasetSpec):
    """Returns (train, test) datasets."""
    if spec.source == "synthetic":
        train = data.gen_synthetic(spec.n_per_class, spec.num_classes,
                                   seed=cfgmod.child_seed(spec.seed, "train"),
                                   channels=spec.channels, size=spec.size, split="train")
        test = data.gen_synthetic(spec.n_per_class_test, spec.num_classes,
                                  seed=cfgmod.child_seed(spec.seed, "test"),
                                  channels=spec.channels, size=spec.size, split="test")
        return train, test
    if spec.source == "cifar":
        return (data.load_cifar_binary(spec.path, split="train"),
                data.load_cifar_binary(spec.test_path, split="test"))
    raise ValueError(f"unknown dataset source {spec.source!r}")


def run_pipeline(run_cfg: RunConfig, out_dir=None):
    """Stage 1 -> stage 2 -> SLF on the student; writes all artifacts.

    Returns a dict with the trained modules, metrics records and timing.
    """
    rc = run_cfg.resolved()
    chash = run_cfg.hash()
    run_id = run_cfg.run_id()
    out = out_dir or run_cfg.out_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as f:
        json.dump(cfgmod.config_to_dict(run_cfg), f, indent=2, sort_keys=True)

    train_ds, test_ds = resolve_dataset(rc.dataset)

    t0 = time.perf_counter()
    teacher, projector, s1_log = train_stage1(
        train_ds, rc.stage1,
        checkpoint_path=os.path.join(out, "stage1.ckpt"),
        log_path=os.path.join(out, "stage1_loss.csv"))
    stage1_seconds = time.perf_counter() - t0

    t0 = time.perf_counter()
    student, _, s2_log = train_stage2(
        train_ds, teacher, rc.stage2,
        checkpoint_path=os.path.join(out, "stage2.ckpt"),
        log_path=os.path.join(out, "stage2_loss.csv"))
    stage2_seconds = time.perf_counter() - t0

    t0 = time.perf_counter()
    _, record = evaluate.slf(student, train_ds, test_ds, rc.eval, run_id=run_id,
                             seed=run_cfg.master_seed)
    finetune_seconds = time.perf_counter() - t0

    evaluate.write_metrics_csv(os.path.join(out, "metrics.csv"), [record], config_hash=chash)
    timing = {
        "stage1_seconds": stage1_seconds,
        "stage2_seconds": stage2_seconds,
        "finetune_seconds": finetune_seconds,
        "stage2_attack_seconds": float(sum(r["attack_seconds"] for r in s2_log)),
        "stage2_update_seconds": float(sum(r["update_seconds"] for r in s2_log)),
    }
    write_timing_csv(os.path.join(out, "timing.csv"), run_id, timing, config_hash=chash)
    return {
        "run_id": run_id,
        "config_hash": chash,
        "teacher": teacher,
        "student": student,
        "record": record,
        "stage1_log": s1_log,
        "stage2_log": s2_log,
        "timing": timing,
    }


def write_timing_csv(path, run_id, timing, config_hash=""):
    with open(path, "w") as f:
        f.write("run_id,phase,seconds,config_hash\n")
        for phase, seconds in timing.items():
            f.write(f"{run_id},{phase},{seconds:.3f},{config_hash}\n")
