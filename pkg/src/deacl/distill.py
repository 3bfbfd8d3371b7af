"""Stage 2: pseudo-supervised adversarial training against frozen teacher
targets. The teacher is loaded from the stage-1 checkpoint and never
updated; per step the student sees a weakly augmented view, the attack
pushes its features away from the teacher's target vector, and the
trades-like loss pulls clean features to the target and adversarial
features back to the clean ones."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses, models, optim
from .attack import AttackConfig, pgd
from .config import SeedStreams
from .data import AugmentationPolicy, augment_batch
from .models import Encoder, Projector, ProjectorConfig, clone_module, params_frozen
from .tensor import NonFiniteError, Tensor


@dataclass
class PseudoTargetBank:
    vectors: np.ndarray          # [N,d], row i belongs to sample index i
    teacher_hash: str
    mode: str = "precomputed"    # precomputed | on-the-fly

    def lookup(self, sample_indices):
        sample_indices = np.asarray(sample_indices)
        if sample_indices.max() >= len(self.vectors):
            raise KeyError("sample index missing from pseudo-target bank")
        return self.vectors[sample_indices]

    def bank_hash(self):
        return hashlib.sha256(np.ascontiguousarray(self.vectors, dtype=np.float64).tobytes()).hexdigest()


@dataclass
class Stage2Config:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.05
    weight_decay: float = 5e-4
    momentum: float = 0.9
    warmup_epochs: int = 0
    trade_off: float = 2.0
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(
        epsilon=8 / 255, alpha=2 / 255, steps=5, objective="cosine-to-target"))
    augment_clean: str = "weak"
    augment_adv: str = "same"        # "same" shares the clean view; else a policy kind
    projector_enabled: bool = False
    collapse_prevention: bool = False
    collapse_weight: float = 3.0
    collapse_tau: float = 0.2
    student_init: str = "teacher"    # teacher | random
    distance: str = "cosine"         # cosine | kl (ablation)
    loss_form: str = "trades-like"   # trades-like | direct (ablation)
    target_mode: str = "on-the-fly"  # on-the-fly | precomputed
    seed: int = 0

    def __post_init__(self):
        if self.trade_off < 0:
            raise ValueError("trade-off weight must be >= 0")
        if self.student_init not in ("teacher", "random"):
            raise ValueError(f"unknown student_init {self.student_init!r}")
        if self.distance not in ("cosine", "kl"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.loss_form not in ("trades-like", "direct"):
            raise ValueError(f"unknown loss_form {self.loss_form!r}")
        if self.target_mode not in ("on-the-fly", "precomputed"):
            raise ValueError(f"unknown target_mode {self.target_mode!r}")


def make_pseudo_targets(teacher, dataset, augmentation="none", batch_size=64, rng=None):
    """Frozen-teacher representation per sample index, eval mode throughout."""
    if augmentation not in ("none", "weak"):
        raise ValueError("target augmentation must be 'none' or 'weak'")
    imgs = dataset.images
    if augmentation == "weak":
        if rng is None:
            raise ValueError("weak target augmentation needs an rng")
        policy = AugmentationPolicy(kind="weak")
        imgs = augment_batch(policy, imgs, [rng for _ in range(len(imgs))])
    reps = []
    with params_frozen(teacher):
        for start in range(0, len(imgs), batch_size):
            reps.append(teacher.forward(imgs[start : start + batch_size], mode="eval").data.copy())
    vectors = np.concatenate(reps, axis=0) if reps else np.zeros((0, teacher.config.rep_dim))
    if np.any(~np.isfinite(vectors)):
        raise NonFiniteError("non-finite pseudo-target")
    if np.any(np.linalg.norm(vectors, axis=1) == 0):
        raise ValueError("zero-norm pseudo-target representation")
    full = np.empty((int(dataset.indices.max()) + 1, vectors.shape[1]), dtype=vectors.dtype)
    full[dataset.indices] = vectors
    return PseudoTargetBank(vectors=full, teacher_hash=teacher.param_hash())


def train_stage2(dataset, teacher, cfg: Stage2Config, checkpoint_path=None, log_path=None):
    """Adversarial distillation; returns (student, projector-or-None, log rows).

    Log rows: epoch, loss_clean_term, loss_adv_term, wall_seconds, plus
    accumulated attack_seconds / update_seconds for timing reports.
    """
    ds = dataset.without_labels()
    streams = SeedStreams(cfg.seed)
    teacher_hash_before = teacher.param_hash()

    if cfg.student_init == "teacher":
        student = clone_module(teacher)
    else:
        student = Encoder(teacher.config, streams.rng("stage2", "init", "student"))
    projector = None
    if cfg.projector_enabled:
        pcfg = ProjectorConfig(hidden=2 * teacher.config.rep_dim,
                               out_dim=teacher.config.rep_dim, enabled=True)
        projector = Projector(pcfg, teacher.config.rep_dim, streams.rng("stage2", "init", "projector"))

    bank = None
    if cfg.target_mode == "precomputed":
        bank = make_pseudo_targets(teacher, ds)

    trainable = student.parameters() + (projector.parameters() if projector else [])
    opt = optim.SGD(trainable, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    clean_policy = AugmentationPolicy(kind=cfg.augment_clean)
    adv_policy = None if cfg.augment_adv == "same" else AugmentationPolicy(kind=cfg.augment_adv)

    def student_features(x_tensor, mode):
        out = student.forward(x_tensor, mode=mode)
        if projector is not None:
            out = projector.forward(out)
        return out

    log_rows = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        attack_seconds = 0.0
        opt.lr = optim.cosine_lr(cfg.lr, epoch, cfg.epochs, cfg.warmup_epochs)
        order = streams.rng("stage2", "order", epoch).permutation(len(ds))
        clean_terms, adv_terms = [], []
        for start in range(0, len(ds), cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            batch = ds.images[batch_idx]
            rngs = [streams.rng("stage2", "augment", epoch, int(i), 0) for i in batch_idx]
            x_clean = augment_batch(clean_policy, batch, rngs)
            if adv_policy is None:
                x_attack = x_clean
            else:
                adv_rngs = [streams.rng("stage2", "augment", epoch, int(i), 1) for i in batch_idx]
                x_attack = augment_batch(adv_policy, batch, adv_rngs)

            if bank is not None:
                targets = bank.lookup(ds.indices[batch_idx])
            else:
                with params_frozen(teacher):
                    targets = teacher.forward(x_clean, mode="eval").data.copy()

            ta = time.perf_counter()
            def attack_forward(t):
                with params_frozen(student, *( [projector] if projector else [] )):
                    return student_features(t, mode="attack")
            x_adv = pgd(attack_forward, x_attack, {"targets": targets}, cfg.attack,
                        rng=streams.rng("stage2", "attack", epoch, start))
            attack_seconds += time.perf_counter() - ta

            clean_out = student_features(Tensor(x_clean), mode="train")
            adv_out = student_features(Tensor(x_adv), mode="train")
            loss, clean_term, adv_term = _stage2_loss(cfg, clean_out, adv_out, targets)
            if not np.isfinite(loss.data):
                raise NonFiniteError(f"stage-2 loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            clean_terms.append(clean_term)
            adv_terms.append(adv_term)

        wall = time.perf_counter() - t0
        log_rows.append({
            "epoch": epoch,
            "loss_clean_term": float(np.mean(clean_terms)),
            "loss_adv_term": float(np.mean(adv_terms)),
            "wall_seconds": wall,
            "attack_seconds": attack_seconds,
            "update_seconds": wall - attack_seconds,
        })

    if teacher.param_hash() != teacher_hash_before:
        raise RuntimeError("teacher parameters changed during stage 2")
    if bank is not None and bank.teacher_hash != teacher_hash_before:
        raise RuntimeError("pseudo-target bank does not match the teacher")

    if checkpoint_path is not None:
        mods = {"encoder": student}
        if projector is not None:
            mods["projector"] = projector
        models.save_model_checkpoint(checkpoint_path, mods,
                                     metadata={"stage": 2, "seed": cfg.seed, "epochs": cfg.epochs,
                                               "rep_dim": teacher.config.rep_dim})
    if log_path is not None:
        write_stage2_log(log_path, log_rows)
    return student, projector, log_rows


def _stage2_loss(cfg, clean_out, adv_out, targets):
    if cfg.distance == "kl":
        targets_t = Tensor(np.asarray(targets))
        clean_term = losses.kl_distance_loss(clean_out, targets_t)
        adv_term = losses.kl_distance_loss(adv_out, clean_out)
        loss = clean_term + cfg.trade_off * adv_term
        clean_v, adv_v = float(clean_term.data), float(adv_term.data)
    elif cfg.loss_form == "direct":
        loss = losses.distill_loss_direct(adv_out, targets)
        clean_v, adv_v = 0.0, float(loss.data)
    else:
        loss, clean_term, adv_term = losses.distill_loss(clean_out, adv_out, targets, cfg.trade_off)
        clean_v, adv_v = float(clean_term.data), float(adv_term.data)
    if cfg.collapse_prevention:
        loss = loss + cfg.collapse_weight * losses.collapse_repulsion(clean_out, cfg.collapse_tau)
    return loss, clean_v, adv_v


def write_stage2_log(path, rows):
    with open(path, "w") as f:
        f.write("epoch,loss_clean_term,loss_adv_term,wall_seconds\n")
        for r in rows:
            f.write(f"{r['epoch']},{r['loss_clean_term']:.6f},{r['loss_adv_term']:.6f},{r['wall_seconds']:.3f}\n")
