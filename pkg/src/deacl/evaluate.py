"""Evaluation protocols for a pretrained encoder.

slf: train only a linear classifier on clean features of the frozen
encoder, then measure standard and robust accuracy. aff: adversarial
cross-entropy finetuning of encoder and classifier together. measure
runs clean and attacked accuracy; sweep grids it over attack steps and
budgets. The multi-restart PGD stand-in for AutoAttack is reported as
"AA-proxy" and never conflated with real AutoAttack numbers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import optim
from .attack import AttackConfig, pgd
from .config import SeedStreams
from .models import LinearClassifier, clone_module, params_frozen
from .tensor import Tensor, cross_entropy

AA_PROXY_ATTACK = AttackConfig(epsilon=8 / 255, alpha=2 / 255, steps=50, restarts=5,
                               random_start=True, objective="cross-entropy")


@dataclass
class EvalConfig:
    epochs: int = 25
    lr: float = 0.5
    momentum: float = 0.9
    batch_size: int = 64
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(
        epsilon=8 / 255, alpha=2 / 255, steps=20, random_start=True, objective="cross-entropy"))
    aa_proxy: bool = False
    seed: int = 0


@dataclass
class MetricsRecord:
    run_id: str
    protocol: str                 # SLF | AFF
    sa: float
    ra: float
    aa_proxy: float = float("nan")
    eps: float = 8 / 255
    steps: int = 20
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        for v in (self.sa, self.ra):
            if not 0 <= v <= 100:
                raise ValueError("accuracies are percentages in [0,100]")


def _composite_forward(encoder, classifier, projto=None):
    def forward(x, mode="eval"):
        return classifier.forward(encoder.forward(x, mode=mode))
    return forward


def measure(forward_fn, test_ds, attack_cfg, rng, batch_size=64):
    """Standard and robust accuracy plus per-sample correctness bitmaps."""
    labels = test_ds.labels
    clean_ok = np.zeros(len(test_ds), dtype=bool)
    adv_ok = np.zeros(len(test_ds), dtype=bool)
    for start in range(0, len(test_ds), batch_size):
        sl = slice(start, start + batch_size)
        x = test_ds.images[sl]
        y = labels[sl]
        logits = forward_fn(Tensor(x), mode="eval").data
        clean_ok[sl] = logits.argmax(axis=1) == y
        if attack_cfg.epsilon == 0 or attack_cfg.steps == 0:
            adv_ok[sl] = clean_ok[sl]
            continue
        x_adv = pgd(lambda t: forward_fn(t, mode="eval"), x, {"labels": y}, attack_cfg, rng=rng)
        if np.max(np.abs(x_adv - x)) > attack_cfg.epsilon + 1e-6:
            raise RuntimeError("attack violated its perturbation budget")
        adv_logits = forward_fn(Tensor(x_adv), mode="eval").data
        adv_ok[sl] = adv_logits.argmax(axis=1) == y
    sa = 100.0 * clean_ok.mean() if len(test_ds) else 0.0
    ra = 100.0 * adv_ok.mean() if len(test_ds) else 0.0
    return float(sa), float(ra), clean_ok, adv_ok


def train_linear_probe(encoder, train_ds, cfg: EvalConfig, streams=None):
    """Fit a linear classifier on frozen clean features (the SLF inner loop)."""
    streams = streams or SeedStreams(cfg.seed)
    labels = train_ds.labels
    num_classes = int(labels.max()) + 1
    with params_frozen(encoder):
        feats = []
        for start in range(0, len(train_ds), cfg.batch_size):
            feats.append(encoder.forward(train_ds.images[start : start + cfg.batch_size], mode="eval").data.copy())
    feats = np.concatenate(feats, axis=0)
    classifier = LinearClassifier(feats.shape[1], num_classes, streams.rng("slf", "init"))
    opt = optim.SGD(classifier.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    for epoch in range(cfg.epochs):
        opt.lr = optim.cosine_lr(cfg.lr, epoch, cfg.epochs)
        order = streams.rng("slf", "order", epoch).permutation(len(feats))
        for start in range(0, len(feats), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = cross_entropy(classifier.forward(Tensor(feats[idx])), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return classifier


def slf(encoder, train_ds, test_ds, cfg: EvalConfig, run_id="run", seed=0):
    """Standard linear finetuning: encoder frozen, classifier trained on CEs."""
    streams = SeedStreams(cfg.seed)
    hash_before = encoder.param_hash()
    classifier = train_linear_probe(encoder, train_ds, cfg, streams)
    if encoder.param_hash() != hash_before:
        raise RuntimeError("encoder changed during standard linear finetuning")
    forward = _composite_forward(encoder, classifier)
    sa, ra, _, _ = measure(forward, test_ds, cfg.attack, streams.rng("slf", "eval-attack"))
    aa = float("nan")
    if cfg.aa_proxy:
        proxy = AttackConfig(epsilon=cfg.attack.epsilon, alpha=AA_PROXY_ATTACK.alpha,
                             steps=AA_PROXY_ATTACK.steps, restarts=AA_PROXY_ATTACK.restarts,
                             random_start=True, objective="cross-entropy")
        _, aa, _, _ = measure(forward, test_ds, proxy, streams.rng("slf", "aa-proxy"))
    record = MetricsRecord(run_id=run_id, protocol="SLF", sa=sa, ra=ra, aa_proxy=aa,
                           eps=cfg.attack.epsilon, steps=cfg.attack.steps,
                           restarts=cfg.attack.restarts, seed=seed)
    return classifier, record


def aff(encoder, train_ds, test_ds, cfg: EvalConfig, train_attack=None, run_id="run",
        seed=0, probe_attack=None, probe_every=1):
    """Adversarial full finetuning; optionally records a probe-RA history.

    Returns (encoder, classifier, record, history) where history holds
    one (epoch, probe_ra) pair per probed epoch.
    """
    streams = SeedStreams(cfg.seed)
    train_attack = train_attack or AttackConfig(epsilon=8 / 255, alpha=2 / 255, steps=5,
                                                random_start=True, objective="cross-entropy")
    labels = train_ds.labels
    num_classes = int(labels.max()) + 1
    encoder = clone_module(encoder)
    classifier = LinearClassifier(encoder.config.rep_dim, num_classes, streams.rng("aff", "init"))
    opt = optim.SGD(encoder.parameters() + classifier.parameters(),
                    lr=cfg.lr, momentum=cfg.momentum, weight_decay=5e-4)
    forward = _composite_forward(encoder, classifier)
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = optim.cosine_lr(cfg.lr, epoch, cfg.epochs)
        order = streams.rng("aff", "order", epoch).permutation(len(train_ds))
        for start in range(0, len(train_ds), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = train_ds.images[idx], labels[idx]
            if train_attack.epsilon > 0 and train_attack.steps > 0:
                def attack_forward(t):
                    with params_frozen(encoder, classifier):
                        return forward(t, mode="attack")
                x = pgd(attack_forward, x, {"labels": y}, train_attack,
                        rng=streams.rng("aff", "attack", epoch, start))
            loss = cross_entropy(forward(Tensor(x), mode="train"), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
        if probe_attack is not None and (epoch + 1) % probe_every == 0:
            _, probe_ra, _, _ = measure(forward, test_ds, probe_attack,
                                        streams.rng("aff", "probe", epoch))
            history.append((epoch, probe_ra))
    sa, ra, _, _ = measure(forward, test_ds, cfg.attack, streams.rng("aff", "eval-attack"))
    record = MetricsRecord(run_id=run_id, protocol="AFF", sa=sa, ra=ra,
                           eps=cfg.attack.epsilon, steps=cfg.attack.steps,
                           restarts=cfg.attack.restarts, seed=seed)
    return encoder, classifier, record, history


def sweep(forward_fn, test_ds, steps_list, eps_list, alpha=2 / 255, seed=0):
    """RA over a (steps, eps) grid; the eps=0 entries equal SA by definition."""
    streams = SeedStreams(seed)
    rows = []
    for steps in steps_list:
        for eps in eps_list:
            cfg = AttackConfig(epsilon=eps, alpha=alpha, steps=steps,
                               random_start=eps > 0, objective="cross-entropy")
            _, ra, _, _ = measure(forward_fn, test_ds, cfg,
                                  streams.rng("sweep", steps, f"{eps:.8f}"))
            rows.append({"steps": steps, "eps": eps, "ra": ra})
    return rows


def write_sweep_csv(path, rows):
    with open(path, "w") as f:
        f.write("steps,eps,RA\n")
        for r in rows:
            f.write(f"{r['steps']},{r['eps']:.8f},{r['ra']:.4f}\n")


def export_embeddings(encoder, dataset, path, batch_size=64):
    """CSV of sample index, label and representation vector per sample."""
    d = encoder.config.rep_dim
    with params_frozen(encoder):
        with open(path, "w") as f:
            f.write("index,label," + ",".join(f"e{i}" for i in range(d)) + "\n")
            for start in range(0, len(dataset), batch_size):
                sl = slice(start, start + batch_size)
                reps = encoder.forward(dataset.images[sl], mode="eval").data
                for idx, label, vec in zip(dataset.indices[sl], dataset.label_array[sl], reps):
                    f.write(f"{idx},{label}," + ",".join(f"{v:.6f}" for v in vec) + "\n")


def write_metrics_csv(path, records, config_hash=""):
    """Deterministic metrics table; wall-clock lives in the timing CSV."""
    with open(path, "w") as f:
        f.write("run_id,protocol,SA,RA,AA_proxy,eps,steps,restarts,seed,config_hash\n")
        for r in records:
            aa = "" if np.isnan(r.aa_proxy) else f"{r.aa_proxy:.4f}"
            f.write(f"{r.run_id},{r.protocol},{r.sa:.4f},{r.ra:.4f},{aa},"
                    f"{r.eps:.8f},{r.steps},{r.restarts},{r.seed},{config_hash}\n")
