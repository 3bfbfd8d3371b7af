"""l-inf projected gradient descent with pluggable objectives.

One objective per use site: feature-space cosine to a frozen target
(stage-2 training), cosine to the clean features, or label cross-entropy
(evaluation and adversarial finetuning). The update is the standard
signed-gradient ascent with projection onto the epsilon ball intersected
with [0,1]; restarts keep the per-sample best by objective value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

OBJECTIVES = ("cosine-to-target", "cosine-to-clean", "cross-entropy")


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 5
    restarts: int = 1
    random_start: bool = False
    objective: str = "cosine-to-target"

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0,1]")
        if self.alpha < 0 or self.steps < 0 or self.restarts < 1:
            raise ValueError("invalid attack configuration")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")


def objective_value(objective, model_out, context):
    """Per-sample objective ([B] Tensor) that PGD ascends."""
    if objective == "cosine-to-target":
        targets = context.get("targets")
        if targets is None:
            raise ValueError("cosine-to-target needs context['targets']")
        return -T.cosine_rows(model_out, Tensor(np.asarray(targets)))
    if objective == "cosine-to-clean":
        clean = context.get("clean_features")
        if clean is None:
            raise ValueError("cosine-to-clean needs context['clean_features']")
        return -T.cosine_rows(model_out, Tensor(np.asarray(clean)))
    if objective == "cross-entropy":
        labels = context.get("labels")
        if labels is None:
            raise ValueError("cross-entropy needs context['labels']")
        return T.cross_entropy_per_sample(model_out, labels)
    raise ValueError(f"unknown objective {objective!r}")


def pgd(forward_fn, x, context, cfg, rng=None):
    """Craft adversarial examples for a [B,...] batch in [0,1].

    forward_fn maps an input Tensor to features or logits; it must not
    update model parameters or normalization statistics (callers pass a
    frozen, attack-mode forward).
    """
    x = np.asarray(x)
    if x.size and (x.min() < -1e-6 or x.max() > 1 + 1e-6):
        raise ValueError("attack input must lie in [0,1]")
    if cfg.epsilon == 0.0:
        return x.copy()
    if cfg.random_start and rng is None:
        raise ValueError("random_start needs an rng")

    b = x.shape[0]
    best_obj = np.full(b, -np.inf)
    best_adv = x.copy()
    for _ in range(cfg.restarts):
        if cfg.random_start:
            delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(x.dtype)
            delta = np.clip(x + delta, 0.0, 1.0) - x
        else:
            delta = np.zeros_like(x)
        for _ in range(cfg.steps):
            xa = Tensor(np.clip(x + delta, 0.0, 1.0), requires_grad=True)
            obj = T.tsum(objective_value(cfg.objective, forward_fn(xa), context))
            obj.backward()
            if xa.grad is None or not np.all(np.isfinite(xa.grad)):
                raise T.NonFiniteError("non-finite attack gradient")
            delta = np.clip(delta + cfg.alpha * np.sign(xa.grad), -cfg.epsilon, cfg.epsilon)
            delta = np.clip(x + delta, 0.0, 1.0) - x
        adv = np.clip(x + delta, 0.0, 1.0)
        final = objective_value(cfg.objective, forward_fn(Tensor(adv)), context).data
        improved = final > best_obj
        best_obj = np.where(improved, final, best_obj)
        best_adv[improved] = adv[improved]
    return best_adv.astype(x.dtype)
