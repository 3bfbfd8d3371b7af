"""Training objectives: contrastive pretraining loss, distillation losses
and the ablation variants (direct form, KL distance, collapse repulsion)."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def info_nce(z_a, z_b, tau):
    """Symmetrized in-batch contrastive loss over two views.

    For each anchor the positive is the same sample's other view; the
    negatives are both views of every other sample in the batch. B=1
    (no negatives) gives exactly 0.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z_a = z_a if isinstance(z_a, Tensor) else Tensor(z_a)
    z_b = z_b if isinstance(z_b, Tensor) else Tensor(z_b)
    if z_a.data.shape != z_b.data.shape or z_a.data.ndim != 2:
        raise T.ShapeError("info_nce expects matching [B,p] tensors")
    b = z_a.data.shape[0]
    za = T.normalize_rows(z_a)
    zb = T.normalize_rows(z_b)
    eye = Tensor(np.eye(b))
    offdiag = Tensor(1.0 - np.eye(b))

    def one_direction(anchors, positives, same_view):
        s_pos = T.matmul(anchors, T.transpose(positives))     # [B,B]; diag holds positives
        s_same = T.matmul(anchors, T.transpose(same_view))    # [B,B]; diag is self-similarity
        pos = T.tsum(mul_scaled(s_pos, eye, tau), axis=1)
        denom = T.tsum(T.texp(scale(s_pos, tau)), axis=1) + \
            T.tsum(T.mul(T.texp(scale(s_same, tau)), offdiag), axis=1)
        return T.tmean(T.tlog(denom) - pos)

    return 0.5 * (one_direction(za, zb, za) + one_direction(zb, za, zb))


def scale(t, tau):
    return T.mul(t, Tensor(1.0 / tau))


def mul_scaled(t, mask, tau):
    return T.mul(scale(t, tau), mask)


def distill_loss(student_clean, student_adv, targets, lam):
    """Trades-like stage-2 loss: pull clean features to the frozen targets
    and adversarial features to the clean ones; minimum is -(1+lam)."""
    if lam < 0:
        raise ValueError("trade-off weight must be >= 0")
    targets = targets if isinstance(targets, Tensor) else Tensor(np.asarray(targets))
    clean_term = -T.tmean(T.cosine_rows(student_clean, targets))
    adv_term = -T.tmean(T.cosine_rows(student_adv, student_clean))
    return clean_term + lam * adv_term, clean_term, adv_term


def distill_loss_direct(student_adv, targets):
    """Ablation: pull adversarial features straight to the frozen targets."""
    targets = targets if isinstance(targets, Tensor) else Tensor(np.asarray(targets))
    return -T.tmean(T.cosine_rows(student_adv, targets))


def kl_distance_loss(student_out, reference, temperature=1.0):
    """Ablation distance: KL(softmax(reference/T) || softmax(student/T))."""
    student_out = student_out if isinstance(student_out, Tensor) else Tensor(student_out)
    reference = reference if isinstance(reference, Tensor) else Tensor(np.asarray(reference))
    inv_t = Tensor(1.0 / temperature)
    p_log = T.log_softmax(T.mul(reference, inv_t), axis=1)
    q_log = T.log_softmax(T.mul(student_out, inv_t), axis=1)
    p = T.texp(p_log)
    return T.tmean(T.tsum(T.mul(p, p_log - q_log), axis=1))


def collapse_repulsion(student_clean, tau=0.5):
    """Contrastive negative-pressure term over the stage-2 batch.

    mean_i log sum_{j != i} exp(cos(c_i, c_j) / tau); zero for B <= 1.
    """
    student_clean = student_clean if isinstance(student_clean, Tensor) else Tensor(student_clean)
    b = student_clean.data.shape[0]
    if b <= 1:
        return Tensor(0.0)
    c = T.normalize_rows(student_clean)
    sims = T.matmul(c, T.transpose(c))
    offdiag = Tensor(1.0 - np.eye(b))
    return T.tmean(T.tlog(T.tsum(T.mul(T.texp(scale(sims, tau)), offdiag), axis=1)))
