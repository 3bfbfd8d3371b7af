"""Stage 1: non-robust contrastive pretraining of the teacher encoder."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses, models, optim
from .config import SeedStreams
from .data import AugmentationPolicy, make_views
from .models import Encoder, EncoderConfig, Projector, ProjectorConfig
from .tensor import NonFiniteError


@dataclass
class Stage1Config:
    epochs: int = 100
    batch_size: int = 32
    temperature: float = 0.5
    lr: float = 0.05
    weight_decay: float = 1e-5
    momentum: float = 0.9
    warmup_epochs: int = 10
    augmentation: str = "strong"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("contrastive batches need at least 2 samples")


def iterate_batches(n, batch_size, order):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_stage1(dataset, cfg: Stage1Config, checkpoint_path=None, log_path=None):
    """Contrastive pretraining; returns (encoder, projector, log rows).

    The log rows are dicts: epoch, mean_loss, lr, wall_seconds.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    ds = dataset.without_labels()
    streams = SeedStreams(cfg.seed)
    encoder = Encoder(cfg.encoder, streams.rng("stage1", "init", "encoder"))
    projector = Projector(cfg.projector, cfg.encoder.rep_dim, streams.rng("stage1", "init", "projector"))
    policy = AugmentationPolicy(kind=cfg.augmentation)
    opt = optim.SGD(encoder.parameters() + projector.parameters(),
                    lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    log_rows = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        opt.lr = optim.cosine_lr(cfg.lr, epoch, cfg.epochs, min(cfg.warmup_epochs, cfg.epochs // 2))
        order = streams.rng("stage1", "order", epoch).permutation(len(ds))
        epoch_losses = []
        for batch_idx in iterate_batches(len(ds), cfg.batch_size, order):
            if len(batch_idx) < 2:
                continue
            batch = ds.images[batch_idx]
            rngs = _per_sample_factory(streams, "stage1", epoch, batch_idx)
            view_a, view_b = make_views(policy, batch, rngs)
            z_a = projector.forward(encoder.forward(view_a, mode="train"))
            z_b = projector.forward(encoder.forward(view_b, mode="train"))
            loss = losses.info_nce(z_a, z_b, cfg.temperature)
            if not np.isfinite(loss.data):
                raise NonFiniteError(f"stage-1 loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.data))
        log_rows.append({
            "epoch": epoch,
            "mean_loss": float(np.mean(epoch_losses)),
            "lr": float(opt.lr),
            "wall_seconds": time.perf_counter() - t0,
        })

    if checkpoint_path is not None:
        models.save_model_checkpoint(
            checkpoint_path,
            {"encoder": encoder, "projector": projector},
            metadata={"stage": 1, "seed": cfg.seed, "epochs": cfg.epochs,
                      "rep_dim": cfg.encoder.rep_dim})
    if log_path is not None:
        write_loss_log(log_path, log_rows)
    return encoder, projector, log_rows


def _per_sample_factory(streams, stage, epoch, batch_idx):
    """Substreams keyed by the sample's permanent index, not batch position."""
    def factory(pos, view):
        return streams.rng(stage, "augment", epoch, int(batch_idx[pos]), view)
    return factory


def write_loss_log(path, rows):
    with open(path, "w") as f:
        f.write("epoch,mean_loss,lr,wall_seconds\n")
        for r in rows:
            f.write(f"{r['epoch']},{r['mean_loss']:.6f},{r['lr']:.6f},{r['wall_seconds']:.3f}\n")
