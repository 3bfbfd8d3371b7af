"""Two-stage pipeline for self-supervised adversarial robustness:
contrastive pretraining of a teacher encoder, then pseudo-supervised
adversarial distillation of a student against its frozen representations."""

from .attack import AttackConfig, pgd
from .data import AugmentationPolicy, Dataset, gen_synthetic, load_cifar_binary
from .distill import PseudoTargetBank, Stage2Config, make_pseudo_targets, train_stage2
from .evaluate import EvalConfig, MetricsRecord, aff, measure, slf, sweep
from .models import Encoder, EncoderConfig, LinearClassifier, Projector, ProjectorConfig
from .pipeline import DatasetSpec, RunConfig, run_pipeline
from .pretrain import Stage1Config, train_stage1
from .tensor import Tensor, cosine_similarity, grad_check

__all__ = [
    "AttackConfig", "pgd", "AugmentationPolicy", "Dataset", "gen_synthetic",
    "load_cifar_binary", "PseudoTargetBank", "Stage2Config", "make_pseudo_targets",
    "train_stage2", "EvalConfig", "MetricsRecord", "aff", "measure", "slf", "sweep",
    "Encoder", "EncoderConfig", "LinearClassifier", "Projector", "ProjectorConfig",
    "DatasetSpec", "RunConfig", "run_pipeline", "Stage1Config", "train_stage1",
    "Tensor", "cosine_similarity", "grad_check",
]
