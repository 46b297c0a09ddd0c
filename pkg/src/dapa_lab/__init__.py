"""Domain-adaptive pose augmentation at desk scale.

A procedural articulated body, a VAE pose prior, an iterative body
regressor and the training loop that adapts it to a shifted target domain
by decoding outward-perturbed latents of its own predictions.
"""
from .augment import AugmentConfig, dapa_augment, perturb_latent
from .body import build_template, default_tree, forward_kinematics, lbs, rodrigues
from .checkpoint import Checkpoint, load_checkpoint, load_prior, save_checkpoint, save_prior
from .datagen import DomainSpec, default_specs, load_dataset, sample_domain, save_dataset
from .estimators import DAPAAdapter, MeshRegressor
from .metrics import EvalReport, mpjpe, normalized_metrics, pa_mpjpe, pck, procrustes_align
from .objective import LossWeights, loss_real, loss_syn, total_loss
from .prior import PosePrior, train_prior
from .trainer import TrainConfig, adapt, evaluate, pretrain

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "Checkpoint", "DAPAAdapter", "DomainSpec", "EvalReport", "LossWeights", "MeshRegressor",
    "PosePrior", "TrainConfig", "adapt", "build_template", "dapa_augment", "default_specs", "default_tree",
    "evaluate", "forward_kinematics", "lbs", "load_checkpoint", "load_dataset", "load_prior", "loss_real",
    "loss_syn", "mpjpe", "normalized_metrics", "pa_mpjpe", "pck", "perturb_latent", "pretrain",
    "procrustes_align", "rodrigues", "sample_domain", "save_checkpoint", "save_dataset", "save_prior",
    "total_loss", "train_prior",
]
