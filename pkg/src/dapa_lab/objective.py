"""Adaptation loss: a 2D reprojection term on real samples plus full
parameter/keypoint supervision on synthetic ones.

Every term is a mean of squared errors. The pose term compares rotation
matrices, so two axis-angle vectors describing the same rotation cost nothing.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor


@dataclass(frozen=True)
class LossWeights:
    w_2d: float = 5.0
    w_3d: float = 5.0
    w_pose: float = 1.0
    w_beta: float = 0.001
    confidence_weighting: bool = True

    def __post_init__(self):
        if min(self.w_2d, self.w_3d, self.w_pose, self.w_beta) < 0:
            raise ValueError("loss weights must be nonnegative")


def loss_real(j_reg, j_gt, conf, weight: float = 5.0, confidence_weighting: bool = True):
    """Per-sample ``weight * sum_i c_i |J_reg,i - J_gt,i|^2 / sum_i c_i``.

    Batched over leading axes; samples whose confidences are all zero get 0.
    """
    j_reg = as_tensor(j_reg)
    j_gt = np.asarray(j_gt, dtype=np.float64)
    conf = np.asarray(conf, dtype=np.float64)
    if not confidence_weighting:
        conf = (conf > 0).astype(np.float64)
    if j_reg.shape != j_gt.shape or conf.shape != j_gt.shape[:-1]:
        raise ValueError(f"shape mismatch: pred {j_reg.shape}, gt {j_gt.shape}, conf {conf.shape}")
    total = conf.sum(axis=-1)
    norm = np.where(total > 0, 1.0 / np.where(total > 0, total, 1.0), 0.0)
    sq = (j_reg - j_gt).square().sum(axis=-1)
    return (sq * conf).sum(axis=-1) * (norm * weight)


def _mse(pred, target, axes):
    return (as_tensor(pred) - np.asarray(target, dtype=np.float64)).square().mean(axis=axes)


def rotation_distance(rot_pred, rot_target):
    """Mean over joints of squared Frobenius distance; inputs ``(..., J, 3, 3)``."""
    return _mse(rot_pred, rot_target, (-3, -2, -1)) * 9.0


def loss_syn(pred: dict, target: dict, w: LossWeights = LossWeights()):
    """Per-sample synthetic loss and its unweighted terms.

    ``pred``/``target`` carry ``joints2d (..., K, 2)``, ``joints3d (..., K, 3)``,
    ``rotations (..., J, 3, 3)`` (local joint rotations) and ``beta (..., 10)``.
    3D joints are compared after moving both pelvises to the origin.
    """
    x_pred = as_tensor(pred["joints3d"])
    x_pred = x_pred - x_pred[..., 0:1, :]
    x_tgt = np.asarray(target["joints3d"])
    x_tgt = x_tgt - x_tgt[..., 0:1, :]
    terms = {
        "syn_2d": _mse(pred["joints2d"], target["joints2d"], (-2, -1)),
        "syn_3d": _mse(x_pred, x_tgt, (-2, -1)),
        "syn_theta": rotation_distance(pred["rotations"], target["rotations"]),
        "syn_beta": _mse(pred["beta"], target["beta"], -1),
    }
    total = (terms["syn_2d"] * w.w_2d + terms["syn_3d"] * w.w_3d
             + terms["syn_theta"] * w.w_pose + terms["syn_beta"] * w.w_beta)
    return total, terms


@dataclass
class LossReport:
    total: Tensor
    terms: dict = field(default_factory=dict)
    n_real: int = 0
    n_syn: int = 0

    def as_row(self) -> dict:
        row = {"loss_total": self.total.item() if isinstance(self.total, Tensor) else float(self.total)}
        for key in ("real_2d", "syn_2d", "syn_3d", "syn_theta", "syn_beta"):
            row[key] = self.terms.get(key, 0.0)
        row["n_real"], row["n_syn"] = self.n_real, self.n_syn
        return row


def _batch_mean(per_sample, valid=None):
    per_sample = as_tensor(per_sample)
    if valid is None:
        return per_sample.mean() if per_sample.size else Tensor(0.0)
    n = int(np.sum(valid))
    return (per_sample * valid.astype(np.float64)).sum() * (1.0 / n) if n else Tensor(0.0)


def total_loss(real: dict | None, syn: tuple | None, w: LossWeights = LossWeights()) -> LossReport:
    """Batch-mean real loss plus batch-mean synthetic loss; either may be absent.

    ``real`` holds ``joints2d`` predictions and ``keypoints (B, K, 3)``;
    ``syn`` is a ``(pred, target)`` pair for :func:`loss_syn`.
    """
    total = Tensor(0.0)
    terms = {}
    n_real = n_syn = 0
    if real is not None and len(real["keypoints"]):
        kp = np.asarray(real["keypoints"])
        per = loss_real(real["joints2d"], kp[..., :2], kp[..., 2], w.w_2d, w.confidence_weighting)
        valid = kp[..., 2].sum(axis=-1) > 0
        real_mean = _batch_mean(per, valid)
        total = total + real_mean
        terms["real_2d"] = float(real_mean.data)
        n_real = len(kp)
    if syn is not None and len(syn[1]["beta"]):
        per, parts = loss_syn(syn[0], syn[1], w)
        total = total + _batch_mean(per)
        terms.update({k: float(np.mean(v.data)) for k, v in parts.items()})
        n_syn = len(syn[1]["beta"])
    return LossReport(total, terms, n_real, n_syn)
