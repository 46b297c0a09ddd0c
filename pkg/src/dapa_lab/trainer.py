"""Pretraining on the source domain, adaptation on the target, evaluation.

All randomness is derived from ``(seed, purpose, step[, sample index])``, so a
run resumed from a checkpoint at step k continues exactly as the
uninterrupted run would. Adaptation only ever receives target observations
and 2D keypoints as arrays; it has no handle on any other target label.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .augment import AugmentConfig, dapa_augment, make_synthetic_batch
from .autodiff import AdamState, NonFiniteGradientError, Tape, adam_step, backward
from .body import KinematicTree, MeshTemplate, lbs, forward_kinematics
from .datagen import Dataset
from .metrics import EvalReport, evaluate_arrays
from .objective import LossWeights, loss_syn, total_loss
from .prior import PriorParams, encode
from .regressor import RegressorParams, body_outputs, predict_bodies, regress

log = logging.getLogger(__name__)

ADAPT_MODES = ("ft2d", "dapa", "zero_perturb", "random_pose", "real_only", "syn_only")
_AUGMENT_MODE = {"dapa": "dapa", "syn_only": "dapa", "zero_perturb": "zero_perturb",
                 "random_pose": "random_pose"}
LOG_COLUMNS = ("step", "loss_total", "loss_real", "loss_syn_2d", "loss_syn_3d", "loss_syn_theta",
               "loss_syn_beta", "mean_latent_norm", "eval_mpjpe")

# stream tags for np.random.default_rng([seed, tag, ...])
_BATCH, _AUGMENT = 101, 202


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, msg: str):
        self.step = step
        super().__init__(f"step {step}: {msg}")


@dataclass
class TrainConfig:
    phase: str = "adapt"
    mode: str = "dapa"
    steps: int = 1000
    batch_size: int = 32
    learning_rate: float = 3e-4
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval_interval: int = 0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.phase not in ("pretrain", "adapt"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.phase == "adapt" and self.mode not in ADAPT_MODES:
            raise ValueError(f"adapt mode must be one of {ADAPT_MODES}, got {self.mode!r}")
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("steps must be >= 0, batch size and learning rate positive")
        if self.phase == "adapt" and self.mode in _AUGMENT_MODE:
            amode = _AUGMENT_MODE[self.mode]
            self.augment = replace(self.augment, mode=amode, s=0.0 if amode == "zero_perturb" else self.augment.s)

    @property
    def uses_real(self) -> bool:
        return self.mode != "syn_only"

    @property
    def uses_syn(self) -> bool:
        return self.mode in _AUGMENT_MODE

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    """Mutable state of one training run; everything needed to resume."""

    params: RegressorParams
    opt: AdamState
    step: int = 0
    history: list = field(default_factory=list)


def new_state(params: RegressorParams, cfg: TrainConfig) -> TrainState:
    return TrainState(params, AdamState.for_params(params.parameters(), lr=cfg.learning_rate))


def _apply(state: TrainState, tape: Tape, loss, step: int):
    if not np.isfinite(loss.item()):
        raise TrainingDivergedError(step, "loss is not finite")
    params = state.params.parameters()
    grads = backward(tape, loss, params)
    for p in params:
        p.grad = None
    try:
        adam_step(state.opt, params, grads)
    except NonFiniteGradientError as exc:
        raise TrainingDivergedError(step, str(exc)) from exc


def source_targets(tree: KinematicTree, params: dict) -> dict:
    """Ground-truth 2D/3D joints and rotations implied by source parameters."""
    return body_outputs(tree, params["pose"], params["orient"], params["beta"], params["cam"])


def pretrain(state: TrainState, tree: KinematicTree, obs: np.ndarray, params: dict, cfg: TrainConfig,
             until: int | None = None) -> TrainState:
    """Fully supervised training on source observations and parameters."""
    targets = source_targets(tree, params)
    n = len(obs)
    stop = cfg.steps if until is None else min(until, cfg.steps)
    while state.step < stop:
        step = state.step
        rng = np.random.default_rng([cfg.seed, _BATCH, step])
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        with Tape() as tape:
            out = regress(state.params, tree, obs[idx])
            pred = body_outputs(tree, out.pose, out.orient, out.beta, out.cam)
            per, terms = loss_syn(pred, {k: v[idx] for k, v in targets.items()}, cfg.weights)
            loss = per.mean()
        _apply(state, tape, loss, step)
        row = {"step": step, "loss_total": loss.item(), "loss_real": 0.0}
        row.update({f"loss_{k}": float(np.mean(v.data)) for k, v in terms.items()})
        state.history.append(row)
        state.step += 1
    return state


def adapt(state: TrainState, tree: KinematicTree, prior: PriorParams | None, obs: np.ndarray,
          keypoints: np.ndarray, cfg: TrainConfig, until: int | None = None,
          eval_fn: Callable[[RegressorParams], float] | None = None,
          template: MeshTemplate | None = None, modality: str = "keypoints2d",
          provenance_sink: Callable[[int, list], None] | None = None) -> TrainState:
    """Weakly supervised adaptation on target observations and their 2D keypoints.

    Each step regresses a real batch; augmenting modes turn every (detached)
    prediction into one synthetic sample, so real and synthetic batches have
    equal size.
    """
    if cfg.uses_syn and prior is None:
        raise ValueError(f"mode {cfg.mode} needs a pose prior")
    n = len(obs)
    stop = cfg.steps if until is None else min(until, cfg.steps)
    while state.step < stop:
        step = state.step
        rng = np.random.default_rng([cfg.seed, _BATCH, step])
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        with Tape() as tape:
            out = regress(state.params, tree, obs[idx])
            pose_reg = out.pose.data.copy()
            real = syn = None
            if cfg.uses_real:
                j2d = body_outputs(tree, out.pose, out.orient, out.beta, out.cam)["joints2d"]
                real = {"joints2d": j2d, "keypoints": keypoints[idx]}
            if cfg.uses_syn:
                rngs = [np.random.default_rng([cfg.seed, _AUGMENT, step, int(i)]) for i in idx]
                pose_syn, prov = dapa_augment(prior, pose_reg, cfg.augment, rngs, ids=[int(i) for i in idx])
                context = {"beta": out.beta.data.copy(), "cam": out.cam.data.copy(),
                           "orient": out.orient.data.copy()}
                beta_override = None
                if cfg.augment.sample_beta:
                    brng = np.random.default_rng([cfg.seed, _AUGMENT, step, -1])
                    beta_override = cfg.augment.beta_std * brng.standard_normal(context["beta"].shape)
                batch = make_synthetic_batch(tree, pose_syn, context, modality, template, prov, beta_override,
                                             cfg.augment.render_noise, rngs)
                out_s = regress(state.params, tree, batch.observation)
                pred_s = body_outputs(tree, out_s.pose, out_s.orient, out_s.beta, out_s.cam)
                syn = (pred_s, batch.targets())
                if provenance_sink is not None:
                    provenance_sink(step, [p.as_record() for p in prov])
            report = total_loss(real, syn, cfg.weights)
        _apply(state, tape, report.total, step)
        terms = report.terms
        row = {"step": step, "loss_total": report.total.item(), "loss_real": terms.get("real_2d", 0.0),
               "loss_syn_2d": terms.get("syn_2d", 0.0), "loss_syn_3d": terms.get("syn_3d", 0.0),
               "loss_syn_theta": terms.get("syn_theta", 0.0), "loss_syn_beta": terms.get("syn_beta", 0.0),
               "n_real": report.n_real, "n_syn": report.n_syn}
        if prior is not None:
            row["mean_latent_norm"] = float(np.linalg.norm(encode(prior, pose_reg).mu, axis=-1).mean())
        if eval_fn is not None and cfg.eval_interval and (step + 1) % cfg.eval_interval == 0:
            row["eval_mpjpe"] = eval_fn(state.params)
        state.history.append(row)
        state.step += 1
    return state


def evaluate(params: RegressorParams, tree: KinematicTree, dataset: Dataset,
             template: MeshTemplate | None = None, alphas=(0.2,), batch: int = 512) -> EvalReport:
    """Metrics of the regressor on a dataset with evaluation labels."""
    preds = predict_dataset(params, tree, dataset.observations(), batch)
    gt3d = dataset.eval_array("joints3d")
    gt2d = dataset.eval_array("joints2d")
    pred_v = gt_v = None
    if template is not None:
        pred_v = lbs(template, forward_kinematics(tree, preds["pose"], preds["orient"], preds["beta"]))
        gt_state = forward_kinematics(tree, dataset.eval_array("pose"), dataset.eval_array("orient"),
                                      dataset.eval_array("beta"))
        gt_v = lbs(template, gt_state)
    return evaluate_arrays(preds["joints3d"], gt3d, pred_v, gt_v, preds["joints2d"], gt2d, alphas)


def predict_dataset(params: RegressorParams, tree: KinematicTree, obs: np.ndarray, batch: int = 512) -> dict:
    chunks = [predict_bodies(params, tree, obs[i:i + batch]) for i in range(0, len(obs), batch)]
    if not chunks:
        return {}
    return {k: np.concatenate([c[k] for c in chunks]) for k in chunks[0]}


def write_log_csv(path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(LOG_COLUMNS), extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k, "") for k in LOG_COLUMNS})
