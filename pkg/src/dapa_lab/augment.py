"""Latent-space pose augmentation and synthetic sample packaging.

A predicted pose is embedded with the prior's encoder, a latent is drawn from
the posterior, every coordinate is scaled away from the origin by
``1 + s * eps`` with ``eps ~ U[0, 1]``, and the result is decoded. Since rare
poses sit further from the origin in the prior's latent space, this pushes
predictions toward less typical poses while the decoder keeps them plausible.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import paused
from .body import KinematicTree, MeshTemplate, forward_kinematics, lbs
from .camera import project
from .datagen import NoiseSpec, observation_vector, synthesize_observation
from .prior import PriorParams, decode, encode

MODES = ("dapa", "zero_perturb", "random_pose")


class AugmentationError(FloatingPointError):
    pass


@dataclass
class AugmentConfig:
    mode: str = "dapa"
    s: float = 0.5
    seed: int = 0
    use_posterior_mean: bool = False
    sample_beta: bool = False
    beta_std: float = 0.2
    render_noise: NoiseSpec | None = None

    def __post_init__(self):
        if isinstance(self.render_noise, dict):
            self.render_noise = NoiseSpec(**self.render_noise)
        if self.mode not in MODES:
            raise ValueError(f"augment mode must be one of {MODES}, got {self.mode!r}")
        if not (self.s >= 0):
            raise ValueError("noise scale s must be nonnegative")

    @property
    def effective_s(self) -> float:
        return 0.0 if self.mode == "zero_perturb" else self.s


def perturb_latent(z, s: float, rng: np.random.Generator | None = None, eps=None):
    """``z_tilde = z * (1 + s * eps)``, ``eps ~ U[0, 1]`` drawn per dimension."""
    if s < 0:
        raise ValueError("s must be nonnegative")
    z = np.asarray(z, dtype=np.float64)
    if eps is None:
        eps = rng.random(z.shape)
    eps = np.asarray(eps, dtype=np.float64)
    return z * (1.0 + s * eps), eps


@dataclass
class Provenance:
    source_id: object
    z: np.ndarray
    z_tilde: np.ndarray
    eps: np.ndarray
    mode: str

    def as_record(self) -> dict:
        return {"id": self.source_id, "z_norm": float(np.linalg.norm(self.z)),
                "z_tilde_norm": float(np.linalg.norm(self.z_tilde)), "mode": self.mode}


def _augment_one(prior: PriorParams, pose: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    d = prior.latent_dim
    if cfg.mode == "random_pose":
        z = rng.standard_normal(d)
        z_tilde, eps = z, np.zeros(d)
    else:
        post = encode(prior, pose)
        z = post.mu if cfg.use_posterior_mean else post.mu + np.exp(post.log_sigma) * rng.standard_normal(d)
        z_tilde, eps = perturb_latent(z, cfg.effective_s, rng)
    return decode(prior, z_tilde), z, z_tilde, eps


def dapa_augment(prior: PriorParams, pose_reg, cfg: AugmentConfig, rngs, ids=None):
    """Augment a batch of (detached) predicted poses ``(B, pose_dim)``.

    ``rngs`` holds one generator per row so results do not depend on batch
    composition. The prior is frozen, so nothing here is recorded on an
    active tape. Returns ``(pose_syn (B, pose_dim), [Provenance])``. A row
    whose intermediates go non-finite is redrawn once before raising.
    """
    pose_reg = np.atleast_2d(np.asarray(pose_reg, dtype=np.float64))
    if isinstance(rngs, np.random.Generator):
        rngs = [rngs] * len(pose_reg)
    ids = range(len(pose_reg)) if ids is None else ids
    out, prov = [], []
    for pose, rng, sid in zip(pose_reg, rngs, ids):
        for attempt in range(2):
            with paused():
                syn, z, z_tilde, eps = _augment_one(prior, pose, cfg, rng)
            if np.all(np.isfinite(syn)) and np.all(np.isfinite(z_tilde)):
                break
        else:
            raise AugmentationError(f"non-finite augmentation for sample {sid}")
        out.append(syn)
        prov.append(Provenance(sid, z, z_tilde, eps, cfg.mode))
    return np.array(out), prov


@dataclass
class SyntheticBatch:
    """Fully labeled synthetic samples; labels are recomputable from the stored parameters."""

    pose: np.ndarray
    orient: np.ndarray
    beta: np.ndarray
    cam: np.ndarray
    joints3d: np.ndarray
    joints2d: np.ndarray
    rotations: np.ndarray
    observation: np.ndarray
    provenance: list = field(default_factory=list)

    def __len__(self):
        return len(self.pose)

    def targets(self) -> dict:
        return {"joints3d": self.joints3d, "joints2d": self.joints2d,
                "rotations": self.rotations, "beta": self.beta}


def make_synthetic_batch(tree: KinematicTree, pose_syn, context: dict, modality: str = "keypoints2d",
                         template: MeshTemplate | None = None, provenance=None,
                         beta_override=None, noise: NoiseSpec | None = None, rngs=None) -> SyntheticBatch:
    """Render synthetic poses onto the predicted bodies and cameras.

    ``context`` carries the regressor's (detached) ``beta``, ``cam`` and
    ``orient``. The observation is exact: keypoints with confidence 1, or a
    silhouette rasterized from the posed mesh. With ``noise`` (and one
    generator per row in ``rngs``) keypoint observations are passed through
    the detection-noise model instead; labels stay exact.
    """
    pose_syn = np.atleast_2d(np.asarray(pose_syn, dtype=np.float64))
    beta = np.array(context["beta"] if beta_override is None else beta_override, dtype=np.float64)
    cam = np.array(context["cam"], dtype=np.float64)
    orient = np.array(context["orient"], dtype=np.float64)
    state = forward_kinematics(tree, pose_syn, orient, beta)
    joints2d = project(state.joints, cam)
    if noise is not None and modality != "silhouette":
        kp = np.stack([synthesize_observation(j, noise, r) for j, r in zip(joints2d, rngs)])
    else:
        kp = np.concatenate([joints2d, np.ones(joints2d.shape[:-1] + (1,))], axis=-1)
    if modality == "silhouette":
        verts2d = project(lbs(template, state), cam)
        obs = np.stack([observation_vector(modality, k, v, template) for k, v in zip(kp, verts2d)])
    else:
        obs = kp.reshape(len(kp), -1)
    return SyntheticBatch(pose_syn, orient, beta, cam, state.joints, joints2d, state.local_rotations,
                          obs, list(provenance or []))


def make_synthetic_example(tree: KinematicTree, pose_syn, context: dict, **kw) -> SyntheticBatch:
    """Single-sample form of :func:`make_synthetic_batch`."""
    ctx = {k: np.atleast_2d(v) for k, v in context.items()}
    return make_synthetic_batch(tree, np.atleast_2d(pose_syn), ctx, **kw)


def write_provenance(path, records) -> None:
    with open(path, "a") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
