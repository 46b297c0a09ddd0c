"""Body parameter regressor with iterative error feedback.

Starting from the mean parameter vector, a tanh MLP repeatedly reads
``[observation, current estimate]`` and predicts an additive correction.
The packed parameter vector is ``[pose 3(J-1) | orient 3 | beta 10 | cam 3]``
where the camera scale is stored pre-softplus.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import MLPParams, Tensor, as_tensor, concat, forward_mlp, init_mlp
from .body import N_BETAS, KinematicTree, forward_kinematics
from .camera import project


def param_dim(tree: KinematicTree) -> int:
    return tree.pose_dim + 3 + N_BETAS + 3


def _slices(tree: KinematicTree) -> dict:
    p = tree.pose_dim
    return {"pose": slice(0, p), "orient": slice(p, p + 3), "beta": slice(p + 3, p + 3 + N_BETAS),
            "cam": slice(p + 3 + N_BETAS, p + 6 + N_BETAS)}


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def pack_params(tree: KinematicTree, pose, orient, beta, cam) -> np.ndarray:
    """Pack ground-truth parameters (camera scale in natural units) into raw vectors."""
    cam = np.array(cam, dtype=np.float64, copy=True)
    cam[..., 0] = softplus_inv(cam[..., 0])
    return np.concatenate([np.asarray(pose), np.asarray(orient), np.asarray(beta), cam], axis=-1)


def unpack_params(tree: KinematicTree, raw) -> dict:
    """Split a raw vector (array or tensor) into pose/orient/beta/cam with positive scale."""
    sl = _slices(tree)
    tensor_in = isinstance(raw, Tensor)
    raw_t = as_tensor(raw)
    cam = raw_t[..., sl["cam"]]
    cam = concat([cam[..., 0:1].softplus(), cam[..., 1:3]], axis=-1)
    out = {"pose": raw_t[..., sl["pose"]], "orient": raw_t[..., sl["orient"]],
           "beta": raw_t[..., sl["beta"]], "cam": cam}
    return out if tensor_in else {k: v.data for k, v in out.items()}


@dataclass
class RegressorParams:
    mlp: MLPParams
    mean_params: np.ndarray
    n_iter: int = 3

    def __post_init__(self):
        if self.n_iter < 1:
            raise ValueError("need at least one refinement iteration")
        if self.mlp.out_dim != len(self.mean_params):
            raise ValueError("network output must match parameter dimension")

    @property
    def obs_dim(self) -> int:
        return self.mlp.in_dim - len(self.mean_params)

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()


@dataclass
class RegressorOutput:
    pose: Tensor
    orient: Tensor
    beta: Tensor
    cam: Tensor
    raw: Tensor
    trace: list


def init_mean_params(tree: KinematicTree, params: dict) -> np.ndarray:
    """Elementwise mean of ground-truth parameters; ``params`` maps pose/orient/beta/cam to arrays."""
    if len(params["pose"]) == 0:
        raise ValueError("cannot initialise from an empty dataset")
    return pack_params(tree, params["pose"], params["orient"], params["beta"], params["cam"]).mean(axis=0)


def init_regressor(tree: KinematicTree, obs_dim: int, mean_params: np.ndarray, hidden=(256, 256),
                   n_iter: int = 3, seed: int = 0) -> RegressorParams:
    pdim = param_dim(tree)
    mlp = init_mlp([obs_dim + pdim, *hidden, pdim], np.random.default_rng(seed), name="reg", out_scale=0.1)
    return RegressorParams(mlp, np.asarray(mean_params, dtype=np.float64), n_iter)


def regress(params: RegressorParams, tree: KinematicTree, obs) -> RegressorOutput:
    """``p_0 = mean``; ``p_t = p_{t-1} + MLP([obs, p_{t-1}])`` for ``t = 1..T``."""
    obs = as_tensor(obs)
    if obs.shape[-1] != params.obs_dim:
        raise ValueError(f"observation dim {obs.shape[-1]} != regressor input {params.obs_dim}")
    batch = obs.shape[:-1]
    p = Tensor(np.broadcast_to(params.mean_params, batch + params.mean_params.shape).copy())
    trace = [p.data]
    for _ in range(params.n_iter):
        p = p + forward_mlp(params.mlp, concat([obs, p], axis=-1))
        trace.append(p.data)
    parts = unpack_params(tree, p)
    return RegressorOutput(parts["pose"], parts["orient"], parts["beta"], parts["cam"], p, trace)


def body_outputs(tree: KinematicTree, pose, orient, beta, cam) -> dict:
    """3D joints, 2D projections and local rotations for a parameter batch."""
    state = forward_kinematics(tree, pose, orient, beta)
    return {"joints3d": state.joints, "joints2d": project(state.joints, cam),
            "rotations": state.local_rotations, "beta": beta}


def predict_bodies(params: RegressorParams, tree: KinematicTree, obs) -> dict:
    out = regress(params, tree, np.asarray(obs, dtype=np.float64))
    bodies = body_outputs(tree, out.pose, out.orient, out.beta, out.cam)
    bodies.update({"pose": out.pose, "orient": out.orient, "cam": out.cam})
    return {k: v.data if isinstance(v, Tensor) else v for k, v in bodies.items()}
