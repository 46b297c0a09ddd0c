"""scikit-learn style wrappers around pretraining and adaptation.

``MeshRegressor.fit(X, y)`` pretrains on observations with full parameter
labels. ``DAPAAdapter.fit(X, keypoints)`` adapts a fitted regressor using
target observations and 2D keypoints only; its signature admits nothing else.
"""
from __future__ import annotations

import copy

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .augment import AugmentConfig
from .body import N_BETAS, KinematicTree, default_tree, forward_kinematics
from .datagen import PARAM_KEYS, NoiseSpec
from .metrics import mpjpe
from .objective import LossWeights
from .prior import PriorParams, PosePrior
from .regressor import init_mean_params, init_regressor, predict_bodies
from .trainer import ADAPT_MODES, TrainConfig, adapt, new_state, pretrain
from .validation import check_keypoints, check_matrix


def split_params(tree: KinematicTree, y) -> dict:
    """Dict of parameter arrays from a dict or a packed ``(N, P)`` matrix
    laid out as ``[pose | orient | beta | cam]`` (camera scale in natural units)."""
    if isinstance(y, dict):
        return {k: np.asarray(y[k], dtype=np.float64) for k in PARAM_KEYS}
    y = check_matrix(y, n_features=tree.pose_dim + 6 + N_BETAS, name="y")
    p = tree.pose_dim
    return {"pose": y[:, :p], "orient": y[:, p:p + 3], "beta": y[:, p + 3:p + 3 + N_BETAS],
            "cam": y[:, p + 3 + N_BETAS:]}


def join_params(parts: dict) -> np.ndarray:
    return np.concatenate([parts[k] for k in PARAM_KEYS], axis=-1)


class MeshRegressor(RegressorMixin, BaseEstimator):
    """Iterative-error-feedback body regressor trained with full supervision."""

    def __init__(self, hidden=(256, 256), n_iter=3, steps=3000, batch_size=32, learning_rate=1e-3,
                 weights=None, tree=None, random_state=0):
        self.hidden = hidden
        self.n_iter = n_iter
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weights = weights
        self.tree = tree
        self.random_state = random_state

    def _tree(self) -> KinematicTree:
        return self.tree if self.tree is not None else default_tree()

    def fit(self, X, y):
        tree = self._tree()
        X = check_matrix(X, name="observations")
        params = split_params(tree, y)
        if len(params["pose"]) != len(X):
            raise ValueError("observations and labels differ in length")
        cfg = TrainConfig(phase="pretrain", steps=self.steps, batch_size=self.batch_size,
                          learning_rate=self.learning_rate, weights=self.weights or LossWeights(),
                          seed=self.random_state)
        reg = init_regressor(tree, X.shape[1], init_mean_params(tree, params), tuple(self.hidden),
                             self.n_iter, self.random_state)
        state = pretrain(new_state(reg, cfg), tree, X, params, cfg)
        self.params_ = state.params
        self.history_ = state.history
        self.n_features_in_ = X.shape[1]
        return self

    def predict_bodies(self, X) -> dict:
        check_is_fitted(self, "params_")
        return predict_bodies(self.params_, self._tree(), check_matrix(X, n_features=self.n_features_in_))

    def predict(self, X) -> np.ndarray:
        """Packed parameters ``(N, P)`` in the layout accepted by ``fit``."""
        return join_params(self.predict_bodies(X))

    def score(self, X, y, sample_weight=None) -> float:
        """Negative MPJPE in millimeters against the joints implied by ``y``."""
        tree = self._tree()
        gt = split_params(tree, y)
        gt_joints = forward_kinematics(tree, gt["pose"], gt["orient"], gt["beta"]).joints
        err = mpjpe(self.predict_bodies(X)["joints3d"], gt_joints)
        return -1000.0 * float(np.average(err, weights=sample_weight))


class DAPAAdapter(BaseEstimator):
    """Weakly supervised adaptation of a fitted :class:`MeshRegressor`.

    ``prior`` is a fitted :class:`PosePrior` or raw prior parameters; it is
    only needed by the augmenting modes.
    """

    def __init__(self, regressor=None, prior=None, mode="dapa", s=0.5, steps=1000, batch_size=32,
                 learning_rate=3e-4, weights=None, render_noise=None, random_state=0):
        self.regressor = regressor
        self.prior = prior
        self.mode = mode
        self.s = s
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weights = weights
        self.render_noise = render_noise
        self.random_state = random_state

    def _prior_params(self) -> PriorParams | None:
        if isinstance(self.prior, PosePrior):
            check_is_fitted(self.prior, "params_")
            return self.prior.params_
        return self.prior

    def fit(self, X, keypoints):
        if self.mode not in ADAPT_MODES:
            raise ValueError(f"mode must be one of {ADAPT_MODES}")
        if self.regressor is None:
            raise ValueError("a fitted MeshRegressor is required")
        check_is_fitted(self.regressor, "params_")
        tree = self.regressor._tree()
        X = check_matrix(X, n_features=self.regressor.n_features_in_, name="observations")
        kp = check_keypoints(keypoints, tree.n_joints)
        if len(kp) != len(X):
            raise ValueError("observations and keypoints differ in length")
        noise = self.render_noise
        if isinstance(noise, dict):
            noise = NoiseSpec(**noise)
        aug = AugmentConfig(s=self.s, seed=self.random_state, render_noise=noise)
        cfg = TrainConfig(phase="adapt", mode=self.mode, steps=self.steps, batch_size=self.batch_size,
                          learning_rate=self.learning_rate, weights=self.weights or LossWeights(),
                          augment=aug, seed=self.random_state)
        state = new_state(copy.deepcopy(self.regressor.params_), cfg)
        adapt(state, tree, self._prior_params(), X, kp, cfg)
        self.params_ = state.params
        self.history_ = state.history
        self.n_features_in_ = X.shape[1]
        return self

    def predict_bodies(self, X) -> dict:
        check_is_fitted(self, "params_")
        return predict_bodies(self.params_, self.regressor._tree(),
                              check_matrix(X, n_features=self.n_features_in_))

    def predict(self, X) -> np.ndarray:
        return join_params(self.predict_bodies(X))
