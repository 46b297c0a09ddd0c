"""VAE pose prior over body poses.

The encoder maps a body pose to a diagonal Gaussian posterior (mean and log
standard deviation); the decoder maps a latent code back to a pose whose
components are squashed by ``pi * tanh`` so every latent, including one pushed
far outside the training shell, decodes to a bounded axis-angle vector.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import (AdamState, MLPParams, Tape, Tensor, adam_step, as_tensor, backward,
                       forward_mlp, init_mlp)
from .validation import check_matrix

log = logging.getLogger(__name__)


class PriorDivergedError(FloatingPointError):
    pass


@dataclass
class PriorParams:
    encoder: MLPParams
    decoder: MLPParams
    latent_dim: int

    def __post_init__(self):
        if self.encoder.out_dim != 2 * self.latent_dim or self.decoder.in_dim != self.latent_dim:
            raise ValueError("encoder must output 2*latent_dim values and decoder take latent_dim")

    @property
    def pose_dim(self) -> int:
        return self.encoder.in_dim

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()


@dataclass
class PosteriorParams:
    mu: object          # (..., d)
    log_sigma: object   # (..., d)

    @property
    def sigma(self):
        return self.log_sigma.exp() if isinstance(self.log_sigma, Tensor) else np.exp(self.log_sigma)


def init_prior(pose_dim: int, latent_dim: int = 8, hidden=(128, 128), seed: int = 0) -> PriorParams:
    rng = np.random.default_rng(seed)
    enc = init_mlp([pose_dim, *hidden, 2 * latent_dim], rng, name="enc", out_scale=0.1)
    dec = init_mlp([latent_dim, *hidden, pose_dim], rng, name="dec")
    return PriorParams(enc, dec, latent_dim)


def encode(prior: PriorParams, pose) -> PosteriorParams:
    """Posterior ``N(mu, diag(sigma^2))`` of a pose batch ``(..., pose_dim)``."""
    tensor_in = isinstance(pose, Tensor)
    if np.shape(pose.data if tensor_in else pose)[-1] != prior.pose_dim:
        raise ValueError(f"pose dim {np.shape(pose)[-1]} != prior pose dim {prior.pose_dim}")
    out = forward_mlp(prior.encoder, as_tensor(pose))
    d = prior.latent_dim
    mu, log_sigma = out[..., :d], out[..., d:]
    if not tensor_in and not out.requires_grad:
        mu, log_sigma = mu.data, log_sigma.data
    return PosteriorParams(mu, log_sigma)


def sample_posterior(post: PosteriorParams, rng: np.random.Generator | None = None, noise=None):
    """Reparameterized draw ``z = mu + sigma * n``; pass ``noise`` for common random numbers."""
    if noise is None:
        noise = rng.standard_normal(np.shape(post.mu.data if isinstance(post.mu, Tensor) else post.mu))
    return post.mu + post.sigma * noise


def decode(prior: PriorParams, z):
    """Latent ``(..., d)`` to pose ``(..., pose_dim)`` with components in (-pi, pi)."""
    tensor_in = isinstance(z, Tensor)
    if np.shape(z.data if tensor_in else z)[-1] != prior.latent_dim:
        raise ValueError("latent dim mismatch")
    out = forward_mlp(prior.decoder, as_tensor(z)).tanh() * np.pi
    return out if tensor_in or out.requires_grad else out.data


def kl_divergence(post: PosteriorParams):
    """``KL(N(mu, sigma) || N(0, I)) = 0.5 * sum(sigma^2 + mu^2 - 1 - 2 log sigma)`` over the last axis."""
    mu, ls = post.mu, post.log_sigma
    if isinstance(mu, Tensor) or isinstance(ls, Tensor):
        mu, ls = as_tensor(mu), as_tensor(ls)
        return ((ls * 2.0).exp() + mu.square() - 1.0 - ls * 2.0).sum(axis=-1) * 0.5
    return 0.5 * np.sum(np.exp(2 * ls) + mu ** 2 - 1.0 - 2 * ls, axis=-1)


def prior_loss(prior: PriorParams, poses, noise, kl_weight: float):
    post = encode(prior, Tensor(poses))
    z = sample_posterior(post, noise=noise)
    recon = decode(prior, z)
    rec = (recon - poses).square().sum(axis=-1).mean()
    kl = kl_divergence(post).mean()
    return rec + kl * kl_weight, rec, kl


def train_prior(poses: np.ndarray, latent_dim: int = 8, hidden=(128, 128), kl_weight: float = 0.005,
                n_steps: int = 4000, batch_size: int = 256, learning_rate: float = 1e-3,
                seed: int = 0) -> tuple[PriorParams, dict]:
    """Fit the VAE by Adam on minibatches; returns params and a loss history."""
    poses = np.asarray(poses, dtype=np.float64)
    if len(poses) == 0:
        raise ValueError("pose corpus is empty")
    prior = init_prior(poses.shape[1], latent_dim, hidden, seed)
    params = prior.parameters()
    opt = AdamState.for_params(params, lr=learning_rate)
    history = {"loss": [], "recon": [], "kl": []}
    for step in range(n_steps):
        rng = np.random.default_rng([seed, 11, step])
        batch = poses[rng.integers(0, len(poses), size=min(batch_size, len(poses)))]
        noise = rng.standard_normal((len(batch), latent_dim))
        with Tape() as tape:
            loss, rec, kl = prior_loss(prior, batch, noise, kl_weight)
        if not np.isfinite(loss.item()):
            raise PriorDivergedError(f"prior loss became non-finite at step {step}")
        grads = backward(tape, loss, params)
        for p in params:
            p.grad = None
        adam_step(opt, params, grads)
        history["loss"].append(loss.item())
        history["recon"].append(rec.item())
        history["kl"].append(kl.item())
        if step % 500 == 0:
            log.debug("prior step %d loss %.5f recon %.5f kl %.3f", step, loss.item(), rec.item(), kl.item())
    return prior, history


class PosePrior(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` trains the VAE, ``transform`` returns posterior
    means, ``inverse_transform`` decodes latents to poses."""

    def __init__(self, latent_dim=8, hidden=(128, 128), kl_weight=0.005, n_steps=4000,
                 batch_size=256, learning_rate=1e-3, random_state=0):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.kl_weight = kl_weight
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_matrix(X, name="poses")
        self.params_, self.history_ = train_prior(
            X, self.latent_dim, tuple(self.hidden), self.kl_weight, self.n_steps,
            self.batch_size, self.learning_rate, self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X, width):
        check_is_fitted(self, "params_")
        return check_matrix(X, n_features=width)

    def encode(self, X) -> PosteriorParams:
        return encode(self.params_, self._check(X, self.n_features_in_))

    def transform(self, X):
        return self.encode(X).mu

    def inverse_transform(self, Z):
        return decode(self.params_, self._check(Z, self.latent_dim))

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        check_is_fitted(self, "params_")
        z = np.random.default_rng(seed).standard_normal((n, self.latent_dim))
        return decode(self.params_, z)

    @classmethod
    def from_params(cls, params: PriorParams, **kw) -> "PosePrior":
        est = cls(latent_dim=params.latent_dim, **kw)
        est.params_ = params
        est.n_features_in_ = params.pose_dim
        est.history_ = {}
        return est
