"""The default source -> target experiment, shared by the CLI and the acceptance suite.

One seed builds its own datasets, pretrains on the source domain and adapts
a copy of the pretrained regressor once per mode. The pose prior is trained
once on the mixed pose corpus and shared by every seed.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .augment import AugmentConfig
from .body import KinematicTree, default_tree
from .datagen import CORPUS_WEIGHTS, Dataset, default_clusters, default_specs, make_pose_corpus, sample_domain
from .metrics import EvalReport
from .objective import LossWeights
from .prior import PriorParams, train_prior
from .regressor import RegressorParams, init_mean_params, init_regressor
from .trainer import ADAPT_MODES, TrainConfig, TrainState, adapt, evaluate, new_state, pretrain

log = logging.getLogger(__name__)


@dataclass
class PriorSettings:
    corpus_size: int = 20000
    latent_dim: int = 8
    hidden: tuple = (128, 128)
    kl_weight: float = 0.005
    n_steps: int = 4000
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.corpus_size < 1 or self.n_steps < 0:
            raise ValueError("prior corpus must be non-empty and steps nonnegative")


@dataclass
class ExperimentConfig:
    n_source: int = 5000
    n_target: int = 2000
    n_test: int = 500
    pretrain_steps: int = 3000
    pretrain_lr: float = 1e-3
    adapt_steps: int = 1000
    adapt_lr: float = 3e-4
    batch_size: int = 32
    s: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    prior: PriorSettings = field(default_factory=PriorSettings)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.prior, dict):
            self.prior = PriorSettings(**self.prior)

    def as_dict(self) -> dict:
        return asdict(self)


def prior_corpus(tree: KinematicTree, settings: PriorSettings) -> np.ndarray:
    clusters = default_clusters(tree, weights=CORPUS_WEIGHTS)
    return make_pose_corpus(clusters, settings.corpus_size, seed=settings.seed).poses


def fit_default_prior(tree: KinematicTree, settings: PriorSettings | None = None) -> PriorParams:
    settings = settings or PriorSettings()
    prior, _ = train_prior(prior_corpus(tree, settings), settings.latent_dim, settings.hidden,
                           settings.kl_weight, settings.n_steps, settings.batch_size,
                           settings.learning_rate, settings.seed)
    return prior


def make_world(tree: KinematicTree, seed: int, cfg: ExperimentConfig) -> dict:
    specs = default_specs(seed, cfg.n_source, cfg.n_target, cfg.n_test)
    return {name: sample_domain(spec, tree) for name, spec in specs.items()}


def pretrain_config(seed: int, cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(phase="pretrain", steps=cfg.pretrain_steps, batch_size=cfg.batch_size,
                       learning_rate=cfg.pretrain_lr, weights=cfg.weights, seed=seed)


def adapt_config(mode: str, seed: int, cfg: ExperimentConfig) -> TrainConfig:
    """Synthetic observations get the target's detection noise, so real and
    synthetic inputs are not separable by their confidence channel."""
    noise = default_specs(seed, 0, 0, 0)["target_train"].noise
    aug = AugmentConfig(s=cfg.s, seed=seed, render_noise=noise)
    return TrainConfig(phase="adapt", mode=mode, steps=cfg.adapt_steps, batch_size=cfg.batch_size,
                       learning_rate=cfg.adapt_lr, weights=cfg.weights, augment=aug, seed=seed)


def run_pretrain(tree: KinematicTree, source: Dataset, seed: int, cfg: ExperimentConfig,
                 state: TrainState | None = None, until: int | None = None) -> TrainState:
    tcfg = pretrain_config(seed, cfg)
    params = source.param_matrix()
    obs = source.observations()
    if state is None:
        reg = init_regressor(tree, obs.shape[1], init_mean_params(tree, params), seed=seed)
        state = new_state(reg, tcfg)
    return pretrain(state, tree, obs, params, tcfg, until=until)


def run_adapt(tree: KinematicTree, prior: PriorParams | None, pretrained: RegressorParams, obs: np.ndarray,
              keypoints: np.ndarray, mode: str, seed: int, cfg: ExperimentConfig,
              state: TrainState | None = None, until: int | None = None) -> TrainState:
    """Adapt a copy of ``pretrained``; only target observations and keypoints are seen."""
    tcfg = adapt_config(mode, seed, cfg)
    if state is None:
        state = new_state(copy.deepcopy(pretrained), tcfg)
    return adapt(state, tree, prior, obs, keypoints, tcfg, until=until)


def run_seed(seed: int, modes=ADAPT_MODES, cfg: ExperimentConfig | None = None,
             prior: PriorParams | None = None, tree: KinematicTree | None = None) -> dict[str, EvalReport]:
    """Target-test reports for the pretrained model and every adaptation mode."""
    cfg = cfg or ExperimentConfig()
    tree = tree or default_tree()
    world = make_world(tree, seed, cfg)
    pre = run_pretrain(tree, world["source"], seed, cfg)
    reports = {"pretrained": evaluate(pre.params, tree, world["target_test"])}
    target = world["target_train"]
    obs, kp = target.observations(), target.keypoints()
    for mode in modes:
        st = run_adapt(tree, prior, pre.params, obs, kp, mode, seed, cfg)
        reports[mode] = evaluate(st.params, tree, world["target_test"])
        log.info("seed %d %s mpjpe %.1f", seed, mode, reports[mode].mpjpe)
    return reports
