import copy
import csv

import numpy as np
import pytest

import dapa_lab.trainer as trainer_mod
from dapa_lab.augment import AugmentConfig
from dapa_lab.autodiff import active_tape
from dapa_lab.body import forward_kinematics
from dapa_lab.datagen import default_specs, sample_domain
from dapa_lab.experiment import ExperimentConfig, run_adapt, run_pretrain
from dapa_lab.metrics import mpjpe
from dapa_lab.regressor import init_mean_params, init_regressor, unpack_params
from dapa_lab.trainer import (LOG_COLUMNS, TrainConfig, TrainingDivergedError, adapt, evaluate, new_state,
                              pretrain, write_log_csv)

SMALL = ExperimentConfig(n_source=2500, n_target=200, n_test=150, pretrain_steps=2000, adapt_steps=20)


@pytest.fixture(scope="module")
def world(tree):
    specs = default_specs(3, SMALL.n_source, SMALL.n_target, SMALL.n_test)
    return {name: sample_domain(spec, tree) for name, spec in specs.items()}


@pytest.fixture(scope="module")
def pretrained(tree, world):
    return run_pretrain(tree, world["source"], 3, SMALL)


def _mean_stub(tree, dataset, obs_dim):
    reg = init_regressor(tree, obs_dim, init_mean_params(tree, dataset.param_matrix()), hidden=(8,))
    for p in reg.parameters():
        p.data[:] = 0.0
    return reg


def _flat(params):
    return np.concatenate([p.data.ravel() for p in params.parameters()])


def test_zero_steps_leaves_parameters_unchanged(tree, world):
    src = world["source"]
    reg = init_regressor(tree, src.observations().shape[1], init_mean_params(tree, src.param_matrix()), hidden=(16,))
    before = _flat(reg)
    cfg = TrainConfig(phase="pretrain", steps=0)
    st = pretrain(new_state(reg, cfg), tree, src.observations(), src.param_matrix(), cfg)
    np.testing.assert_array_equal(_flat(st.params), before)
    assert st.history == []


def test_pretrain_loss_decreases(pretrained):
    losses = np.array([r["loss_total"] for r in pretrained.history])
    assert len(losses) == SMALL.pretrain_steps
    assert losses[-100:].mean() < 0.8 * losses[:100].mean()


def test_pretrain_beats_mean_params_predictor_by_30_percent(tree, world, pretrained):
    held = world["source"].subset(range(500))
    stub = _mean_stub(tree, world["source"], held.observations().shape[1])
    base = evaluate(stub, tree, held).mpjpe
    trained = evaluate(pretrained.params, tree, held).mpjpe
    assert trained <= 0.7 * base


def test_evaluate_ground_truth_stub_scores_zero(tree, world, pretrained, monkeypatch):
    test = world["target_test"]
    gt = {k: test.eval_array(k) for k in ("pose", "orient", "beta", "cam", "joints3d", "joints2d")}

    def oracle(params, tree_, obs):
        rows = [np.flatnonzero(np.all(test.observations() == o, axis=1))[0] for o in obs]
        return {k: v[rows] for k, v in gt.items()}

    monkeypatch.setattr(trainer_mod, "predict_bodies", oracle)
    rep = evaluate(pretrained.params, tree, test)
    assert rep.mpjpe == pytest.approx(0.0, abs=1e-9)
    assert rep.pa_mpjpe == pytest.approx(0.0, abs=1e-6)
    assert rep.pck[0.2] == 1.0


def test_evaluate_mean_stub_matches_hand_computation(tree, world):
    test = world["target_test"]
    stub = _mean_stub(tree, world["source"], test.observations().shape[1])
    mean = unpack_params(tree, stub.mean_params)
    joints = forward_kinematics(tree, mean["pose"], mean["orient"], mean["beta"]).joints
    expected = 1000 * np.mean(mpjpe(np.broadcast_to(joints, test.eval_array("joints3d").shape),
                                    test.eval_array("joints3d")))
    assert evaluate(stub, tree, test).mpjpe == pytest.approx(expected, rel=1e-10)


def test_evaluate_is_deterministic(tree, world, pretrained):
    a = evaluate(pretrained.params, tree, world["target_test"])
    b = evaluate(pretrained.params, tree, world["target_test"])
    assert a == b


def test_pretrain_is_seeded(tree, world):
    cfg = ExperimentConfig(pretrain_steps=15)
    a = run_pretrain(tree, world["source"], 5, cfg)
    b = run_pretrain(tree, world["source"], 5, cfg)
    c = run_pretrain(tree, world["source"], 6, cfg)
    np.testing.assert_array_equal(_flat(a.params), _flat(b.params))
    assert not np.array_equal(_flat(a.params), _flat(c.params))


def _adapt(tree, prior, pretrained, world, mode, **kw):
    t = world["target_train"]
    return run_adapt(tree, prior, pretrained.params, t.observations(), t.keypoints(), mode, 3, SMALL, **kw)


def test_ft2d_and_real_only_are_identical(tree, small_prior, world, pretrained):
    a = _adapt(tree, small_prior, pretrained, world, "ft2d")
    b = _adapt(tree, small_prior, pretrained, world, "real_only")
    np.testing.assert_array_equal(_flat(a.params), _flat(b.params))


def test_adaptation_leaves_pretrained_untouched(tree, small_prior, world, pretrained):
    before = _flat(pretrained.params)
    _adapt(tree, small_prior, pretrained, world, "dapa")
    np.testing.assert_array_equal(_flat(pretrained.params), before)


@pytest.mark.parametrize("mode, n_real, n_syn", [("dapa", 32, 32), ("ft2d", 32, 0), ("syn_only", 0, 32),
                                                 ("zero_perturb", 32, 32), ("random_pose", 32, 32)])
def test_batch_composition(tree, small_prior, world, pretrained, mode, n_real, n_syn):
    st = _adapt(tree, small_prior, pretrained, world, mode, until=3)
    for row in st.history:
        assert (row["n_real"], row["n_syn"]) == (n_real, n_syn)


def test_augmenting_modes_need_prior(tree, world, pretrained):
    with pytest.raises(ValueError, match="prior"):
        _adapt(tree, None, pretrained, world, "dapa")


def test_adaptation_sees_only_keypoints(tree, small_prior, world, pretrained):
    clean = _adapt(tree, small_prior, pretrained, world, "dapa")
    poisoned = copy.deepcopy(world)
    for s in poisoned["target_train"]:
        for k in s._hidden:
            s._hidden[k] = np.full_like(s._hidden[k], np.nan)
    dirty = _adapt(tree, small_prior, pretrained, poisoned, "dapa")
    np.testing.assert_array_equal(_flat(clean.params), _flat(dirty.params))
    assert clean.history == dirty.history


def test_augmentation_input_is_detached(tree, small_prior, world, pretrained, monkeypatch):
    seen = []
    real = trainer_mod.dapa_augment

    def spy(prior, pose_reg, cfg, rngs, ids=None):
        tape = active_tape()
        n_before = len(tape)
        out = real(prior, pose_reg, cfg, rngs, ids)
        seen.append((type(pose_reg), len(tape) - n_before))
        return out

    monkeypatch.setattr(trainer_mod, "dapa_augment", spy)
    _adapt(tree, small_prior, pretrained, world, "dapa", until=2)
    assert seen == [(np.ndarray, 0), (np.ndarray, 0)]


def test_non_finite_observation_raises_with_step(tree, small_prior, world, pretrained):
    t = world["target_train"]
    obs = t.observations()
    obs[:] = np.nan
    cfg = TrainConfig(mode="ft2d", steps=3, augment=AugmentConfig())
    st = new_state(copy.deepcopy(pretrained.params), cfg)
    with pytest.raises(TrainingDivergedError) as info, np.errstate(invalid="ignore"):
        adapt(st, tree, small_prior, obs, t.keypoints(), cfg)
    assert info.value.step == 0


def test_log_csv_has_fixed_columns(tmp_path, tree, small_prior, world, pretrained):
    st = _adapt(tree, small_prior, pretrained, world, "dapa", until=4)
    path = tmp_path / "log.csv"
    write_log_csv(path, st.history)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert [int(r["step"]) for r in rows] == [0, 1, 2, 3]
    assert all(float(r["mean_latent_norm"]) > 0 for r in rows)


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        TrainConfig(mode="unknown")
    with pytest.raises(ValueError):
        TrainConfig(steps=-1)
    with pytest.raises(ValueError):
        TrainConfig(phase="finetune")


def test_zero_perturb_config_forces_zero_scale():
    cfg = TrainConfig(mode="zero_perturb", augment=AugmentConfig(s=0.7))
    assert cfg.augment.s == 0.0 and cfg.augment.mode == "zero_perturb"
