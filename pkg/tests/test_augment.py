import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from dapa_lab.augment import (AugmentConfig, AugmentationError, dapa_augment, make_synthetic_batch,
                              make_synthetic_example, perturb_latent)
from dapa_lab.body import forward_kinematics
from dapa_lab.camera import project
from dapa_lab.datagen import NoiseSpec
from dapa_lab.prior import decode, encode, init_prior

latents = arrays(np.float64, (8,), elements=st.floats(-5, 5, allow_nan=False))


def test_zero_scale_is_identity():
    z = np.array([0.3, -2.0, 0.0])
    out, _ = perturb_latent(z, 0.0, eps=np.array([0.9, 0.1, 0.5]))
    np.testing.assert_array_equal(out, z)


def test_hand_value():
    out, _ = perturb_latent(np.array([1.0, -2.0]), 0.5, eps=np.array([0.2, 1.0]))
    np.testing.assert_allclose(out, [1.1, -3.0], atol=1e-15)


@given(latents, st.floats(0, 2), st.integers(0, 10_000))
def test_sign_kept_and_magnitude_grows(z, s, seed):
    out, eps = perturb_latent(z, s, np.random.default_rng(seed))
    assert np.all((eps >= 0) & (eps < 1))
    assert np.all(np.sign(out) == np.sign(z))
    assert np.all(np.abs(out) >= np.abs(z))


def test_expected_norm_grows():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((10_000, 8))
    zt, _ = perturb_latent(z, 0.5, rng)
    assert np.linalg.norm(zt, axis=1).mean() > np.linalg.norm(z, axis=1).mean()


def test_negative_scale_rejected():
    with pytest.raises(ValueError):
        perturb_latent(np.zeros(2), -0.1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        AugmentConfig(s=-1.0)


def _sharp_prior(pose_dim=48):
    prior = init_prior(pose_dim, seed=3)
    prior.encoder.biases[-1].data[prior.latent_dim:] = -800.0   # sigma underflows to 0
    return prior


def test_zero_perturb_with_sharp_encoder_decodes_mean():
    prior = _sharp_prior()
    pose = np.random.default_rng(1).normal(scale=0.3, size=(3, 48))
    out, prov = dapa_augment(prior, pose, AugmentConfig(mode="zero_perturb"), np.random.default_rng(0))
    np.testing.assert_allclose(out, decode(prior, encode(prior, pose).mu), atol=1e-12)
    assert all(p.mode == "zero_perturb" for p in prov)


def test_random_pose_ignores_input():
    prior = init_prior(48, seed=2)
    a, _ = dapa_augment(prior, np.zeros((1, 48)), AugmentConfig(mode="random_pose"), [np.random.default_rng(7)])
    b, _ = dapa_augment(prior, np.ones((1, 48)), AugmentConfig(mode="random_pose"), [np.random.default_rng(7)])
    np.testing.assert_array_equal(a, b)


def test_dapa_output_depends_on_input():
    prior = init_prior(48, seed=2)
    a, _ = dapa_augment(prior, np.zeros((1, 48)), AugmentConfig(), [np.random.default_rng(7)])
    b, _ = dapa_augment(prior, np.full((1, 48), 0.5), AugmentConfig(), [np.random.default_rng(7)])
    assert np.abs(a - b).max() > 1e-6


def test_dapa_latent_norm_grows_monte_carlo():
    prior = init_prior(48, seed=4)
    poses = np.random.default_rng(0).normal(scale=0.5, size=(10_000, 48))
    _, prov = dapa_augment(prior, poses, AugmentConfig(s=0.5), np.random.default_rng(1))
    z = np.array([np.linalg.norm(p.z) for p in prov])
    zt = np.array([np.linalg.norm(p.z_tilde) for p in prov])
    assert zt.mean() > z.mean()
    assert stats.ttest_rel(zt, z, alternative="greater").pvalue < 1e-3


def test_rows_do_not_depend_on_batch_composition():
    prior = init_prior(48, seed=2)
    poses = np.random.default_rng(0).normal(size=(4, 48))
    full, _ = dapa_augment(prior, poses, AugmentConfig(), [np.random.default_rng([0, i]) for i in range(4)])
    part, _ = dapa_augment(prior, poses[2:3], AugmentConfig(), [np.random.default_rng([0, 2])])
    np.testing.assert_array_equal(full[2], part[0])


def test_non_finite_augmentation_raises():
    prior = init_prior(48, seed=2)
    prior.decoder.biases[-1].data[:] = np.nan
    with pytest.raises(AugmentationError):
        dapa_augment(prior, np.zeros((1, 48)), AugmentConfig(), np.random.default_rng(0))


def _context(rng, n):
    return {"beta": rng.normal(scale=0.5, size=(n, 10)), "cam": np.column_stack([rng.uniform(0.9, 1.1, n),
            rng.normal(scale=0.05, size=(n, 2))]), "orient": rng.normal(scale=0.3, size=(n, 3))}


def test_synthetic_labels_recompute_bit_exactly(tree, rng):
    pose = rng.normal(scale=0.4, size=(5, tree.pose_dim))
    batch = make_synthetic_batch(tree, pose, _context(rng, 5))
    state = forward_kinematics(tree, batch.pose, batch.orient, batch.beta)
    np.testing.assert_array_equal(state.joints, batch.joints3d)
    np.testing.assert_array_equal(project(state.joints, batch.cam), batch.joints2d)
    assert len(batch) == 5


def test_canonical_pose_gives_rest_joints_under_orient(tree):
    ctx = {"beta": np.zeros(10), "cam": np.array([1.0, 0.0, 0.0]), "orient": np.array([0.0, 0.7, 0.0])}
    ex = make_synthetic_example(tree, np.zeros(tree.pose_dim), ctx)
    rest = tree.rest_joints()
    from dapa_lab.body import rodrigues
    expected = (rest - rest[0]) @ rodrigues(ctx["orient"]).T + rest[0]
    np.testing.assert_allclose(ex.joints3d[0], expected, atol=1e-14)


def test_exact_and_noisy_observations(tree, rng):
    pose = rng.normal(scale=0.4, size=(3, tree.pose_dim))
    ctx = _context(rng, 3)
    exact = make_synthetic_batch(tree, pose, ctx)
    kp = exact.observation.reshape(3, -1, 3)
    np.testing.assert_array_equal(kp[..., :2], exact.joints2d)
    np.testing.assert_array_equal(kp[..., 2], 1.0)
    noisy = make_synthetic_batch(tree, pose, ctx, noise=NoiseSpec(0.02, 0.0, 0.08),
                                 rngs=[np.random.default_rng(i) for i in range(3)])
    np.testing.assert_array_equal(noisy.joints2d, exact.joints2d)
    assert np.all(noisy.observation.reshape(3, -1, 3)[..., 2] < 1.0 + 1e-12)
    assert not np.array_equal(noisy.observation, exact.observation)
