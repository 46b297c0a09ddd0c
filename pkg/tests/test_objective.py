import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dapa_lab.autodiff import Tensor, grad_check
from dapa_lab.body import N_BETAS, forward_kinematics, rodrigues
from dapa_lab.camera import project
from dapa_lab.objective import LossWeights, loss_real, loss_syn, rotation_distance, total_loss
from dapa_lab.regressor import body_outputs


def _bodies(tree, rng, n=3):
    pose = rng.normal(scale=0.4, size=(n, tree.pose_dim))
    orient = rng.normal(scale=0.3, size=(n, 3))
    beta = rng.normal(scale=0.5, size=(n, N_BETAS))
    cam = np.column_stack([rng.uniform(0.8, 1.2, n), rng.normal(scale=0.05, size=(n, 2))])
    return pose, orient, beta, cam


def test_real_loss_zero_at_target(rng):
    j = rng.normal(size=(4, 17, 2))
    np.testing.assert_array_equal(loss_real(j, j, np.ones((4, 17))).data, 0.0)


def test_real_loss_single_keypoint_hand_value():
    pred = np.zeros((1, 2))
    gt = np.array([[0.1, 0.0]])
    assert loss_real(pred, gt, np.ones(1)).item() == pytest.approx(0.05, abs=1e-15)


def test_doubling_confidence_doubles_relative_weight():
    pred = np.zeros((2, 2))
    gt = np.array([[0.1, 0.0], [0.0, 0.2]])          # squared errors 0.01 and 0.04
    even = loss_real(pred, gt, np.array([1.0, 1.0])).item()
    doubled = loss_real(pred, gt, np.array([2.0, 1.0])).item()
    assert even == pytest.approx(5 * (0.01 + 0.04) / 2, abs=1e-15)
    assert doubled == pytest.approx(5 * (2 * 0.01 + 0.04) / 3, abs=1e-15)


def test_all_zero_confidence_gives_zero():
    assert loss_real(np.ones((3, 2)), np.zeros((3, 2)), np.zeros(3)).item() == 0.0


def test_syn_loss_zero_at_target(tree, rng):
    out = body_outputs(tree, *_bodies(tree, rng))
    total, terms = loss_syn(out, out)
    np.testing.assert_array_equal(total.data, 0.0)
    assert all(np.all(v.data == 0.0) for v in terms.values())


def test_rotation_term_ignores_axis_angle_aliasing(rng):
    w = rng.normal(size=(5, 3))
    angle = np.linalg.norm(w, axis=1, keepdims=True)
    alias = w * (1.0 - 2 * np.pi / angle)           # same rotation, other side of the circle
    d = rotation_distance(Tensor(rodrigues(w)), rodrigues(alias)).data
    assert np.all(d < 1e-24)


def test_beta_term_hand_value(tree, rng):
    out = body_outputs(tree, *_bodies(tree, rng, 1))
    target = dict(out)
    target["beta"] = out["beta"] + np.eye(N_BETAS)[0]
    total, _ = loss_syn(out, target, LossWeights())
    assert total.item() == pytest.approx(0.001 * 0.1, abs=1e-16)


def test_total_loss_ablations(tree, rng):
    out = body_outputs(tree, *_bodies(tree, rng))
    kp = np.concatenate([out["joints2d"] + 0.01, np.ones(out["joints2d"].shape[:-1] + (1,))], axis=-1)
    real = {"joints2d": out["joints2d"], "keypoints": kp}
    target = dict(out)
    target["joints3d"] = out["joints3d"] * 1.1
    syn = (out, target)
    r = total_loss(real, None)
    s = total_loss(None, syn)
    both = total_loss(real, syn)
    assert r.total.item() == pytest.approx(loss_real(out["joints2d"], kp[..., :2], kp[..., 2]).data.mean())
    assert s.total.item() == pytest.approx(loss_syn(out, target)[0].data.mean())
    assert both.total.item() == pytest.approx(r.total.item() + s.total.item(), rel=1e-14)
    assert total_loss(None, None).total.item() == 0.0
    assert (both.n_real, both.n_syn) == (3, 3)


def test_fully_dropped_samples_excluded_from_real_mean(tree, rng):
    out = body_outputs(tree, *_bodies(tree, rng, 2))
    kp = np.concatenate([out["joints2d"] + 0.05, np.ones((2, 17, 1))], axis=-1)
    kp[1] = 0.0
    full = total_loss({"joints2d": out["joints2d"], "keypoints": kp}, None).total.item()
    only = loss_real(out["joints2d"][:1], kp[:1, :, :2], kp[:1, :, 2]).item()
    assert full == pytest.approx(only, rel=1e-14)


def test_syn_objective_gradient(tree, rng):
    pose, orient, beta, cam = (Tensor(a, requires_grad=True) for a in _bodies(tree, rng, 2))
    target = body_outputs(tree, *_bodies(tree, np.random.default_rng(9), 2))
    rep = grad_check(lambda: loss_syn(body_outputs(tree, pose, orient, beta, cam), target)[0].sum(),
                     [pose, orient, beta, cam], tolerance=1e-4)
    assert rep.passed, rep.max_rel_error


def test_real_objective_gradient(tree, rng):
    pose, orient, beta, cam = (Tensor(a, requires_grad=True) for a in _bodies(tree, rng, 2))
    gt = rng.normal(scale=0.3, size=(2, 17, 2))
    conf = rng.uniform(0.3, 1.0, size=(2, 17))
    fn = lambda: loss_real(project(forward_kinematics(tree, pose, orient, beta).joints, cam), gt, conf).sum()  # noqa: E731
    rep = grad_check(fn, [pose, orient, beta, cam], tolerance=1e-4)
    assert rep.passed, rep.max_rel_error


@given(arrays(np.float64, (4, 2), elements=st.floats(-2, 2)), arrays(np.float64, (4, 2), elements=st.floats(-2, 2)),
       arrays(np.float64, (4,), elements=st.floats(0, 1)))
def test_real_loss_nonnegative(a, b, c):
    assert loss_real(a, b, c).item() >= 0.0


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(w_2d=-1.0)
