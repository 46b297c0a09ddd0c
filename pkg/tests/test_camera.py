import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dapa_lab.autodiff import Tensor, grad_check
from dapa_lab.camera import WeakPerspective, project

pts = arrays(np.float64, (5, 3), elements=st.floats(-3, 3, allow_nan=False))


def test_unit_scale_drops_depth():
    x = np.array([[0.3, -0.7, 9.0]])
    np.testing.assert_array_equal(project(x, np.array([1.0, 0.0, 0.0])), [[0.3, -0.7]])


def test_single_point_hand_value():
    out = project(np.array([[0.5, -0.25, 3.0]]), WeakPerspective(2.0, 0.1, 0.2))
    np.testing.assert_allclose(out, [[1.1, -0.3]], atol=1e-15)


@given(pts, st.floats(0.1, 3.0), st.floats(-1, 1), st.floats(-1, 1))
def test_scale_linearity(x, s, tx, ty):
    lhs = project(x, np.array([2 * s, tx, ty]))
    rhs = 2 * project(x, np.array([s, 0.0, 0.0])) + np.array([tx, ty])
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@given(pts, arrays(np.float64, (5,), elements=st.floats(-5, 5, allow_nan=False)))
def test_depth_invariance(x, dz):
    y = x.copy()
    y[:, 2] += dz
    cam = np.array([1.3, 0.1, -0.2])
    np.testing.assert_array_equal(project(x, cam), project(y, cam))


def test_batched_cameras(rng):
    x = rng.normal(size=(4, 6, 3))
    cams = np.column_stack([rng.uniform(0.5, 2, 4), rng.normal(size=(4, 2))])
    out = project(x, cams)
    for i in range(4):
        np.testing.assert_allclose(out[i], project(x[i], cams[i]), atol=1e-15)


def test_projection_gradient(rng):
    x = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    cam = Tensor(np.array([1.2, 0.1, -0.3]), requires_grad=True)
    rep = grad_check(lambda: project(x, cam).square().sum(), [x, cam], tolerance=1e-6)
    assert rep.passed


@pytest.mark.parametrize("scale", [0.0, -1.0, 11.0])
def test_invalid_scale_rejected(scale):
    with pytest.raises(ValueError):
        WeakPerspective(scale)
