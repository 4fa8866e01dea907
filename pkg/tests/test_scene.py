import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefdistill.numcore import ShapeError, finite_diff, make_rng, max_rel_error
from prefdistill.scene import (Asset, CameraRig, identity_rig, make_rig, random_rig, render,
                               render_all, render_vjp)


def test_identity_camera_returns_theta():
    theta = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(render(Asset(theta), identity_rig(3), 0), theta)
    assert np.array_equal(render_all(Asset(theta), identity_rig(3, 2)), np.stack([theta, theta]))


def test_zero_asset_renders_zero():
    rig = make_rig(6, 4)
    assert not np.any(render_all(Asset(np.zeros(6)), rig))
    assert not np.any(render(Asset(np.zeros(6)), rig, 3))


def test_orthogonal_views_preserve_norm():
    rig = random_rig(7, 5, make_rng(0, "rig"))
    theta = make_rng(0, "theta").standard_normal(7)
    for k in range(rig.K):
        assert np.linalg.norm(render(Asset(theta), rig, k)) == pytest.approx(
            np.linalg.norm(theta), abs=1e-10)
    norms = np.linalg.norm(render_all(Asset(theta), rig), axis=1)
    assert np.allclose(norms, np.linalg.norm(theta), atol=1e-10)


def test_render_all_stacks_single_views():
    rig = make_rig(5, 4)
    a = Asset(make_rng(1, "t").standard_normal(5))
    assert np.array_equal(render_all(a, rig), np.stack([render(a, rig, k) for k in range(4)]))


def test_rotating_rig_angles():
    rig = make_rig(4, 4)
    # quarter turns in the first plane: e0 -> e0, e1, -e0, -e1
    e0 = Asset(np.array([1.0, 0.0, 0.0, 0.0]))
    views = render_all(e0, rig)
    assert np.allclose(views[:, :2], [[1, 0], [0, 1], [-1, 0], [0, -1]], atol=1e-15)
    assert np.allclose(views[:, 2:], 0)


def test_camera_index_and_shape_errors():
    rig = make_rig(4, 4)
    with pytest.raises(IndexError):
        render(Asset(np.zeros(4)), rig, 4)
    with pytest.raises(ShapeError):
        render_all(Asset(np.zeros(5)), rig)
    with pytest.raises(ShapeError):
        render_vjp(rig, np.zeros((3, 4)))


def test_rig_validation():
    with pytest.raises(ValueError):
        CameraRig(np.array([[[1.0, 0.1], [0.0, 1.0]]]), np.eye(1))
    with pytest.raises(ValueError):
        CameraRig(np.repeat(np.eye(2)[None], 2, axis=0), np.ones((2, 2)))


def test_rig_json_round_trip():
    rig = random_rig(5, 3, make_rng(2, "rig"), sigmoid=True)
    back = CameraRig.from_json(rig.to_json())
    assert np.array_equal(back.transforms, rig.transforms) and back.sigmoid


def test_asset_must_be_finite():
    with pytest.raises(ValueError):
        Asset(np.array([0.0, np.inf]))


def test_vjp_of_zero_is_zero():
    assert not np.any(render_vjp(make_rig(5, 4), np.zeros((4, 5))))


def test_vjp_single_identity_camera_returns_row():
    up = np.array([[0.3, -1.0, 2.0]])
    assert np.array_equal(render_vjp(identity_rig(3), up), up[0])


@pytest.mark.parametrize("sigmoid", [False, True])
def test_vjp_matches_finite_differences(sigmoid):
    for seed in range(20):
        rng = make_rng(seed, "vjp")
        rig = random_rig(6, 3, rng, sigmoid=sigmoid)
        theta = rng.standard_normal(6)
        u = rng.standard_normal((3, 6))
        fd = finite_diff(lambda v: float(np.sum(u * render_all(Asset(v), rig))), theta, h=1e-4)
        got = render_vjp(rig, u, Asset(theta))
        assert max_rel_error(got, fd) < (1e-6 if not sigmoid else 1e-4)


def test_sigmoid_vjp_needs_asset():
    with pytest.raises(ValueError):
        render_vjp(make_rig(3, 2, sigmoid=True), np.ones((2, 3)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), a=st.floats(-5, 5), b=st.floats(-5, 5))
def test_linearity(seed, a, b):
    rng = make_rng(seed, "lin")
    rig = random_rig(5, 3, rng)
    t1, t2 = rng.standard_normal(5), rng.standard_normal(5)
    lhs = render_all(Asset(a * t1 + b * t2), rig)
    rhs = a * render_all(Asset(t1), rig) + b * render_all(Asset(t2), rig)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_vjp_is_adjoint_of_render(seed):
    rng = make_rng(seed, "adj")
    rig = random_rig(4, 3, rng)
    theta, u = rng.standard_normal(4), rng.standard_normal((3, 4))
    assert np.sum(u * render_all(Asset(theta), rig)) == pytest.approx(
        render_vjp(rig, u) @ theta, abs=1e-12)
