import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgopt import manifold as mf


def rand_pose(rng, t_scale=5.0, ang_scale=1.2):
    v = rng.uniform(-1.0, 1.0, 6) * np.array(
        [t_scale, t_scale, t_scale, ang_scale, ang_scale, ang_scale]
    )
    return mf.v2t(v)


# -- v2t / t2v ----------------------------------------------------------------


def test_v2t_zero_rotation():
    X = mf.v2t(np.array([1.0, 2.0, 3.0, 0.0, 0.0, 0.0]))
    assert np.allclose(X.R, np.eye(3))
    assert np.allclose(X.t, [1.0, 2.0, 3.0])


def test_v2t_elementary_z_rotation():
    X = mf.v2t(np.array([0, 0, 0, 0, 0, math.pi / 2]))
    assert np.allclose(X.R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
    assert np.allclose(X.t, 0.0)


def test_t2v_identity():
    assert np.allclose(mf.t2v(mf.Isometry3.identity()), np.zeros(6))


def test_chart_roundtrip_handles():
    for x in (
        np.array([0.1, 0.2, 0.3, 0.1, 0.2, 0.3]),
        np.array([-0.5, 0.2, 0.1, 0.3, -0.4, 0.25]),
    ):
        assert np.max(np.abs(mf.t2v(mf.v2t(x)) - x)) < 1e-10


def test_t2v_gimbal_lock_raises():
    X = mf.v2t(np.array([0, 0, 0, 0.2, math.pi / 2, -0.1]))
    with pytest.raises(mf.GimbalLock):
        mf.t2v(X)


def test_t2v_yaw_90_is_fine():
    # psi = pi/2 makes r11 vanish but the chart is perfectly regular there
    x = np.array([0.0, 0.0, 0.0, 0.0, 0.0, math.pi / 2])
    assert np.max(np.abs(mf.t2v(mf.v2t(x)) - x)) < 1e-12


@settings(max_examples=300, deadline=None)
@given(
    st.tuples(*[st.floats(-10, 10) for _ in range(3)]),
    st.floats(-math.pi, math.pi),
    st.floats(-math.pi / 2 + 0.1, math.pi / 2 - 0.1),
    st.floats(-math.pi, math.pi),
)
def test_chart_roundtrip_property(t, phi, gamma, psi):
    x = np.array([*t, phi, gamma, psi])
    back = mf.t2v(mf.v2t(x))
    assert np.max(np.abs(back - x)) < 1e-10


# -- group operations -----------------------------------------------------------


def test_compose_identity():
    rng = np.random.default_rng(0)
    X = rand_pose(rng)
    Y = mf.se3_compose(X, mf.Isometry3.identity())
    assert np.allclose(Y.matrix(), X.matrix(), atol=1e-14)


def test_compose_inverse_is_identity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        X = rand_pose(rng)
        I = mf.se3_compose(X, mf.se3_inverse(X))
        assert np.max(np.abs(I.matrix() - np.eye(4))) < 1e-9


def test_compose_matches_homogeneous_product():
    rng = np.random.default_rng(2)
    for _ in range(50):
        A, B = rand_pose(rng), rand_pose(rng)
        C = mf.se3_compose(A, B)
        assert np.max(np.abs(C.matrix() - A.matrix() @ B.matrix())) < 1e-12


def test_inverse_matches_homogeneous_inverse():
    rng = np.random.default_rng(3)
    for _ in range(50):
        X = rand_pose(rng)
        assert np.max(np.abs(mf.se3_inverse(X).matrix() - np.linalg.inv(X.matrix()))) < 1e-12


# -- boxplus / boxminus -----------------------------------------------------------


def test_boxplus_null_motion():
    rng = np.random.default_rng(4)
    X = rand_pose(rng)
    Y = mf.se3_boxplus(X, np.zeros(6))
    assert np.max(np.abs(Y.matrix() - X.matrix())) < 1e-12


def test_boxplus_identity_base():
    d = np.array([0.1, -0.2, 0.3, 0.05, -0.04, 0.03])
    Y = mf.se3_boxplus(mf.Isometry3.identity(), d)
    assert np.max(np.abs(Y.matrix() - mf.v2t(d).matrix())) < 1e-14


def test_boxplus_is_left_composition():
    rng = np.random.default_rng(5)
    X = rand_pose(rng)
    d = rng.uniform(-0.2, 0.2, 6)
    Y = mf.se3_boxplus(X, d)
    assert np.max(np.abs(Y.matrix() - mf.v2t(d).matrix() @ X.matrix())) < 1e-12


def test_boxminus_self_is_zero():
    rng = np.random.default_rng(6)
    X = rand_pose(rng)
    assert np.max(np.abs(mf.se3_boxminus(X, X))) < 1e-12


def test_boxminus_identity_base():
    d = np.array([0.02, 0.01, -0.03, 0.04, -0.02, 0.05])
    assert np.max(np.abs(mf.se3_boxminus(mf.v2t(d), mf.Isometry3.identity()) - d)) < 1e-12


def test_box_roundtrip():
    rng = np.random.default_rng(7)
    for _ in range(200):
        X = rand_pose(rng)
        d = rng.uniform(-1.0, 1.0, 6)
        d = d / max(1.0, np.linalg.norm(d) / 0.3)  # ||d|| <= 0.3
        back = mf.se3_boxminus(mf.se3_boxplus(X, d), X)
        assert np.max(np.abs(back - d)) < 1e-8


def test_boxminus_random_pair_roundtrips_through_chart():
    rng = np.random.default_rng(8)
    for _ in range(50):
        A, B = rand_pose(rng, ang_scale=0.5), rand_pose(rng, ang_scale=0.5)
        d = mf.se3_boxminus(A, B)
        assert np.all(np.isfinite(d))
        assert np.max(np.abs(mf.t2v(mf.v2t(d)) - d)) < 1e-10


def test_orthonormality_preserved_over_long_chains():
    rng = np.random.default_rng(9)
    X = mf.Isometry3.identity()
    for _ in range(10_000):
        X = mf.se3_boxplus(X, rng.uniform(-0.05, 0.05, 6))
    drift = np.max(np.abs(X.R.T @ X.R - np.eye(3)))
    assert drift < 1e-9
    assert np.linalg.det(X.R) > 0


# -- skew --------------------------------------------------------------------------


def test_skew_definition():
    S = mf.skew(np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(S, [[0, -3, 2], [3, 0, -1], [-2, 1, 0]])


@settings(max_examples=100, deadline=None)
@given(st.tuples(*[st.floats(-10, 10) for _ in range(6)]))
def test_skew_is_cross_product(vals):
    p, q = np.array(vals[:3]), np.array(vals[3:])
    assert np.allclose(mf.skew(p) @ q, np.cross(p, q), atol=1e-9)


def test_skew_antisymmetric_and_annihilates_self():
    p = np.array([0.3, -1.2, 2.5])
    S = mf.skew(p)
    assert np.array_equal(S.T, -S)
    assert np.allclose(S @ p, 0.0)


# -- SE(2) ----------------------------------------------------------------------------


def test_se2_boxplus_null():
    X = mf.Isometry2.from_xytheta(1.0, -2.0, 0.7)
    Y = mf.se2_boxplus(X, np.zeros(3))
    assert np.max(np.abs(Y.matrix() - X.matrix())) < 1e-12


def test_se2_boxminus_self():
    X = mf.Isometry2.from_xytheta(1.0, -2.0, 0.7)
    assert np.max(np.abs(mf.se2_boxminus(X, X))) < 1e-12


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-5, 5), st.floats(-5, 5), st.floats(-math.pi, math.pi),
    st.floats(-2, 2), st.floats(-2, 2), st.floats(-3.0, 3.0),
)
def test_se2_box_roundtrip(x, y, th, dx, dy, dth):
    X = mf.Isometry2.from_xytheta(x, y, th)
    d = np.array([dx, dy, dth])
    back = mf.se2_boxminus(mf.se2_boxplus(X, d), X)
    assert abs(back[0] - dx) < 1e-9
    assert abs(back[1] - dy) < 1e-9
    # theta comes back wrapped into (-pi, pi]
    assert abs(mf.wrap_angle(back[2] - dth)) < 1e-9


def test_wrap_angle_range():
    for th in np.linspace(-10, 10, 101):
        w = mf.wrap_angle(th)
        assert -math.pi < w <= math.pi
        assert abs(math.sin(w) - math.sin(th)) < 1e-12
        assert abs(math.cos(w) - math.cos(th)) < 1e-12


def test_se2_compose_matches_homogeneous():
    rng = np.random.default_rng(10)
    for _ in range(20):
        A = mf.Isometry2.from_xytheta(*rng.uniform(-3, 3, 2), rng.uniform(-3, 3))
        B = mf.Isometry2.from_xytheta(*rng.uniform(-3, 3, 2), rng.uniform(-3, 3))
        C = mf.se2_compose(A, B)
        assert np.max(np.abs(C.matrix() - A.matrix() @ B.matrix())) < 1e-12


def test_rotation_validity_invariants():
    rng = np.random.default_rng(11)
    X = rand_pose(rng)
    assert np.max(np.abs(X.R.T @ X.R - np.eye(3))) < 1e-9
    assert np.linalg.det(X.R) > 0
