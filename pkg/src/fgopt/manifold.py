"""SE(3) and SE(2) group elements with minimal-chart box operators.

Poses are stored extended (rotation matrix + translation) while increments
live on a minimal Euclidean chart: 6 coordinates (3 translation, 3 Euler
angles applied as Rx*Ry*Rz) for SE(3), 3 coordinates (x, y, theta) for
SE(2).  The chart element is always composed on the LEFT:

    X [+] dx = v2t(dx) * X

and the inverse operator returns the left chart coordinates of Xa seen
from Xb, so that (X [+] d) [-] X == d.

All functions accept matrices of plain floats or of autodiff duals; the
rotation re-orthonormalization step (an SVD projection that scrubs
round-off drift) is applied only on the float path, where it is exactly
the identity to first order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class GimbalLock(ValueError):
    """Euler chart is singular: |pitch| is at (or within ~1e-9 of) pi/2."""


_COS_GAMMA_MIN = 1e-9


def _is_float_mat(M):
    return isinstance(M, np.ndarray) and M.dtype != object


def reorthonormalize(R):
    """Project a nearly-orthonormal matrix onto the closest rotation."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(R.shape[0])
    D[-1, -1] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


@dataclass
class Isometry3:
    """Rigid transform in 3D: x -> R x + t."""

    R: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity():
        return Isometry3(np.eye(3), np.zeros(3))

    def matrix(self):
        """4x4 homogeneous form."""
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    @staticmethod
    def from_matrix(M):
        return Isometry3(np.array(M[:3, :3], dtype=float), np.array(M[:3, 3], dtype=float))

    def apply(self, p):
        return self.R @ p + self.t

    def copy(self):
        return Isometry3(self.R.copy(), self.t.copy())


@dataclass
class Isometry2:
    """Rigid transform in 2D; theta is kept wrapped to (-pi, pi] on the chart."""

    R: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity():
        return Isometry2(np.eye(2), np.zeros(2))

    @staticmethod
    def from_xytheta(x, y, theta):
        return se2_v2t(np.array([x, y, theta], dtype=float))

    def matrix(self):
        M = np.eye(3)
        M[:2, :2] = self.R
        M[:2, 2] = self.t
        return M

    def apply(self, p):
        return self.R @ p + self.t

    def copy(self):
        return Isometry2(self.R.copy(), self.t.copy())


def skew(p):
    """Cross-product matrix: skew(p) @ q == cross(p, q)."""
    z = p[0] * 0.0  # keeps dtype (float or dual) of the input
    return np.array(
        [
            [z, -p[2], p[1]],
            [p[2], z, -p[0]],
            [-p[1], p[0], z],
        ]
    )


def rotation_xyz(phi, gamma, psi):
    """Rx(phi) Ry(gamma) Rz(psi), dual-aware."""
    cf, sf = ad.cos(phi), ad.sin(phi)
    cg, sg = ad.cos(gamma), ad.sin(gamma)
    cp, sp = ad.cos(psi), ad.sin(psi)
    return np.array(
        [
            [cg * cp, -(cg * sp), sg],
            [cf * sp + sf * cp * sg, cf * cp - sf * sg * sp, -(cg * sf)],
            [sf * sp - cf * cp * sg, sf * cp + cf * sg * sp, cg * cf],
        ]
    )


def v2t(dx) -> Isometry3:
    """Chart vector (dx, dy, dz, dphi, dgamma, dpsi) -> SE(3) element."""
    dx = np.asarray(dx)
    R = rotation_xyz(dx[3], dx[4], dx[5])
    t = np.array([dx[0], dx[1], dx[2]])
    return Isometry3(R, t)


def t2v(X: Isometry3):
    """SE(3) element -> chart vector; raises GimbalLock near |gamma| = pi/2.

    Angles are recovered from the rotation matrix:
        phi   = atan2(-r23, r33)
        psi   = atan2(-r12, r11)
        gamma = atan2(r13, cos(gamma))
    with cos(gamma) evaluated as hypot(r11, r12), which equals r11/cos(psi)
    on the chart domain but stays well conditioned when psi is near +-pi/2.
    """
    R = X.R
    cos_gamma = ad.hypot2(R[0, 0], R[0, 1])
    if ad._val(cos_gamma) < _COS_GAMMA_MIN:
        raise GimbalLock("rotation within ~1e-9 of pitch = +-pi/2; chart not invertible")
    phi = ad.atan2(-R[1, 2], R[2, 2])
    psi = ad.atan2(-R[0, 1], R[0, 0])
    gamma = ad.atan2(R[0, 2], cos_gamma)
    return np.array([X.t[0], X.t[1], X.t[2], phi, gamma, psi])


def se3_compose(Xa: Isometry3, Xb: Isometry3) -> Isometry3:
    R = Xa.R @ Xb.R
    t = Xa.t + Xa.R @ Xb.t
    if _is_float_mat(R):
        R = reorthonormalize(R)
    return Isometry3(R, t)


def se3_inverse(X: Isometry3) -> Isometry3:
    Rt = X.R.T
    return Isometry3(Rt, -(Rt @ X.t))


def se3_boxplus(X: Isometry3, dx) -> Isometry3:
    """Left perturbation: v2t(dx) * X."""
    return se3_compose(v2t(dx), X)


def se3_boxminus(Xa: Isometry3, Xb: Isometry3):
    """Chart coordinates d such that v2t(d) * Xb == Xa."""
    return t2v(se3_compose(Xa, se3_inverse(Xb)))


# -- SE(2) -------------------------------------------------------------------


def wrap_angle(theta):
    """Wrap to (-pi, pi]; the shift is a constant, so dual partials pass through."""
    if isinstance(theta, ad.Dual):
        return ad.Dual(wrap_angle(theta.value), theta.partials.copy())
    w = theta % (2.0 * math.pi)
    if w > math.pi:
        w -= 2.0 * math.pi
    return w


def rotation2(theta):
    c, s = ad.cos(theta), ad.sin(theta)
    return np.array([[c, -s], [s, c]])


def se2_v2t(dx) -> Isometry2:
    dx = np.asarray(dx)
    return Isometry2(rotation2(dx[2]), np.array([dx[0], dx[1]]))


def se2_t2v(X: Isometry2):
    theta = ad.atan2(X.R[1, 0], X.R[0, 0])
    return np.array([X.t[0], X.t[1], theta])


def se2_compose(Xa: Isometry2, Xb: Isometry2) -> Isometry2:
    R = Xa.R @ Xb.R
    t = Xa.t + Xa.R @ Xb.t
    if _is_float_mat(R):
        R = reorthonormalize(R)
    return Isometry2(R, t)


def se2_inverse(X: Isometry2) -> Isometry2:
    Rt = X.R.T
    return Isometry2(Rt, -(Rt @ X.t))


def se2_boxplus(X: Isometry2, dx) -> Isometry2:
    return se2_compose(se2_v2t(dx), X)


def se2_boxminus(Xa: Isometry2, Xb: Isometry2):
    v = se2_t2v(se2_compose(Xa, se2_inverse(Xb)))
    v[2] = wrap_angle(v[2])
    return v


# -- generic dispatch over supported variable values -------------------------


def perturbation_dim(value) -> int:
    if isinstance(value, Isometry3):
        return 6
    if isinstance(value, Isometry2):
        return 3
    return int(np.asarray(value).size)


def boxplus(value, delta):
    """Type-dispatched [+]: manifold charts for isometries, addition for vectors."""
    if isinstance(value, Isometry3):
        return se3_boxplus(value, delta)
    if isinstance(value, Isometry2):
        return se2_boxplus(value, delta)
    return value + np.asarray(delta)


def boxminus(va, vb):
    if isinstance(va, Isometry3):
        return se3_boxminus(va, vb)
    if isinstance(va, Isometry2):
        return se2_boxminus(va, vb)
    return np.asarray(va) - np.asarray(vb)


def value_equal(a, b) -> bool:
    if isinstance(a, Isometry3) and isinstance(b, Isometry3):
        return np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t)
    if isinstance(a, Isometry2) and isinstance(b, Isometry2):
        return np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t)
    return np.array_equal(np.asarray(a), np.asarray(b))


def copy_value(v):
    if isinstance(v, (Isometry3, Isometry2)):
        return v.copy()
    return np.array(v, dtype=float)


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix (2D or 3D)."""
    n = R.shape[0]
    if n == 2:
        return abs(math.atan2(R[1, 0], R[0, 0]))
    c = (np.trace(R) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))
