"""Concrete factor library: ICP, projective registration, BA, pose graphs.

Error functions are written against scalar operations that accept either
floats or autodiff duals, so every factor can be linearized by forward-mode
AD; the point/projection factors additionally carry the closed-form
Jacobians (which the test-suite cross-checks against AD and finite
differences).  Pose-graph Jacobians are AD only.

Conventions: poses are sensor-to-world, perturbations compose on the left,
and a prediction that is undefined at the current estimate (point behind
the camera, projection off the image) makes the factor *invalid* for the
iteration rather than raising.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import manifold as mf
from .graph import FactorBase


class DepthTooSmall(ValueError):
    pass


@dataclass
class CameraIntrinsics:
    """Pinhole camera: K, optional image bounds, minimum usable depth."""

    K: np.ndarray
    image_size: tuple | None = None
    min_depth: float = 1e-3

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        if self.K.shape != (3, 3):
            raise ValueError("K must be 3x3")
        if not (self.K[0, 0] > 0 and self.K[1, 1] > 0):
            raise ValueError("focal lengths must be positive")
        if not self.min_depth > 0:
            raise ValueError("min_depth must be positive")

    @staticmethod
    def from_params(fx, fy, cx, cy, image_size=None, min_depth=1e-3):
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return CameraIntrinsics(K, image_size, min_depth)


@dataclass
class PointPair:
    moving: np.ndarray
    fixed: np.ndarray


# -- pure error/Jacobian functions -------------------------------------------


def icp_error(X: mf.Isometry3, moving, fixed):
    """e = R^T (p_m - t) - p_f."""
    return X.R.T @ (moving - X.t) - fixed


def icp_jacobian(X: mf.Isometry3, moving):
    """J = -R^T [ I | -skew(p_m) ]  (3x6)."""
    J = np.empty((3, 6))
    J[:, :3] = -X.R.T
    J[:, 3:] = X.R.T @ mf.skew(moving)
    return J


def hom(p, min_depth=1e-12):
    """Homogeneous division (x/z, y/z); raises when |z| is below min_depth."""
    if ad.absolute(p[2]) <= min_depth:
        raise DepthTooSmall(f"|z| = {ad._val(p[2])} below {min_depth}")
    return np.array([p[0] / p[2], p[1] / p[2]])


def hom_jacobian(p):
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    iz = 1.0 / z
    return np.array([[iz, 0.0, -x * iz * iz], [0.0, iz, -y * iz * iz]])


def _project(X, cam: CameraIntrinsics, point):
    """Camera-frame point, pixel projection and validity of `point` seen from X."""
    p_icp = X.R.T @ (point - X.t)
    p_cam = cam.K @ p_icp
    if p_cam[2] <= cam.min_depth:
        return p_cam, None
    pix = np.array([p_cam[0] / p_cam[2], p_cam[1] / p_cam[2]])
    if cam.image_size is not None:
        w, h = cam.image_size
        if pix[0] < 0.0 or pix[0] > w or pix[1] < 0.0 or pix[1] > h:
            return p_cam, None
    return p_cam, pix


def proj_error(X: mf.Isometry3, cam: CameraIntrinsics, moving, z):
    """e = hom(K X^{-1} p_m) - z, or None when the prediction is invalid."""
    _, pix = _project(X, cam, moving)
    if pix is None:
        return None
    return pix - z


def proj_jacobian(X: mf.Isometry3, cam: CameraIntrinsics, moving):
    """Chain rule: J_hom(p_cam) K J_icp  (2x6)."""
    p_cam, _ = _project(X, cam, moving)
    return hom_jacobian(p_cam) @ cam.K @ icp_jacobian(X, moving)


def ba_error(X_cam: mf.Isometry3, x_point, cam: CameraIntrinsics, z):
    _, pix = _project(X_cam, cam, x_point)
    if pix is None:
        return None
    return pix - z


def ba_jacobians(X_cam: mf.Isometry3, x_point, cam: CameraIntrinsics):
    """(2x6 pose block, 2x3 point block)."""
    p_cam, _ = _project(X_cam, cam, x_point)
    Jh = hom_jacobian(p_cam)
    J_pose = Jh @ cam.K @ icp_jacobian(X_cam, x_point)
    J_point = Jh @ cam.K @ X_cam.R.T
    return J_pose, J_point


def pgo_error(X_n: mf.Isometry3, X_m: mf.Isometry3, Z: mf.Isometry3):
    """e = t2v(Z^{-1} X_n^{-1} X_m); raises GimbalLock near the chart singularity."""
    h = mf.se3_compose(mf.se3_inverse(X_n), X_m)
    return mf.t2v(mf.se3_compose(mf.se3_inverse(Z), h))


def pgo_jacobians_elementwise(X_n, X_m, Z):
    """Reference AD route: scalar duals pushed through the generic error code."""

    def f(delta):
        Xn = mf.se3_boxplus(X_n, delta[:6])
        Xm = mf.se3_boxplus(X_m, delta[6:])
        return pgo_error(Xn, Xm, Z)

    J = ad.jacobian_of(f, np.zeros(12))
    return J[:, :6], J[:, 6:]


def _dual_mm(Av, Ap, Bv, Bp):
    """(value, partials) product of dual-valued matrices; None partials = constant."""
    v = Av @ Bv
    p = None
    if Ap is not None:
        p = np.einsum("ijk,jl->ilk", Ap, Bv)
    if Bp is not None:
        q = np.einsum("ij,jlk->ilk", Av, Bp)
        p = q if p is None else p + q
    return v, p


def _dual_mv(Av, Ap, xv, xp):
    v = Av @ xv
    p = None
    if Ap is not None:
        p = np.einsum("ijk,j->ik", Ap, xv)
    if xp is not None:
        q = Av @ xp
        p = q if p is None else p + q
    return v, p


def _boxplus_seed(X, total, offset):
    """Value/partials of v2t(d) * X at d = 0, partial slots [offset, offset+6).

    First-order, the chart rotation is I + skew(d_theta), so the rotation
    partials are the elementary generators applied to R and t.
    """
    Rp = np.zeros((3, 3, total))
    tp = np.zeros((3, total))
    for i in range(3):
        tp[i, offset + i] = 1.0
        G = mf.skew(np.eye(3)[i])
        Rp[:, :, offset + 3 + i] = G @ X.R
        tp[:, offset + 3 + i] = G @ X.t
    return X.R, Rp, X.t, tp


def pgo_jacobians(X_n, X_m, Z):
    """Two 6x6 blocks by forward-mode AD, batched over all 12 seed coordinates."""
    total = 12
    Rn, Rnp, tn, tnp = _boxplus_seed(X_n, total, 0)
    Rm, Rmp, tm, tmp = _boxplus_seed(X_m, total, 6)
    # W = (Xn [+] dn)^{-1}
    Rw, Rwp = Rn.T, np.transpose(Rnp, (1, 0, 2))
    twv, twp = _dual_mv(Rw, Rwp, tn, tnp)
    twv, twp = -twv, -twp
    # A = W * (Xm [+] dm)
    Rav, Rap = _dual_mm(Rw, Rwp, Rm, Rmp)
    hv, hp = _dual_mv(Rw, Rwp, tm, tmp)
    tav, tap = twv + hv, twp + hp
    # B = Z^{-1} * A
    Rzt = Z.R.T
    Rbv, Rbp = _dual_mm(Rzt, None, Rav, Rap)
    tbv = Rzt @ (tav - Z.t)
    tbp = np.einsum("ij,jk->ik", Rzt, tap)

    def s(v, p):
        return ad.Dual(v, p)

    cos_gamma = ad.hypot2(s(Rbv[0, 0], Rbp[0, 0]), s(Rbv[0, 1], Rbp[0, 1]))
    if cos_gamma.value < 1e-9:
        raise mf.GimbalLock("relative rotation near pitch = +-pi/2")
    rows = [
        s(tbv[0], tbp[0]),
        s(tbv[1], tbp[1]),
        s(tbv[2], tbp[2]),
        ad.atan2(s(-Rbv[1, 2], -Rbp[1, 2]), s(Rbv[2, 2], Rbp[2, 2])),
        ad.atan2(s(Rbv[0, 2], Rbp[0, 2]), cos_gamma),
        ad.atan2(s(-Rbv[0, 1], -Rbp[0, 1]), s(Rbv[0, 0], Rbp[0, 0])),
    ]
    J = np.array([r.partials for r in rows])
    return J[:, :6], J[:, 6:]


def se2_pgo_error(X_n: mf.Isometry2, X_m: mf.Isometry2, Z: mf.Isometry2):
    h = mf.se2_compose(mf.se2_inverse(X_n), X_m)
    v = mf.se2_t2v(mf.se2_compose(mf.se2_inverse(Z), h))
    v[2] = mf.wrap_angle(v[2])
    return v


def se2_landmark_error(X: mf.Isometry2, landmark, z):
    """e = R^T (l - t) - z, the landmark seen from the pose."""
    return X.R.T @ (landmark - X.t) - z


# -- factor classes -----------------------------------------------------------


def ad_jacobians(factor, values):
    """Jacobian blocks of a factor's error with respect to each variable chart."""
    dims = [mf.perturbation_dim(v) for v in values]
    total = sum(dims)

    def f(delta):
        perturbed = []
        ofs = 0
        for v, d in zip(values, dims):
            perturbed.append(mf.boxplus(v, delta[ofs : ofs + d]))
            ofs += d
        e = factor.error(perturbed)
        if e is None:
            raise ValueError("cannot differentiate an invalid factor")
        return e

    J = ad.jacobian_of(f, np.zeros(total))
    blocks = []
    ofs = 0
    for d in dims:
        blocks.append(J[:, ofs : ofs + d])
        ofs += d
    return blocks


class ADFactor(FactorBase):
    """Factor whose Jacobians come from AD of its error function."""

    def jacobians(self, values):
        return ad_jacobians(self, values)


class IcpFactor(FactorBase):
    """Point-to-point registration term on one SE(3) variable."""

    type_tag = "icp"

    def __init__(self, key, variable, moving, fixed, information=None, kernel=None):
        information = np.eye(3) if information is None else information
        super().__init__(key, (variable,), np.asarray(fixed, dtype=float), information, kernel)
        self.moving = np.asarray(moving, dtype=float)

    def bind_pair(self, moving, fixed):
        self.moving = np.asarray(moving, dtype=float)
        self.measurement = np.asarray(fixed, dtype=float)

    def error(self, values):
        return icp_error(values[0], self.moving, self.measurement)

    def jacobians(self, values):
        return [icp_jacobian(values[0], self.moving)]


class ProjectiveFactor(FactorBase):
    """2D projection of a known 3D point, camera pose unknown."""

    type_tag = "projective"

    def __init__(self, key, variable, cam, moving, z, information=None, kernel=None):
        information = np.eye(2) if information is None else information
        super().__init__(key, (variable,), np.asarray(z, dtype=float), information, kernel)
        self.cam = cam
        self.moving = np.asarray(moving, dtype=float)

    def bind_pair(self, moving, z):
        self.moving = np.asarray(moving, dtype=float)
        self.measurement = np.asarray(z, dtype=float)

    def error(self, values):
        return proj_error(values[0], self.cam, self.moving, self.measurement)

    def jacobians(self, values):
        return [proj_jacobian(values[0], self.cam, self.moving)]


class BaFactor(FactorBase):
    """Projection of an unknown 3D point from an unknown camera pose."""

    type_tag = "ba"

    def __init__(self, key, pose_variable, point_variable, cam, z, information=None, kernel=None):
        information = np.eye(2) if information is None else information
        super().__init__(
            key, (pose_variable, point_variable), np.asarray(z, dtype=float), information, kernel
        )
        self.cam = cam

    def error(self, values):
        return ba_error(values[0], values[1], self.cam, self.measurement)

    def jacobians(self, values):
        return list(ba_jacobians(values[0], values[1], self.cam))


class PgoFactor(ADFactor):
    """Relative SE(3) measurement between two poses."""

    type_tag = "pgo3"

    def __init__(self, key, from_variable, to_variable, measurement, information=None, kernel=None):
        information = np.eye(6) if information is None else information
        super().__init__(key, (from_variable, to_variable), measurement, information, kernel)

    def error(self, values):
        return pgo_error(values[0], values[1], self.measurement)

    def jacobians(self, values):
        return list(pgo_jacobians(values[0], values[1], self.measurement))


class Se2PgoFactor(ADFactor):
    """Relative SE(2) measurement between two poses."""

    type_tag = "pgo2"

    def __init__(self, key, from_variable, to_variable, measurement, information=None, kernel=None):
        information = np.eye(3) if information is None else information
        super().__init__(key, (from_variable, to_variable), measurement, information, kernel)

    def error(self, values):
        return se2_pgo_error(values[0], values[1], self.measurement)


class Se2LandmarkFactor(ADFactor):
    """2D landmark observed from an SE(2) pose, in the pose frame."""

    type_tag = "landmark2"

    def __init__(self, key, pose_variable, landmark_variable, z, information=None, kernel=None):
        information = np.eye(2) if information is None else information
        super().__init__(
            key, (pose_variable, landmark_variable), np.asarray(z, dtype=float), information, kernel
        )

    def error(self, values):
        return se2_landmark_error(values[0], values[1], self.measurement)


class AffineFactor(FactorBase):
    """h(x) = sum_i A_i x_i + c over Euclidean variables; exact under one GN step."""

    type_tag = "affine"

    def __init__(self, key, variables, A_blocks, c, z, information=None, kernel=None):
        z = np.asarray(z, dtype=float)
        information = np.eye(z.size) if information is None else information
        super().__init__(key, variables, z, information, kernel)
        self.A_blocks = [np.asarray(A, dtype=float) for A in A_blocks]
        self.c = np.asarray(c, dtype=float)
        if len(self.A_blocks) != len(self.variables):
            raise ValueError("one A block per variable required")

    def error(self, values):
        h = self.c.astype(object) if any(np.asarray(v).dtype == object for v in values) else self.c.copy()
        for A, x in zip(self.A_blocks, values):
            h = h + A @ x
        return h - self.measurement

    def jacobians(self, values):
        return [A.copy() for A in self.A_blocks]
