"""Problem I/O, synthetic benchmarks, noise injection, init and metrics.

Text formats (documented in the README, byte-exact round-trips):

  pose graph    VERTEX_SE2 / VERTEX_XY / VERTEX_SE3:QUAT / EDGE_SE2 /
                EDGE_SE2_XY / EDGE_SE3:QUAT / FIX records, whitespace
                separated, information matrices as row-major upper triangles
  bundles       counts header, observations, 9 camera params (Rodrigues
                rotation, translation, focal, two ignored distortions) and
                3 point coords, one value per line
  point clouds  one `x y z` line per point
  matches       one `moving_index fixed_index` line per correspondence

Floats are printed with repr() (shortest string that parses back to the
same double).  Rotations are stored as matrices internally, so saving
needs a matrix -> (quaternion | angle | rodrigues) extraction; to make
save -> load -> save byte-identical those extractions iterate the
extract/rebuild map until it enters a cycle and return a canonical (bitwise
smallest) cycle member, which is a fixed point of the full print/parse trip.

Randomness comes from an explicit counter-based stream (splitmix64 mixing,
Box-Muller normals) so that seeded runs are reproducible independently of
any library RNG; the exact construction is in :class:`StreamRng`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import manifold as mf
from .factors import BaFactor, CameraIntrinsics, PgoFactor, Se2LandmarkFactor, Se2PgoFactor
from .graph import FactorGraph, Variable, VariableStatus


class ParseError(ValueError):
    def __init__(self, line_no, message):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class UnknownTag(ParseError):
    pass


class NonPSDInformation(ParseError):
    pass


class KeyMismatch(ValueError):
    pass


class Disconnected(RuntimeError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"variables unreachable from root: {self.missing}")


# -- counter-based random stream ----------------------------------------------

_U64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(x):
    x &= _U64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _U64
    return x ^ (x >> 31)


class StreamRng:
    """Deterministic stream: value i is mix64(seed + (i+1)*golden).

    mix64 is the splitmix64 finalizer; uniforms are u64 / 2^64 in [0, 1);
    normal variates come from Box-Muller over consecutive uniforms (the
    pair's second member is cached).  Reproducible from (seed, counter)
    alone, with no hidden state, so any implementation can replay a stream.
    """

    def __init__(self, seed):
        self.seed = int(seed) & _U64
        self.counter = 0
        self._spare = None

    def next_u64(self):
        self.counter += 1
        return _mix64((self.seed + self.counter * _GOLDEN) & _U64)

    def uniform(self):
        return self.next_u64() / 2.0**64

    def normal(self):
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = (self.next_u64() + 1) / 2.0**64  # (0, 1]
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def normals(self, n):
        return np.array([self.normal() for _ in range(n)])


# -- float/rotation text canonicalization -------------------------------------


def _fmt(x):
    return repr(float(x))


def _quat_to_rot(q):
    qx, qy, qz, qw = q
    n = qx * qx + qy * qy + qz * qz + qw * qw
    s = 2.0 / n
    return np.array(
        [
            [1 - s * (qy * qy + qz * qz), s * (qx * qy - qz * qw), s * (qx * qz + qy * qw)],
            [s * (qx * qy + qz * qw), 1 - s * (qx * qx + qz * qz), s * (qy * qz - qx * qw)],
            [s * (qx * qz - qy * qw), s * (qy * qz + qx * qw), 1 - s * (qx * qx + qy * qy)],
        ]
    )


def _rot_to_quat(R):
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    cand = [tr, R[0, 0], R[1, 1], R[2, 2]]
    i = int(np.argmax(cand))
    if i == 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif i == 1:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif i == 2:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    q = np.asarray(q, dtype=float)
    q = q / math.sqrt(float(np.sum(q * q)))
    if q[3] < 0:
        q = -q
    return q + 0.0  # scrub -0.0 so text output is canonical


def _stable_extract(start, rebuild, extract, max_iters=4096):
    """Iterate extract(rebuild(.)) until it cycles; return the canonical member.

    The returned representation r satisfies extract(rebuild(r)) -> r under
    the same canonicalization, which is exactly what byte-stable text
    round-trips need.
    """
    cur = np.atleast_1d(np.asarray(start, dtype=float))
    seen = {cur.tobytes(): 0}
    hist = [cur]
    for _ in range(max_iters):
        cur = np.atleast_1d(np.asarray(extract(rebuild(cur)), dtype=float))
        key = cur.tobytes()
        if key in seen:
            cyc = hist[seen[key] :]
            return min(cyc, key=lambda a: a.tobytes())
        seen[key] = len(hist)
        hist.append(cur)
    return cur


def stable_quat(R):
    return _stable_extract(_rot_to_quat(R), _quat_to_rot, _rot_to_quat)


def stable_angle(R2):
    theta = math.atan2(R2[1, 0], R2[0, 0]) + 0.0
    out = _stable_extract(
        [theta],
        lambda a: mf.rotation2(float(a[0])),
        lambda M: [math.atan2(M[1, 0], M[0, 0]) + 0.0],
    )
    return float(out[0])


def _rodrigues_to_rot(r):
    theta = math.sqrt(float(np.dot(r, r)))
    if theta < 1e-12:
        return np.eye(3) + mf.skew(r)
    axis = np.asarray(r, dtype=float) / theta
    K = mf.skew(axis)
    return np.eye(3) + math.sin(theta) * K + (1.0 - math.cos(theta)) * (K @ K)


def _rot_to_rodrigues(R):
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = math.sqrt(float(np.dot(w, w)))
    c = (float(np.trace(R)) - 1.0) / 2.0
    c = min(1.0, max(-1.0, c))
    if s < 1e-12:
        if c > 0.0:
            return w + 0.0
        # angle near pi: axis from the dominant diagonal entry
        A = (R + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(A)))
        axis = A[:, i] / math.sqrt(max(A[i, i], np.finfo(float).tiny))
        axis = axis / math.sqrt(float(np.dot(axis, axis)))
        return axis * math.acos(c) + 0.0
    theta = math.atan2(s, c)
    return (w / s) * theta + 0.0


def stable_rodrigues(R):
    return _stable_extract(_rot_to_rodrigues(R), _rodrigues_to_rot, _rot_to_rodrigues)


# -- pose-graph text format ----------------------------------------------------


def _upper_tri(values, n):
    M = np.zeros((n, n))
    k = 0
    for r in range(n):
        for c in range(r, n):
            M[r, c] = values[k]
            M[c, r] = values[k]
            k += 1
    return M


def _upper_tri_values(M):
    n = M.shape[0]
    return [M[r, c] for r in range(n) for c in range(r, n)]


def load_pose_graph(path) -> FactorGraph:
    """Parse the plain-text pose-graph format into a FactorGraph."""
    g = FactorGraph()
    fixes = []
    next_factor = 0
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            tag = tok[0]
            try:
                if tag == "VERTEX_SE2":
                    if len(tok) != 5:
                        raise ParseError(line_no, f"VERTEX_SE2 expects 4 fields, got {len(tok) - 1}")
                    vid = int(tok[1])
                    x, y, th = (float(t) for t in tok[2:5])
                    g.add_variable(Variable(vid, mf.Isometry2(mf.rotation2(th), np.array([x, y]))))
                elif tag == "VERTEX_XY":
                    if len(tok) != 4:
                        raise ParseError(line_no, f"VERTEX_XY expects 3 fields, got {len(tok) - 1}")
                    vid = int(tok[1])
                    g.add_variable(Variable(vid, np.array([float(tok[2]), float(tok[3])])))
                elif tag == "VERTEX_SE3:QUAT":
                    if len(tok) != 9:
                        raise ParseError(
                            line_no, f"VERTEX_SE3:QUAT expects 8 fields, got {len(tok) - 1}"
                        )
                    vid = int(tok[1])
                    t = np.array([float(v) for v in tok[2:5]])
                    q = np.array([float(v) for v in tok[5:9]])
                    g.add_variable(Variable(vid, mf.Isometry3(_quat_to_rot(q), t)))
                elif tag == "EDGE_SE2":
                    if len(tok) != 12:
                        raise ParseError(line_no, f"EDGE_SE2 expects 11 fields, got {len(tok) - 1}")
                    i, j = int(tok[1]), int(tok[2])
                    dx, dy, dth = (float(v) for v in tok[3:6])
                    info = _upper_tri([float(v) for v in tok[6:12]], 3)
                    Z = mf.Isometry2(mf.rotation2(dth), np.array([dx, dy]))
                    _add_edge(g, line_no, Se2PgoFactor(next_factor, i, j, Z, info))
                    next_factor += 1
                elif tag == "EDGE_SE2_XY":
                    if len(tok) != 8:
                        raise ParseError(line_no, f"EDGE_SE2_XY expects 7 fields, got {len(tok) - 1}")
                    i, j = int(tok[1]), int(tok[2])
                    z = np.array([float(tok[3]), float(tok[4])])
                    info = _upper_tri([float(v) for v in tok[5:8]], 2)
                    _add_edge(g, line_no, Se2LandmarkFactor(next_factor, i, j, z, info))
                    next_factor += 1
                elif tag == "EDGE_SE3:QUAT":
                    if len(tok) != 31:
                        raise ParseError(
                            line_no, f"EDGE_SE3:QUAT expects 30 fields, got {len(tok) - 1}"
                        )
                    i, j = int(tok[1]), int(tok[2])
                    t = np.array([float(v) for v in tok[3:6]])
                    q = np.array([float(v) for v in tok[6:10]])
                    info = _upper_tri([float(v) for v in tok[10:31]], 6)
                    Z = mf.Isometry3(_quat_to_rot(q), t)
                    _add_edge(g, line_no, PgoFactor(next_factor, i, j, Z, info))
                    next_factor += 1
                elif tag == "FIX":
                    if len(tok) != 2:
                        raise ParseError(line_no, f"FIX expects 1 field, got {len(tok) - 1}")
                    fixes.append((line_no, int(tok[1])))
                else:
                    raise UnknownTag(line_no, f"unknown record tag {tag!r}")
            except ParseError:
                raise
            except ValueError as exc:
                raise ParseError(line_no, str(exc)) from None
            except KeyError as exc:
                raise ParseError(line_no, f"bad reference: {exc}") from None
    for line_no, vid in fixes:
        if vid not in g.variables:
            raise ParseError(line_no, f"FIX references missing variable {vid}")
        g.variables[vid].status = VariableStatus.FIXED
    return g


def _add_edge(g, line_no, factor):
    try:
        g.add_factor(factor)
    except ValueError as exc:
        if "positive semi-definite" in str(exc) or "symmetric" in str(exc):
            raise NonPSDInformation(line_no, str(exc)) from None
        raise ParseError(line_no, str(exc)) from None
    except KeyError as exc:
        raise ParseError(line_no, f"edge references missing vertex: {exc}") from None


def save_pose_graph(graph: FactorGraph, path):
    lines = []
    for key in sorted(graph.variables):
        v = graph.variables[key]
        val = v.value
        if isinstance(val, mf.Isometry3):
            q = stable_quat(val.R)
            fields = [_fmt(x) for x in (*val.t, *q)]
            lines.append(f"VERTEX_SE3:QUAT {key} " + " ".join(fields))
        elif isinstance(val, mf.Isometry2):
            th = stable_angle(val.R)
            lines.append(
                f"VERTEX_SE2 {key} {_fmt(val.t[0])} {_fmt(val.t[1])} {_fmt(th)}"
            )
        elif isinstance(val, np.ndarray) and val.size == 2:
            lines.append(f"VERTEX_XY {key} {_fmt(val[0])} {_fmt(val[1])}")
        else:
            raise UnknownTag(0, f"variable {key} has no pose-graph record type")
    for key in sorted(graph.variables):
        if graph.variables[key].status == VariableStatus.FIXED:
            lines.append(f"FIX {key}")
    for key in sorted(graph.factors):
        f = graph.factors[key]
        i, j = f.variables[0], f.variables[-1]
        if isinstance(f, PgoFactor):
            Z = f.measurement
            q = stable_quat(Z.R)
            vals = [_fmt(x) for x in (*Z.t, *q)] + [_fmt(x) for x in _upper_tri_values(f.information)]
            lines.append(f"EDGE_SE3:QUAT {i} {j} " + " ".join(vals))
        elif isinstance(f, Se2PgoFactor):
            Z = f.measurement
            th = stable_angle(Z.R)
            vals = [_fmt(Z.t[0]), _fmt(Z.t[1]), _fmt(th)] + [
                _fmt(x) for x in _upper_tri_values(f.information)
            ]
            lines.append(f"EDGE_SE2 {i} {j} " + " ".join(vals))
        elif isinstance(f, Se2LandmarkFactor):
            vals = [_fmt(f.measurement[0]), _fmt(f.measurement[1])] + [
                _fmt(x) for x in _upper_tri_values(f.information)
            ]
            lines.append(f"EDGE_SE2_XY {i} {j} " + " ".join(vals))
        else:
            raise UnknownTag(0, f"factor {key} ({f.type_tag}) has no pose-graph record type")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


# -- BAL-style bundle adjustment format ----------------------------------------


def load_bal(path) -> FactorGraph:
    """Counts header + observations + camera/point blocks -> BA factor graph.

    Camera parameters are world-to-camera (Rodrigues rotation, translation,
    focal length, two distortion terms which are ignored); poses are stored
    sensor-to-world, i.e. inverted at load.  Omega = I for every factor.
    """
    with open(path) as fh:
        tokens = fh.read().split()
    pos = 0

    def take(n, line_hint):
        nonlocal pos
        if pos + n > len(tokens):
            raise ParseError(line_hint, "unexpected end of file (counts mismatch)")
        out = tokens[pos : pos + n]
        pos += n
        return out

    try:
        n_cam, n_pts, n_obs = (int(x) for x in take(3, 1))
    except ValueError:
        raise ParseError(1, "bad counts header") from None
    obs = []
    for k in range(n_obs):
        c, p, x, y = take(4, 2)
        try:
            obs.append((int(c), int(p), float(x), float(y)))
        except ValueError:
            raise ParseError(2, f"bad observation record {k}") from None
    g = FactorGraph()
    cams = []
    for ci in range(n_cam):
        vals = take(9, 3)
        try:
            r = np.array([float(v) for v in vals[:3]])
            t = np.array([float(v) for v in vals[3:6]])
            f = float(vals[6])
        except ValueError:
            raise ParseError(3, f"bad camera block {ci}") from None
        X = mf.se3_inverse(mf.Isometry3(_rodrigues_to_rot(r), t))
        g.add_variable(Variable(ci, X))
        cams.append(CameraIntrinsics.from_params(f, f, 0.0, 0.0))
    for pi in range(n_pts):
        vals = take(3, 4)
        try:
            g.add_variable(Variable(n_cam + pi, np.array([float(v) for v in vals])))
        except ValueError:
            raise ParseError(4, f"bad point block {pi}") from None
    if pos != len(tokens):
        raise ParseError(5, f"{len(tokens) - pos} trailing values (counts mismatch)")
    for k, (c, p, x, y) in enumerate(obs):
        if not 0 <= c < n_cam or not 0 <= p < n_pts:
            raise ParseError(2, f"observation {k} references camera {c} / point {p}")
        g.add_factor(BaFactor(k, c, n_cam + p, cams[c], np.array([x, y]), np.eye(2)))
    return g


def save_bal(graph: FactorGraph, path):
    cam_keys = sorted(k for k, v in graph.variables.items() if isinstance(v.value, mf.Isometry3))
    pt_keys = sorted(
        k
        for k, v in graph.variables.items()
        if isinstance(v.value, np.ndarray) and v.value.size == 3
    )
    cam_idx = {k: i for i, k in enumerate(cam_keys)}
    pt_idx = {k: i for i, k in enumerate(pt_keys)}
    factors = [graph.factors[k] for k in sorted(graph.factors)]
    lines = [f"{len(cam_keys)} {len(pt_keys)} {len(factors)}"]
    focals = {}
    for f in factors:
        if not isinstance(f, BaFactor):
            raise UnknownTag(0, f"factor {f.key} ({f.type_tag}) has no bundle record type")
        c, p = cam_idx[f.variables[0]], pt_idx[f.variables[1]]
        focals[c] = f.cam.K[0, 0]
        lines.append(f"{c} {p} {_fmt(f.measurement[0])} {_fmt(f.measurement[1])}")
    for k in cam_keys:
        Xwc = mf.se3_inverse(graph.variables[k].value)
        rod = stable_rodrigues(Xwc.R)
        for v in rod:
            lines.append(_fmt(v))
        for v in Xwc.t:
            lines.append(_fmt(v))
        lines.append(_fmt(focals.get(cam_idx[k], 1.0)))
        lines.append(_fmt(0.0))
        lines.append(_fmt(0.0))
    for k in pt_keys:
        for v in graph.variables[k].value:
            lines.append(_fmt(v))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# -- point clouds and correspondences ------------------------------------------


def load_point_cloud(path):
    pts = []
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if len(tok) != 3:
                raise ParseError(line_no, f"point needs 3 coordinates, got {len(tok)}")
            try:
                pts.append([float(t) for t in tok])
            except ValueError:
                raise ParseError(line_no, "bad coordinate") from None
    return np.array(pts).reshape(-1, 3)


def save_point_cloud(points, path):
    with open(path, "w") as fh:
        for p in points:
            fh.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")


def load_correspondences(path):
    pairs = []
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if len(tok) != 2:
                raise ParseError(line_no, f"correspondence needs 2 indices, got {len(tok)}")
            try:
                pairs.append((int(tok[0]), int(tok[1])))
            except ValueError:
                raise ParseError(line_no, "bad index") from None
    return pairs


def save_correspondences(pairs, path):
    with open(path, "w") as fh:
        for m, f in pairs:
            fh.write(f"{m} {f}\n")


# -- synthetic benchmark generation ---------------------------------------------


@dataclass
class EdgeRules:
    """Which non-odometry edges a generator adds.

    closure_prob < 1 keeps each candidate loop closure with that
    probability, sampled from the run's random stream.
    """

    loop_closures: bool = True
    closure_prob: float = 1.0


@dataclass
class NoiseSpec:
    """Diagonal measurement-noise variances (m^2 / rad^2) plus the stream seed."""

    sigma_t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma_r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma_land: np.ndarray = field(default_factory=lambda: np.zeros(3))
    seed: int = 0

    def __post_init__(self):
        self.sigma_t = np.asarray(self.sigma_t, dtype=float)
        self.sigma_r = np.asarray(self.sigma_r, dtype=float)
        self.sigma_land = np.asarray(self.sigma_land, dtype=float)
        for a in (self.sigma_t, self.sigma_r, self.sigma_land):
            if np.any(a < 0):
                raise ValueError("noise variances must be non-negative")


@dataclass
class TrajectoryMetrics:
    ate_pos: float = 0.0
    ate_rot: float = 0.0
    e_pos: float = 0.0
    e_rot: float = 0.0


def _heading_frame(pos, nxt, up_hint):
    """Rotation whose x-axis points along the sweep and z-axis near up_hint."""
    x = nxt - pos
    nx = np.linalg.norm(x)
    x = np.array([1.0, 0.0, 0.0]) if nx < 1e-12 else x / nx
    z = up_hint - np.dot(up_hint, x) * x
    nz = np.linalg.norm(z)
    if nz < 1e-9:
        z = np.array([0.0, 0.0, 1.0]) - x * x[2]
        nz = np.linalg.norm(z)
    z = z / nz
    y = np.cross(z, x)
    return mf.reorthonormalize(np.column_stack([x, y, z]))


def _shape_positions(kind, n):
    s = (np.arange(n) + 0.5) / n
    if kind == "ring":
        radius = max(n / (2.0 * math.pi), 2.0)
        ang = 2.0 * math.pi * s
        pos = np.column_stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(n)])
        up = np.tile([0.0, 0.0, 1.0], (n, 1))
        per_sweep = n  # single loop; the only closure is last->first
    elif kind == "grid":
        side = max(2, math.ceil(math.sqrt(n)))
        xs, ys = [], []
        for row in range(side):
            cols = range(side) if row % 2 == 0 else range(side - 1, -1, -1)
            for col in cols:
                xs.append(float(col))
                ys.append(float(row))
        pos = np.column_stack([xs[:n], ys[:n], np.zeros(n)])
        up = np.tile([0.0, 0.0, 1.0], (n, 1))
        per_sweep = side
    elif kind == "sphere":
        radius = 5.0
        sweeps = max(3, int(round(math.sqrt(n))))
        polar = math.pi * s
        azim = 2.0 * math.pi * sweeps * s
        pos = radius * np.column_stack(
            [np.sin(polar) * np.cos(azim), np.sin(polar) * np.sin(azim), np.cos(polar)]
        )
        up = pos / radius  # radially outward
        per_sweep = max(1, n // sweeps)
    elif kind == "torus":
        major, minor = 6.0, 2.0
        sweeps = max(3, int(round(math.sqrt(n))))
        u = 2.0 * math.pi * sweeps * s  # around the tube
        phi = 2.0 * math.pi * s  # around the ring
        ring = major + minor * np.cos(u)
        pos = np.column_stack([ring * np.cos(phi), ring * np.sin(phi), minor * np.sin(u)])
        center = np.column_stack([major * np.cos(phi), major * np.sin(phi), np.zeros(len(s))])
        up = pos - center
        up = up / np.linalg.norm(up, axis=1)[:, None]
        per_sweep = max(1, n // sweeps)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    return pos, up, per_sweep


def generate_synthetic(kind, n_poses, edge_rules=None, seed=0):
    """Ground-truth + measured pose graphs on a parametric shape.

    Odometry edges connect consecutive poses; loop closures follow the
    shape's sweep structure (ring: last->first, grid: vertical neighbours,
    sphere/torus: ring-adjacent sweeps).  Every measurement is the exact
    relative pose, so the ground-truth graph has chi2 == 0.
    """
    if n_poses < 3:
        raise ValueError("need at least 3 poses")
    rules = edge_rules or EdgeRules()
    rng = StreamRng(seed)
    pos, up, per_sweep = _shape_positions(kind, n_poses)

    def build():
        g = FactorGraph()
        for i in range(n_poses):
            if i < n_poses - 1:
                R = _heading_frame(pos[i], pos[i + 1], up[i])
            else:
                R = _heading_frame(pos[i - 1], pos[i], up[i])
            g.add_variable(Variable(i, mf.Isometry3(R, pos[i].copy())))
        return g

    gt = build()

    def rel(i, j):
        return mf.se3_compose(mf.se3_inverse(gt.variables[i].value), gt.variables[j].value)

    edges = [(i, i + 1) for i in range(n_poses - 1)]
    closures = []
    if rules.loop_closures:
        if kind == "ring":
            closures.append((n_poses - 1, 0))
        elif kind == "grid":
            side = per_sweep
            for i in range(n_poses):
                below = _grid_below(i, side, n_poses)
                if below is not None and abs(below - i) > 1:
                    closures.append((i, below))
        else:
            for i in range(n_poses - per_sweep):
                j = i + per_sweep
                if j - i > 1:
                    closures.append((i, j))
    for pair in closures:
        if rules.closure_prob >= 1.0 or rng.uniform() < rules.closure_prob:
            edges.append(pair)

    for k, (i, j) in enumerate(edges):
        gt.add_factor(PgoFactor(k, i, j, rel(i, j), np.eye(6)))

    measured = clone_graph(gt)
    return gt, measured


def _grid_below(i, side, n):
    # serpentine path: even rows go left->right, odd rows right->left
    row, k = divmod(i, side)
    col = k if row % 2 == 0 else side - 1 - k
    nrow = row + 1
    if nrow >= side:
        return None
    j = nrow * side + (col if nrow % 2 == 0 else side - 1 - col)
    return j if j < n else None


def clone_graph(graph: FactorGraph) -> FactorGraph:
    """Deep copy of variables and factors (shared nothing, same keys)."""
    import copy

    out = FactorGraph()
    for k in sorted(graph.variables):
        v = graph.variables[k]
        out.add_variable(Variable(k, mf.copy_value(v.value), v.status, [mf.copy_value(b) for b in v.backup_stack]))
    for k in sorted(graph.factors):
        out.add_factor(copy.deepcopy(graph.factors[k]))
    return out


# -- noise injection -------------------------------------------------------------


def _check_variances(arr, used):
    a = np.asarray(arr, dtype=float)[:used]
    if np.any(a < 0):
        raise ValueError("variances must be non-negative")
    if np.any(a > 0) and np.any(a == 0):
        raise ValueError("mixed zero/non-zero variance diagonals are not supported")
    return a


def perturb_awgn(graph: FactorGraph, spec: NoiseSpec) -> FactorGraph:
    """White-noise-perturbed copy: Z -> Z [+] eps, Omega -> inverse noise covariance.

    All-zero variances leave the corresponding factors untouched.  Factor
    types other than relative-pose and pose-landmark edges pass through
    unchanged.
    """
    out = clone_graph(graph)
    rng = StreamRng(spec.seed)
    st3 = _check_variances(spec.sigma_t, 3)
    sr3 = _check_variances(spec.sigma_r, 3)
    sl = np.asarray(spec.sigma_land, dtype=float)
    for key in sorted(out.factors):
        f = out.factors[key]
        if isinstance(f, PgoFactor):
            var = np.concatenate([st3, sr3])
            if np.all(var == 0):
                continue
            eps = rng.normals(6) * np.sqrt(var)
            f.measurement = mf.se3_boxplus(f.measurement, eps)
            f.information = np.diag(1.0 / var)
        elif isinstance(f, Se2PgoFactor):
            var = np.array([st3[0], st3[1] if st3.size > 1 else st3[0], sr3[0]])
            if np.all(var == 0):
                continue
            eps = rng.normals(3) * np.sqrt(var)
            f.measurement = mf.se2_boxplus(f.measurement, eps)
            f.information = np.diag(1.0 / var)
        elif isinstance(f, Se2LandmarkFactor):
            var = _check_variances(sl, 2)
            if var.size < 2:
                var = np.array([var[0], var[0]]) if var.size else np.zeros(2)
            if np.all(var == 0):
                continue
            eps = rng.normals(2) * np.sqrt(var)
            f.measurement = f.measurement + eps
            f.information = np.diag(1.0 / var)
    return out


# -- initialization ----------------------------------------------------------------


def breadth_first_init(graph: FactorGraph, root):
    """Compose measurements along a BFS spanning tree from a Fixed root.

    Pose variables get parent_value * Z (or * Z^{-1} against the edge);
    landmark variables are placed from their first observing pose.  Raises
    Disconnected when any non-Disabled variable stays unreachable.
    """
    if root not in graph.variables:
        raise KeyError(f"root {root} not in graph")
    pose_adj = {}
    landmark_obs = {}
    for key in sorted(graph.factors):
        f = graph.factors[key]
        if not graph.factor_is_active(f):
            continue
        if isinstance(f, (PgoFactor, Se2PgoFactor)):
            i, j = f.variables
            pose_adj.setdefault(i, []).append((j, f, False))
            pose_adj.setdefault(j, []).append((i, f, True))
        elif isinstance(f, Se2LandmarkFactor):
            i, j = f.variables
            landmark_obs.setdefault(j, []).append((i, f))

    from collections import deque

    reached = {root}
    queue = deque([root])
    while queue:
        cur = queue.popleft()
        cur_val = graph.variables[cur].value
        for nbr, f, inverted in pose_adj.get(cur, ()):
            if nbr in reached:
                continue
            Z = f.measurement
            if isinstance(Z, mf.Isometry3):
                step = mf.se3_inverse(Z) if inverted else Z
                graph.variables[nbr].value = mf.se3_compose(cur_val, step)
            else:
                step = mf.se2_inverse(Z) if inverted else Z
                graph.variables[nbr].value = mf.se2_compose(cur_val, step)
            reached.add(nbr)
            queue.append(nbr)

    for lm_key in sorted(landmark_obs):
        for pose_key, f in landmark_obs[lm_key]:
            if pose_key in reached:
                pose = graph.variables[pose_key].value
                graph.variables[lm_key].value = pose.R @ f.measurement + pose.t
                reached.add(lm_key)
                break

    missing = [
        k
        for k, v in graph.variables.items()
        if k not in reached and v.status != VariableStatus.DISABLED
    ]
    if missing:
        raise Disconnected(missing)
    graph.variables[root].status = VariableStatus.FIXED


# -- evaluation metrics -------------------------------------------------------------


def _rigid_align(src, dst):
    """Closed-form rotation+translation mapping src onto dst (no scale)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(H.shape[0])
    D[-1, -1] = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ D @ U.T
    t = mu_d - R @ mu_s
    return R, t


def ate_rmse(estimate: FactorGraph, ground_truth: FactorGraph, align=True) -> TrajectoryMetrics:
    """Absolute trajectory error (RMSE) after optional rigid alignment.

    Rotational ATE is the RMSE of the geodesic angles between aligned
    estimated rotations and ground truth.
    """
    est_poses = {
        k: v.value
        for k, v in estimate.variables.items()
        if isinstance(v.value, (mf.Isometry3, mf.Isometry2))
    }
    gt_poses = {
        k: v.value
        for k, v in ground_truth.variables.items()
        if isinstance(v.value, (mf.Isometry3, mf.Isometry2))
    }
    if set(est_poses) != set(gt_poses):
        raise KeyMismatch("estimate and ground truth pose keys differ")
    keys = sorted(est_poses)
    if not keys:
        raise KeyMismatch("no pose variables to compare")
    src = np.array([est_poses[k].t for k in keys])
    dst = np.array([gt_poses[k].t for k in keys])
    if align and len(keys) >= 2:
        R_a, t_a = _rigid_align(src, dst)
    else:
        R_a, t_a = np.eye(src.shape[1]), np.zeros(src.shape[1])
    res = (src @ R_a.T + t_a) - dst
    ate_pos = math.sqrt(float(np.mean(np.sum(res * res, axis=1))))
    angs = []
    for k in keys:
        R_est = R_a @ est_poses[k].R
        angs.append(mf.rotation_angle(gt_poses[k].R.T @ R_est))
    ate_rot = math.sqrt(float(np.mean(np.square(angs))))
    return TrajectoryMetrics(ate_pos=ate_pos, ate_rot=ate_rot)


def registration_error(X_est, X_gt):
    """Single-transform errors: (|t_est - t_gt|, geodesic angle)."""
    e_pos = float(np.linalg.norm(np.asarray(X_est.t) - np.asarray(X_gt.t)))
    e_rot = mf.rotation_angle(X_gt.R.T @ X_est.R)
    return e_pos, e_rot
