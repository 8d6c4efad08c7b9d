"""Rigid-body pose algebra on SE(3).

Poses store a unit quaternion ``q = (w, x, y, z)`` and a translation ``t`` in
meters as plain float tuples. Keeping them as Python floats makes single-pose
composition a few microseconds, which matters inside servo loops; point sets
are transformed with numpy through :meth:`Pose.apply`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
import numpy as np

COMPOSE_TOL = 1e-12
TEST_TOL = 1e-10
QUAT_READ_TOL = 1e-6
# renormalize only when the norm is off by more than a few ulps, so that
# already-normalized quaternions round-trip bit-for-bit
_RENORM_EPS = 8 * np.finfo(float).eps


def _normalized(w, x, y, z):
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if n == 0.0:
        raise ValueError("zero quaternion")
    if abs(n - 1.0) > _RENORM_EPS:
        return (w / n, x / n, y / n, z / n)
    return (w, x, y, z)


@dataclass(frozen=True, slots=True)
class Pose:
    """An element of SE(3): unit quaternion ``q`` (w, x, y, z) and translation ``t`` (m)."""

    q: tuple = (1.0, 0.0, 0.0, 0.0)
    t: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        q = tuple(float(v) for v in self.q)
        t = tuple(float(v) for v in self.t)
        if len(q) != 4 or len(t) != 3:
            raise ValueError("pose needs a 4-quaternion and a 3-translation")
        object.__setattr__(self, "q", _normalized(*q))
        object.__setattr__(self, "t", t)

    @staticmethod
    def _raw(q, t) -> "Pose":
        p = object.__new__(Pose)
        object.__setattr__(p, "q", q)
        object.__setattr__(p, "t", t)
        return p

    # -- constructors --------------------------------------------------------
    @classmethod
    def identity(cls) -> "Pose":
        return IDENTITY

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls((1.0, 0.0, 0.0, 0.0), t)

    @classmethod
    def from_axis_angle(cls, axis, angle: float, t=(0.0, 0.0, 0.0)) -> "Pose":
        """Rotation of ``angle`` radians about ``axis``, followed by translation ``t``."""
        a = np.asarray(axis, dtype=float)
        n = np.linalg.norm(a)
        if n == 0.0:
            return cls((1.0, 0.0, 0.0, 0.0), t)
        a = a / n
        s = math.sin(angle / 2.0)
        return cls((math.cos(angle / 2.0), a[0] * s, a[1] * s, a[2] * s), t)

    @classmethod
    def from_rotvec(cls, rotvec, t=(0.0, 0.0, 0.0)) -> "Pose":
        r = np.asarray(rotvec, dtype=float)
        return cls.from_axis_angle(r, float(np.linalg.norm(r)), t)

    @classmethod
    def from_euler_xyz(cls, rx: float, ry: float, rz: float, t=(0.0, 0.0, 0.0)) -> "Pose":
        """Rotation ``Rx(rx) @ Ry(ry) @ Rz(rz)`` (radians, intrinsic x-y-z)."""
        r = compose(
            cls.from_axis_angle((1, 0, 0), rx),
            cls.from_axis_angle((0, 1, 0), ry),
            cls.from_axis_angle((0, 0, 1), rz),
        )
        return cls(r.q, t)

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        """Build from a 4x4 homogeneous matrix (or a 3x3 rotation)."""
        m = np.asarray(m, dtype=float)
        r = m[:3, :3]
        t = m[:3, 3] if m.shape == (4, 4) else np.zeros(3)
        return cls(_matrix_to_quat(r), t)

    # -- views ---------------------------------------------------------------
    @property
    def rotation(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    @property
    def translation(self) -> np.ndarray:
        return np.array(self.t)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.t
        return m

    def rotation_angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        w, x, y, z = self.q
        return 2.0 * math.atan2(math.sqrt(x * x + y * y + z * z), abs(w))

    def rotvec(self) -> np.ndarray:
        w, x, y, z = self.q
        if w < 0:
            w, x, y, z = -w, -x, -y, -z
        s = math.sqrt(x * x + y * y + z * z)
        if s == 0.0:
            return np.zeros(3)
        angle = 2.0 * math.atan2(s, w)
        return np.array([x, y, z]) * (angle / s)

    def euler_xyz(self) -> np.ndarray:
        """Inverse of :meth:`from_euler_xyz`; unique while ``|ry| < 90 deg``."""
        r = self.rotation
        ry = math.asin(max(-1.0, min(1.0, r[0, 2])))
        rx = math.atan2(-r[1, 2], r[2, 2])
        rz = math.atan2(-r[0, 1], r[0, 0])
        return np.array([rx, ry, rz])

    def apply(self, points) -> np.ndarray:
        """Transform an (n, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + np.asarray(self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def to_json(self) -> dict:
        return {"t": list(self.t), "q": list(self.q)}

    @classmethod
    def from_json(cls, d: dict) -> "Pose":
        q = [float(v) for v in d["q"]]
        t = [float(v) for v in d["t"]]
        if len(q) != 4 or len(t) != 3:
            raise ValueError("pose JSON needs 't' of length 3 and 'q' of length 4")
        if abs(math.sqrt(sum(v * v for v in q)) - 1.0) > QUAT_READ_TOL:
            raise ValueError(f"quaternion is not unit norm: {q}")
        return cls(q, t)


IDENTITY = Pose()


def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def _rotate(q, v):
    # v' = v + 2w (u x v) + 2 u x (u x v)
    w, x, y, z = q
    vx, vy, vz = v
    cx = y * vz - z * vy
    cy = z * vx - x * vz
    cz = x * vy - y * vx
    ddx = y * cz - z * cy
    ddy = z * cx - x * cz
    ddz = x * cy - y * cx
    return (
        vx + 2.0 * (w * cx + ddx),
        vy + 2.0 * (w * cy + ddy),
        vz + 2.0 * (w * cz + ddz),
    )


def _compose2(a: Pose, b: Pose) -> Pose:
    rt = _rotate(a.q, b.t)
    t = (a.t[0] + rt[0], a.t[1] + rt[1], a.t[2] + rt[2])
    return Pose._raw(_normalized(*_quat_mul(a.q, b.q)), t)


def compose(*poses: Pose) -> Pose:
    """Chain frames left to right: ``compose(a, b)`` is ``a @ b`` as 4x4 matrices."""
    if not poses:
        return IDENTITY
    out = poses[0]
    for p in poses[1:]:
        out = _compose2(out, p)
    return out


def inverse(p: Pose) -> Pose:
    w, x, y, z = p.q
    qi = (w, -x, -y, -z)
    rt = _rotate(qi, p.t)
    return Pose._raw(qi, (-rt[0], -rt[1], -rt[2]))


def _matrix_to_quat(r) -> tuple:
    # Shepperd's method: branch on the largest diagonal term for stability
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        return (0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s)
    if r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        return ((r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s)
    if r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        return ((r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s)
    s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
    return ((r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s)


@dataclass(frozen=True)
class PoseError:
    position_mm: float
    orientation_deg: float


def error_between(a: Pose, b: Pose) -> PoseError:
    """Euclidean position error (mm) and relative rotation angle (deg) between two poses."""
    dx = a.t[0] - b.t[0]
    dy = a.t[1] - b.t[1]
    dz = a.t[2] - b.t[2]
    aw, ax, ay, az = a.q
    rel = _quat_mul((aw, -ax, -ay, -az), b.q)
    angle = 2.0 * math.atan2(math.sqrt(rel[1] ** 2 + rel[2] ** 2 + rel[3] ** 2), abs(rel[0]))
    return PoseError(1000.0 * math.sqrt(dx * dx + dy * dy + dz * dz), math.degrees(angle))


def per_dof_error(a: Pose, b: Pose) -> np.ndarray:
    """Absolute per-DoF differences: |dx|, |dy|, |dz| in mm, then x-y-z Euler angles of
    ``inverse(a.rotation) * b.rotation`` in degrees."""
    dt = 1000.0 * np.abs(np.subtract(a.t, b.t))
    rel = Pose._raw(_normalized(*_quat_mul((a.q[0], -a.q[1], -a.q[2], -a.q[3]), b.q)), (0.0, 0.0, 0.0))
    return np.concatenate([dt, np.degrees(np.abs(rel.euler_xyz()))])


@dataclass(frozen=True)
class SampleRange:
    """Per-axis half-widths: translation in meters, rotation in degrees."""

    position_halfwidth: float
    orientation_halfwidth: float

    def __post_init__(self):
        object.__setattr__(self, "position_halfwidth", float(self.position_halfwidth))
        object.__setattr__(self, "orientation_halfwidth", float(self.orientation_halfwidth))
        if self.position_halfwidth < 0 or self.orientation_halfwidth < 0:
            raise ValueError("sample range half-widths must be non-negative")
        if self.orientation_halfwidth > 180:
            raise ValueError("orientation half-width must be <= 180 degrees")

    def contains(self, p: Pose, tol: float = 1e-9) -> bool:
        """True if every translation axis and x-y-z Euler angle of ``p`` is inside the range."""
        if np.any(np.abs(p.t) > self.position_halfwidth + tol):
            return False
        ang = np.degrees(np.abs(p.euler_xyz()))
        return bool(np.all(ang <= self.orientation_halfwidth + tol))

    def issubset(self, other: "SampleRange") -> bool:
        return (
            self.position_halfwidth <= other.position_halfwidth
            and self.orientation_halfwidth <= other.orientation_halfwidth
        )

    def to_json(self) -> dict:
        return {
            "position_halfwidth": self.position_halfwidth,
            "orientation_halfwidth": self.orientation_halfwidth,
        }

    @classmethod
    def from_json(cls, d) -> "SampleRange":
        if isinstance(d, (list, tuple)):
            return cls(float(d[0]), float(d[1]))
        return cls(float(d["position_halfwidth"]), float(d["orientation_halfwidth"]))


def sample_displacement(sample_range: SampleRange, rng: np.random.Generator) -> Pose:
    """Uniform translation per axis and per-axis uniform rotations composed in x-y-z order."""
    h = sample_range.position_halfwidth
    a = math.radians(sample_range.orientation_halfwidth)
    t = rng.uniform(-h, h, size=3) if h > 0 else np.zeros(3)
    ang = rng.uniform(-a, a, size=3) if a > 0 else np.zeros(3)
    return Pose.from_euler_xyz(ang[0], ang[1], ang[2], t)


def poses_close(a: Pose, b: Pose, tol: float = TEST_TOL) -> bool:
    e = error_between(a, b)
    return e.position_mm / 1000.0 <= tol and math.radians(e.orientation_deg) <= tol

