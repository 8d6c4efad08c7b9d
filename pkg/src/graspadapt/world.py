"""Kinematic simulator: robot EEF, a rigidly grasped object and a fixed camera.

Frames follow the usual convention: ``eef_pose`` is the EEF in the world, ``grasp``
is the object in the EEF frame, ``camera.pose_WC`` is the camera in the world.
Observations are point clouds in the camera frame; nothing else leaks out.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyObservation, WorkspaceLimit
from .se3 import IDENTITY, Pose, compose, inverse

OBJECT_KINDS = ("hammer", "lshape", "bar", "random")


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ObjectModel:
    """Rigid object as a point set in its own frame {O}."""

    points: np.ndarray
    appearance: Optional[np.ndarray] = None
    name: str = "object"

    def __post_init__(self):
        pts = _readonly(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
            raise ValueError("object needs an (n>=3, 3) point array")
        centered = pts - pts.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-9) < 2:
            raise ValueError("object points are collinear")
        object.__setattr__(self, "points", pts)
        if self.appearance is not None:
            app = _readonly(self.appearance)
            if app.shape != (len(pts),) or np.any(app < 0) or np.any(app > 1):
                raise ValueError("appearance must be one value in [0, 1] per point")
            object.__setattr__(self, "appearance", app)

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, ObjectModel):
            return NotImplemented
        same_app = (self.appearance is None and other.appearance is None) or (
            self.appearance is not None
            and other.appearance is not None
            and np.array_equal(self.appearance, other.appearance)
        )
        return self.name == other.name and np.array_equal(self.points, other.points) and same_app

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "points": self.points.tolist(),
            "appearance": None if self.appearance is None else self.appearance.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ObjectModel":
        return cls(np.array(d["points"], dtype=float), d.get("appearance"), d.get("name", "object"))


def _appearance_for(points: np.ndarray) -> np.ndarray:
    # smooth "texture" so that appearance varies across the surface
    p = points / 0.05
    return 0.5 + 0.5 * np.sin(p[:, 0] * 2.1 + 0.7) * np.cos(p[:, 1] * 1.3 - 0.4 * p[:, 2])


def _sample_boxes(rng, boxes, n):
    """Uniform samples from a union of axis-aligned boxes ``(lo, hi)``, proportional to volume."""
    if n == 0:
        return np.empty((0, 3))
    vols = np.array([np.prod(np.subtract(hi, lo)) for lo, hi in boxes])
    which = rng.choice(len(boxes), size=n, p=vols / vols.sum())
    lo = np.array([boxes[i][0] for i in which])
    hi = np.array([boxes[i][1] for i in which])
    return lo + rng.random((n, 3)) * (hi - lo)


def _bar_skeleton() -> np.ndarray:
    # two parallel rows of 4 along x, 0.2 m long; uneven spacing, different per row,
    # so no rotation maps the set onto itself
    u = np.linspace(0.0, 1.0, 4)
    row_a = np.column_stack([-0.1 + 0.2 * u**1.3, np.zeros(4), np.zeros(4)])
    row_b = np.column_stack([-0.1 + 0.2 * u**1.8, np.full(4, 0.02), np.full(4, 0.01)])
    return np.vstack([row_a, row_b])


def make_object(kind: str, point_count: int, seed: int = 0, appearance: bool = True) -> ObjectModel:
    """Desk-scale test objects (meters). Deterministic per ``(kind, point_count, seed)``.

    ``bar`` always starts with the 8-point two-row skeleton; extra points fill the
    0.2 x 0.03 x 0.02 m bar volume and a small tab on one side of its -x end. ``hammer`` is a handle plus an off-centre head,
    ``lshape`` two unequal arms, ``random`` an anisotropic Gaussian blob whose
    principal axes differ by at least 5%.
    """
    if kind not in OBJECT_KINDS:
        raise ValueError(f"unknown object kind {kind!r}; expected one of {OBJECT_KINDS}")
    if point_count < 8:
        raise ValueError("point_count must be >= 8")
    rng = np.random.default_rng([seed, OBJECT_KINDS.index(kind), point_count])
    if kind == "bar":
        body = ((-0.1, -0.005, -0.005), (0.1, 0.025, 0.015))
        tab = ((-0.1, 0.025, -0.005), (-0.05, 0.05, 0.005))  # tail-end tab breaks the box symmetry
        extra = _sample_boxes(rng, [body, tab], point_count - 8)
        pts = np.vstack([_bar_skeleton(), extra])
    elif kind == "hammer":
        handle = ((-0.15, -0.01, -0.01), (0.08, 0.01, 0.01))
        head = ((0.08, -0.02, -0.015), (0.11, 0.07, 0.015))
        pts = _sample_boxes(rng, [handle, head], point_count)
    elif kind == "lshape":
        arm_x = ((-0.06, -0.015, -0.01), (0.10, 0.015, 0.01))
        arm_y = ((-0.06, 0.015, -0.01), (-0.03, 0.09, 0.01))
        pts = _sample_boxes(rng, [arm_x, arm_y], point_count)
    else:
        pts = _random_blob(rng, point_count)
    pts = pts - pts.mean(axis=0)
    app = _appearance_for(pts) if appearance else None
    return ObjectModel(pts, app, kind)


def principal_lengths(points) -> np.ndarray:
    """Square roots of the covariance eigenvalues, descending."""
    p = np.asarray(points) - np.mean(points, axis=0)
    ev = np.linalg.eigvalsh(p.T @ p / len(p))
    return np.sqrt(np.maximum(ev[::-1], 0.0))


def _random_blob(rng, n) -> np.ndarray:
    while True:
        pts = rng.normal(size=(n, 3)) * np.array([0.06, 0.035, 0.02])
        pts = pts @ Pose.from_rotvec(rng.normal(size=3)).rotation.T
        lengths = principal_lengths(pts)
        if np.all(lengths[1:] <= 0.95 * lengths[:-1]):
            return pts


@dataclass(frozen=True)
class HalfSpace:
    """Points with ``normal . p > offset`` (camera frame) are lost by the depth sensor."""

    normal: tuple
    offset: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        return points @ np.asarray(self.normal, dtype=float) > self.offset

    def to_json(self) -> dict:
        return {"normal": list(self.normal), "offset": self.offset}


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by centre and full edge lengths (meters)."""

    center: tuple
    size: tuple

    def contains(self, points: np.ndarray) -> np.ndarray:
        half = np.asarray(self.size, dtype=float) / 2.0
        return np.all(np.abs(points - np.asarray(self.center, dtype=float)) <= half, axis=1)

    def to_json(self) -> dict:
        return {"center": list(self.center), "size": list(self.size)}


DEFAULT_OCCLUSION = Box((0.0, 0.0, 0.10), (0.03, 0.02, 0.04))


@dataclass(frozen=True)
class CameraModel:
    pose_WC: Pose
    noise_sigma: float = 0.0
    dropout_uniform: float = 0.0
    dropout_region: Optional[HalfSpace] = None
    # what calibration-dependent methods believe: believed pose = pose_WC @ error
    extrinsics_report_error: Pose = IDENTITY

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.dropout_uniform <= 1.0:
            raise ValueError("dropout_uniform must be in [0, 1]")

    @property
    def believed_pose_WC(self) -> Pose:
        return compose(self.pose_WC, self.extrinsics_report_error)


def camera_facing(target: Pose, distance: float = 0.6) -> Pose:
    """Camera ``distance`` m in front (+x world) of ``target``, optical axis pointing back at it."""
    # columns: x_c = +y_w, y_c = -z_w, z_c = -x_w
    r = np.array([[0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = np.asarray(target.t) + np.array([distance, 0.0, 0.0])
    return Pose.from_matrix(m)


@dataclass(frozen=True)
class Workspace:
    lo: tuple = (-1.0, -1.0, -0.5)
    hi: tuple = (2.0, 1.0, 1.5)

    def contains(self, p: Pose) -> bool:
        return all(lo <= v <= hi for lo, v, hi in zip(self.lo, p.t, self.hi))


@dataclass(frozen=True)
class WorldState:
    eef_pose: Pose
    grasp: Pose
    object: ObjectModel
    camera: CameraModel
    gripper_occlusion: Optional[Box] = None
    workspace: Optional[Workspace] = field(default_factory=Workspace)

    def replace(self, **changes) -> "WorldState":
        return dataclasses.replace(self, **changes)

    def object_pose(self) -> Pose:
        return compose(self.eef_pose, self.grasp)


@dataclass(frozen=True, eq=False)
class Observation:
    """Camera-frame point cloud. ``point_ids`` index the object's points and exist only
    so that baselines can synthesise ground-truth correspondences."""

    points_C: np.ndarray
    appearance: Optional[np.ndarray] = None
    mask_source: str = "full"
    point_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "points_C", _readonly(self.points_C).reshape(-1, 3))
        if self.appearance is not None:
            object.__setattr__(self, "appearance", _readonly(self.appearance))
        if self.point_ids is not None:
            ids = np.array(self.point_ids, dtype=np.int64)
            ids.setflags(write=False)
            object.__setattr__(self, "point_ids", ids)

    def __len__(self):
        return len(self.points_C)

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented

        def eq(a, b):
            return (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))

        return (
            np.array_equal(self.points_C, other.points_C)
            and eq(self.appearance, other.appearance)
            and eq(self.point_ids, other.point_ids)
            and self.mask_source == other.mask_source
        )

    def without(self, mask: np.ndarray) -> "Observation":
        keep = ~np.asarray(mask, dtype=bool)
        if not keep.any():
            raise EmptyObservation("no points left")
        return Observation(
            self.points_C[keep],
            None if self.appearance is None else self.appearance[keep],
            self.mask_source,
            None if self.point_ids is None else self.point_ids[keep],
        )


def observe(state: WorldState, rng: Optional[np.random.Generator] = None) -> Observation:
    """Capture the grasped object with the camera.

    Gripper occlusion is evaluated in {E} before projection; noise, uniform dropout and
    region dropout are applied in {C}. Region membership uses the noise-free points.
    """
    pts = state.object.points
    ids = np.arange(len(pts))
    source = "full"
    if state.gripper_occlusion is not None:
        hidden = state.gripper_occlusion.contains(state.grasp.apply(pts))
        if hidden.any():
            source = "occluded"
            pts, ids = pts[~hidden], ids[~hidden]
    cam = state.camera
    to_camera = compose(inverse(cam.pose_WC), state.eef_pose, state.grasp)
    clean = to_camera.apply(pts)
    noisy = clean
    if cam.noise_sigma > 0 or cam.dropout_uniform > 0:
        if rng is None:
            raise ValueError("a random generator is required for noisy or lossy sensing")
    if cam.noise_sigma > 0:
        noisy = clean + rng.normal(0.0, cam.noise_sigma, size=clean.shape)
    keep = np.ones(len(clean), dtype=bool)
    if cam.dropout_uniform > 0:
        keep &= rng.random(len(clean)) >= cam.dropout_uniform
    if cam.dropout_region is not None:
        keep &= ~cam.dropout_region.contains(clean)
    if not keep.any():
        raise EmptyObservation("every object point was dropped")
    app = None if state.object.appearance is None else state.object.appearance[ids][keep]
    return Observation(noisy[keep], app, source, ids[keep])


def move_eef(state: WorldState, displacement: Pose) -> WorldState:
    """Move the EEF by ``displacement`` expressed in its own frame; the grasp is unchanged."""
    new = compose(state.eef_pose, displacement)
    if state.workspace is not None and not state.workspace.contains(new):
        raise WorkspaceLimit(f"EEF translation {new.t} outside workspace")
    return state.replace(eef_pose=new)


def aligning_displacement(eef_pose: Pose, grasp: Pose, reference_eef: Pose, reference_grasp: Pose) -> Pose:
    """Ground truth for an observation taken at ``eef_pose``: the displacement from the
    reference pose that would bring the emulated grasp onto the reference grasp."""
    rel = compose(inverse(reference_eef), eef_pose)
    return compose(reference_grasp, inverse(grasp), inverse(rel))


def default_world(
    obj: ObjectModel,
    reference_eef: Optional[Pose] = None,
    grasp: Optional[Pose] = None,
    noise_sigma: float = 0.0,
    dropout_uniform: float = 0.0,
    occlusion: Optional[Box] = DEFAULT_OCCLUSION,
) -> WorldState:
    """World at the reference pose with the camera 0.6 m in front of it."""
    ref = reference_eef if reference_eef is not None else DEFAULT_REFERENCE_EEF
    camera = CameraModel(camera_facing(ref), noise_sigma, dropout_uniform)
    return WorldState(ref, grasp if grasp is not None else DEFAULT_REFERENCE_GRASP, obj, camera, occlusion)


DEFAULT_REFERENCE_EEF = Pose.from_translation((0.5, 0.0, 0.4))
# object held at the fingertips, slightly off-centre and tilted
DEFAULT_REFERENCE_GRASP = Pose.from_euler_xyz(math.radians(10), 0.0, math.radians(-15), (0.02, 0.0, 0.10))


def structured_dropout(state: WorldState, fraction: float, normal=None) -> HalfSpace:
    """Half-space in {C} that removes ``fraction`` of the object's points as seen in ``state``.

    The default normal is the principal axis of that view, signed so that the surviving
    slab is as thick as possible: one end of the object is lost (a specular spoon bowl,
    say) while small motions keep the rest visible.
    """
    clean = compose(inverse(state.camera.pose_WC), state.eef_pose, state.grasp).apply(state.object.points)
    if normal is None:
        c = clean - clean.mean(axis=0)
        n = np.linalg.eigh(c.T @ c)[1][:, -1]
        p = clean @ n
        keep_low = np.quantile(p, 1.0 - fraction) - p.min()
        keep_high = p.max() - np.quantile(p, fraction)
        n = n if keep_low >= keep_high else -n
    else:
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
    proj = clean @ n
    return HalfSpace(tuple(float(v) for v in n), float(np.quantile(proj, 1.0 - fraction)))
