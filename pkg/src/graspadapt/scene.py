"""Scene configuration: the JSON document every CLI command reads.

Every section is optional; missing keys take the defaults below.

.. code-block:: json

    {
      "objects": [{"kind": "bar", "points": 256, "seed": 0}],
      "reference_eef": {"t": [0.5, 0, 0.4], "q": [1, 0, 0, 0]},
      "reference_grasp": null,
      "camera": {"pose_WC": null, "distance": 0.6, "noise_sigma": 0.0005,
                 "dropout_uniform": 0.0, "structured_dropout": 0.0,
                 "extrinsics_error": [0.0, 0.0]},
      "occlusion": {"center": [0, 0, 0.1], "size": [0.03, 0.02, 0.04]},
      "workspace": {"lo": [-1, -1, -0.5], "hi": [2, 1, 1.5]},
      "collect": {"range": [0.30, 60], "m": 2000, "fine_m": 400},
      "estimator": {"estimator": "retrieval", "noise_t_mm": 0, "noise_r_deg": 0,
                    "refine_icp": true, "descriptor_bins": 16, "fine_range": [0.06, 12]},
      "servo": {"total_steps": 20, "coarse_steps": 10, "gain": 0.7, "early_stop_eps": [0.2, 0.1]},
      "protocol": {"grasps": 4, "deployments": 5, "skill_range": [0.05, 15],
                   "deploy_range": [0.05, 15], "tolerances_mm": [2, 4, 8, 12],
                   "trials_per": 5, "max_tilt_deg": 5}
    }

An object entry is either ``{"kind", "points", "seed"}`` or a full serialized model
``{"name", "points": [[x, y, z], ...], "appearance"}``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

from .errors import FormatError
from .se3 import IDENTITY, Pose, SampleRange
from .servo import ServoConfig
from .world import (
    DEFAULT_OCCLUSION,
    DEFAULT_REFERENCE_EEF,
    DEFAULT_REFERENCE_GRASP,
    Box,
    CameraModel,
    HalfSpace,
    ObjectModel,
    Workspace,
    WorldState,
    camera_facing,
    make_object,
    structured_dropout,
)

ESTIMATOR_KINDS = ("oracle", "retrieval")
# fixed directions for the scalar extrinsics-error knob
_ERR_T_DIR = (1.0 / math.sqrt(3.0),) * 3
_ERR_R_AXIS = (0.0, 0.6, 0.8)


def extrinsics_error(mm: float, deg: float) -> Pose:
    """Report error of ``mm`` along a fixed diagonal and ``deg`` about a fixed axis."""
    if mm < 0 or deg < 0:
        raise ValueError("extrinsics error magnitudes must be non-negative")
    if deg == 0:
        return Pose.from_translation([mm / 1000.0 * c for c in _ERR_T_DIR])
    return Pose.from_axis_angle(_ERR_R_AXIS, math.radians(deg), [mm / 1000.0 * c for c in _ERR_T_DIR])


@dataclass(frozen=True)
class EstimatorSpec:
    estimator: str = "retrieval"
    noise_t_mm: float = 0.0
    noise_r_deg: float = 0.0
    refine_icp: bool = True
    descriptor_bins: int = 16
    fine_range: SampleRange = SampleRange(0.06, 12.0)
    candidates: int = 32

    def __post_init__(self):
        if self.estimator not in ESTIMATOR_KINDS:
            raise ValueError(f"estimator must be one of {ESTIMATOR_KINDS}")
        if self.noise_t_mm < 0 or self.noise_r_deg < 0:
            raise ValueError("oracle noise must be non-negative")

    def to_json(self) -> dict:
        return {
            "estimator": self.estimator,
            "noise_t_mm": self.noise_t_mm,
            "noise_r_deg": self.noise_r_deg,
            "refine_icp": self.refine_icp,
            "descriptor_bins": self.descriptor_bins,
            "fine_range": [self.fine_range.position_halfwidth, self.fine_range.orientation_halfwidth],
            "candidates": self.candidates,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EstimatorSpec":
        fr = d.get("fine_range", [0.06, 12.0])
        return cls(
            d.get("estimator", "retrieval"),
            float(d.get("noise_t_mm", 0.0)),
            float(d.get("noise_r_deg", 0.0)),
            bool(d.get("refine_icp", True)),
            int(d.get("descriptor_bins", 16)),
            SampleRange.from_json(fr),
            int(d.get("candidates", 32)),
        )


@dataclass(frozen=True)
class ProtocolSpec:
    grasps: int = 4
    deployments: int = 5
    skill_range: SampleRange = SampleRange(0.05, 15.0)
    deploy_range: SampleRange = SampleRange(0.05, 15.0)
    tolerances_mm: Tuple[float, ...] = (2.0, 4.0, 8.0, 12.0)
    trials_per: int = 5
    max_tilt_deg: float = 5.0

    def __post_init__(self):
        if self.grasps < 1 or self.deployments < 1 or self.trials_per < 1:
            raise ValueError("protocol counts must be >= 1")
        tol = tuple(float(t) for t in self.tolerances_mm)
        if any(b <= a for a, b in zip(tol, tol[1:])):
            raise ValueError("tolerances must be strictly increasing")
        object.__setattr__(self, "tolerances_mm", tol)

    @classmethod
    def from_json(cls, d: dict) -> "ProtocolSpec":
        return cls(
            int(d.get("grasps", 4)),
            int(d.get("deployments", 5)),
            SampleRange.from_json(d.get("skill_range", [0.05, 15.0])),
            SampleRange.from_json(d.get("deploy_range", [0.05, 15.0])),
            tuple(d.get("tolerances_mm", (2.0, 4.0, 8.0, 12.0))),
            int(d.get("trials_per", 5)),
            float(d.get("max_tilt_deg", 5.0)),
        )


@dataclass(frozen=True)
class Scene:
    objects: Tuple[ObjectModel, ...] = ()
    reference_eef: Pose = DEFAULT_REFERENCE_EEF
    reference_grasp: Pose = DEFAULT_REFERENCE_GRASP
    camera_pose_WC: Optional[Pose] = None  # None: 0.6 m in front of the reference pose
    camera_distance: float = 0.6
    noise_sigma: float = 0.0005
    dropout_uniform: float = 0.0
    structured_dropout: float = 0.0  # fraction removed by a half-space at the reference view
    extrinsics_error: Pose = IDENTITY
    occlusion: Optional[Box] = DEFAULT_OCCLUSION
    workspace: Workspace = field(default_factory=Workspace)
    collect_range: SampleRange = SampleRange(0.30, 60.0)
    m: int = 2000
    fine_m: int = 400
    estimator: EstimatorSpec = EstimatorSpec()
    servo: ServoConfig = ServoConfig()
    protocol: ProtocolSpec = ProtocolSpec()

    def __post_init__(self):
        if not self.objects:
            object.__setattr__(self, "objects", (make_object("bar", 256, 0),))
        if not 0.0 <= self.structured_dropout < 1.0:
            raise ValueError("structured_dropout must lie in [0, 1)")
        if self.m < 1 or self.fine_m < 0:
            raise ValueError("m must be >= 1 and fine_m >= 0")

    def object(self, name: Optional[str] = None) -> ObjectModel:
        if name is None:
            return self.objects[0]
        for o in self.objects:
            if o.name == name:
                return o
        raise KeyError(f"no object named {name!r} in the scene")

    def world(self, obj: Optional[ObjectModel] = None, extrinsics_error: Optional[Pose] = None) -> WorldState:
        """World at the reference pose holding ``obj`` at the reference grasp."""
        obj = obj if obj is not None else self.objects[0]
        pose_wc = self.camera_pose_WC if self.camera_pose_WC is not None else camera_facing(self.reference_eef, self.camera_distance)
        err = self.extrinsics_error if extrinsics_error is None else extrinsics_error
        cam = CameraModel(pose_wc, self.noise_sigma, self.dropout_uniform, None, err)
        w = WorldState(self.reference_eef, self.reference_grasp, obj, cam, self.occlusion, self.workspace)
        if self.structured_dropout > 0:
            region: HalfSpace = structured_dropout(w, self.structured_dropout)
            w = w.replace(camera=replace(cam, dropout_region=region))
        return w

    def with_changes(self, **changes) -> "Scene":
        return replace(self, **changes)


def _object_from_json(d: dict) -> ObjectModel:
    if "kind" in d:
        return make_object(d["kind"], int(d.get("points", 256)), int(d.get("seed", 0)), bool(d.get("appearance", True)))
    return ObjectModel.from_json(d)


def _pose(d, default: Pose) -> Pose:
    return default if d is None else Pose.from_json(d)


def scene_from_json(d: dict) -> Scene:
    """Build a Scene; any malformed section raises FormatError."""
    try:
        cam = d.get("camera", {})
        ext = cam.get("extrinsics_error", [0.0, 0.0])
        ext_pose = extrinsics_error(float(ext[0]), float(ext[1])) if isinstance(ext, (list, tuple)) else Pose.from_json(ext)
        occ = d.get("occlusion", "default")
        occlusion = DEFAULT_OCCLUSION if occ == "default" else (None if occ is None else Box(tuple(occ["center"]), tuple(occ["size"])))
        ws = d.get("workspace", {})
        col = d.get("collect", {})
        return Scene(
            objects=tuple(_object_from_json(o) for o in d.get("objects", [])),
            reference_eef=_pose(d.get("reference_eef"), DEFAULT_REFERENCE_EEF),
            reference_grasp=_pose(d.get("reference_grasp"), DEFAULT_REFERENCE_GRASP),
            camera_pose_WC=_pose(cam.get("pose_WC"), None) if cam.get("pose_WC") is not None else None,
            camera_distance=float(cam.get("distance", 0.6)),
            noise_sigma=float(cam.get("noise_sigma", 0.0005)),
            dropout_uniform=float(cam.get("dropout_uniform", 0.0)),
            structured_dropout=float(cam.get("structured_dropout", 0.0)),
            extrinsics_error=ext_pose,
            occlusion=occlusion,
            workspace=Workspace(tuple(ws.get("lo", (-1.0, -1.0, -0.5))), tuple(ws.get("hi", (2.0, 1.0, 1.5)))),
            collect_range=SampleRange.from_json(col.get("range", [0.30, 60.0])),
            m=int(col.get("m", 2000)),
            fine_m=int(col.get("fine_m", 400)),
            estimator=EstimatorSpec.from_json(d.get("estimator", {})),
            servo=ServoConfig.from_json(d.get("servo", {})),
            protocol=ProtocolSpec.from_json(d.get("protocol", {})),
        )
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise FormatError(f"bad scene: {e}") from None


def load_scene(path) -> Scene:
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"scene is not valid JSON: {e}") from None
    if not isinstance(d, dict):
        raise FormatError("scene must be a JSON object")
    return scene_from_json(d)


def default_scene_objects(point_count: int = 256, seed: int = 0) -> List[ObjectModel]:
    return [make_object(k, point_count, seed) for k in ("bar", "hammer", "lshape", "random")]
