"""Skill acquisition, corrective transforms and adapted trajectory execution.

A skill is a trajectory of EEF displacements recorded under the skill grasp ``S``.
Servoing under ``S`` gives the skill alignment ``A_S``; servoing under the deployment
grasp ``D`` gives ``A_D``. Both bring the object onto the reference grasp, so
``A_S @ S = A_D @ D`` and the corrective

    C = inverse(A_S) @ A_D

satisfies ``C @ D = S``. Executing ``start @ d_t @ C`` therefore moves the object
exactly as ``start @ d_t`` did under the skill grasp.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import FormatError, WorkspaceLimit
from .estimator import AlignmentEstimator, GroundTruthAccess
from .se3 import Pose, SampleRange, compose, inverse, sample_displacement
from .servo import ServoConfig, ServoTrace, run_servo
from .world import WorldState


@dataclass(frozen=True)
class SkillTrajectory:
    """``displacements[t]`` is the EEF pose at step ``t + 1`` relative to ``initial_eef``."""

    initial_eef: Pose
    displacements: tuple

    def __post_init__(self):
        object.__setattr__(self, "displacements", tuple(self.displacements))
        if not self.displacements:
            raise ValueError("a trajectory needs at least one displacement")

    def __len__(self):
        return len(self.displacements)

    def eef_poses(self, start: Optional[Pose] = None) -> List[Pose]:
        s = self.initial_eef if start is None else start
        return [compose(s, d) for d in self.displacements]

    def to_json(self) -> dict:
        return {"initial_eef": self.initial_eef.to_json(), "displacements": [d.to_json() for d in self.displacements]}

    @classmethod
    def from_json(cls, d: dict) -> "SkillTrajectory":
        return cls(Pose.from_json(d["initial_eef"]), [Pose.from_json(x) for x in d["displacements"]])


@dataclass(frozen=True)
class SkillRecord:
    trajectory: SkillTrajectory
    skill_alignment: Pose
    object_name: str = "object"
    # simulator truth kept for scoring only; never read by the adaptation itself
    sim_truth: Optional[dict] = None

    def to_json(self) -> dict:
        out = {
            "trajectory": self.trajectory.to_json(),
            "skill_alignment": self.skill_alignment.to_json(),
            "object": self.object_name,
        }
        if self.sim_truth is not None:
            out["sim_truth"] = self.sim_truth
        return out

    @classmethod
    def from_json(cls, d: dict) -> "SkillRecord":
        try:
            return cls(
                SkillTrajectory.from_json(d["trajectory"]),
                Pose.from_json(d["skill_alignment"]),
                d.get("object", "object"),
                d.get("sim_truth"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad skill record: {e}") from None


def save_skill(record: SkillRecord, path) -> None:
    with open(path, "w") as f:
        json.dump(record.to_json(), f, indent=1, sort_keys=True)
        f.write("\n")


def load_skill(path) -> SkillRecord:
    with open(path) as f:
        try:
            return SkillRecord.from_json(json.load(f))
        except json.JSONDecodeError as e:
            raise FormatError(f"{os.fspath(path)}: {e}") from None


@dataclass
class AdaptedExecution:
    corrective: Pose
    eef_trace: List[Pose] = field(default_factory=list)
    object_trace: List[Pose] = field(default_factory=list)


def acquire_skill(
    world: WorldState,
    est: AlignmentEstimator,
    cfg: ServoConfig,
    trajectory: SkillTrajectory,
    rng: Optional[np.random.Generator] = None,
    truth: Optional[GroundTruthAccess] = None,
    reference_eef: Optional[Pose] = None,
) -> SkillRecord:
    """Servo under the skill grasp and bundle the resulting alignment with ``trajectory``."""
    trace = run_servo(world, est, cfg, rng, reference_eef, truth)
    return SkillRecord(trajectory, trace.final_alignment, world.object.name)


def compute_corrective(skill_alignment: Pose, deployment_alignment: Pose) -> Pose:
    return compose(inverse(skill_alignment), deployment_alignment)


def execute_adapted(record: SkillRecord, corrective: Pose, world: WorldState, start_eef: Optional[Pose] = None) -> AdaptedExecution:
    """Replay the skill from ``start_eef`` with ``corrective`` appended to every waypoint.

    The object trace uses the grasp held in ``world``. Raises WorkspaceLimit if any
    waypoint leaves the workspace.
    """
    start = record.trajectory.initial_eef if start_eef is None else start_eef
    run = AdaptedExecution(corrective)
    for d in record.trajectory.displacements:
        eef = compose(start, d, corrective)
        if world.workspace is not None and not world.workspace.contains(eef):
            raise WorkspaceLimit(f"adapted waypoint {eef.t} outside workspace")
        run.eef_trace.append(eef)
        run.object_trace.append(compose(eef, world.grasp))
    return run


def deploy_skill(
    record: SkillRecord,
    world: WorldState,
    est: AlignmentEstimator,
    cfg: ServoConfig,
    start_eef: Optional[Pose] = None,
    rng: Optional[np.random.Generator] = None,
    truth: Optional[GroundTruthAccess] = None,
) -> tuple[AdaptedExecution, ServoTrace]:
    """Servo under the deployment grasp held in ``world`` (EEF at the reference pose),
    then execute the adapted skill."""
    trace = run_servo(world, est, cfg, rng, None, truth)
    corrective = compute_corrective(record.skill_alignment, trace.final_alignment)
    return execute_adapted(record, corrective, world, start_eef), trace


# -- scripted trajectories ---------------------------------------------------


def random_trajectory(rng: np.random.Generator, initial_eef: Pose, h: int = 10, step: SampleRange = SampleRange(0.03, 10.0)) -> SkillTrajectory:
    """A random walk of ``h`` waypoints, each a bounded displacement from the previous one."""
    cur = Pose()
    out = []
    for _ in range(h):
        cur = compose(cur, sample_displacement(step, rng))
        out.append(cur)
    return SkillTrajectory(initial_eef, out)


def insertion_trajectory(initial_eef: Pose, axis_E=(1.0, 0.0, 0.0), approach: float = 0.10, depth: float = 0.03, h: int = 10) -> SkillTrajectory:
    """Straight-line approach then insertion along ``axis_E`` (EEF frame), ``h`` waypoints."""
    a = np.asarray(axis_E, dtype=float)
    a = a / np.linalg.norm(a)
    s = np.linspace(0.0, approach + depth, h + 1)[1:]
    return SkillTrajectory(initial_eef, [Pose.from_translation(v * a) for v in s])


def sample_deployment_grasp(rng: np.random.Generator, skill_grasp: Pose, sample_range: SampleRange = SampleRange(0.10, 90.0)) -> Pose:
    """A grasp within ``sample_range`` of ``skill_grasp``, offset in the object frame."""
    return compose(skill_grasp, sample_displacement(sample_range, rng))


def trajectory_deviation(a: List[Pose], b: List[Pose]) -> tuple[float, float]:
    """Largest pointwise position (m) and rotation (rad) gap between two pose lists."""
    if len(a) != len(b):
        raise ValueError("traces differ in length")
    dt = max((math.dist(p.t, q.t) for p, q in zip(a, b)), default=0.0)
    dr = max((compose(inverse(p), q).rotation_angle() for p, q in zip(a, b)), default=0.0)
    return dt, dr
