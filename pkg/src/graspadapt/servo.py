"""Closed-loop visual servoing toward the reference grasp.

At step ``l`` the EEF sits at ``T = R @ rel`` (``R`` the reference pose). The estimator
predicts the aligning displacement ``X`` as if the observation had been taken at the
reference pose, so the step actually executed from ``T`` is the conjugate

    VS = inverse(rel) @ X @ rel

which lands on the same world pose as applying ``X`` at ``R`` and then ``rel``. After
the loop the alignment is read off the pose delta, ``inverse(R) @ T_final``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DivergedFromWorkspace, WorkspaceLimit
from .estimator import AlignmentEstimator, GroundTruthAccess, TwoStageEstimator
from .se3 import IDENTITY, Pose, PoseError, compose, error_between, inverse
from .world import WorldState, move_eef, observe


@dataclass(frozen=True)
class ServoConfig:
    total_steps: int = 20
    coarse_steps: int = 10
    gain: float = 0.7
    early_stop_eps: PoseError = PoseError(0.2, 0.1)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 <= self.coarse_steps <= self.total_steps:
            raise ValueError("coarse_steps must lie in [0, total_steps]")
        if not 0.0 < self.gain <= 1.0:
            raise ValueError("gain must lie in (0, 1]")

    def to_json(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "coarse_steps": self.coarse_steps,
            "gain": self.gain,
            "early_stop_eps": [self.early_stop_eps.position_mm, self.early_stop_eps.orientation_deg],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ServoConfig":
        eps = d.get("early_stop_eps", [0.2, 0.1])
        return cls(
            int(d.get("total_steps", 20)),
            int(d.get("coarse_steps", 10)),
            float(d.get("gain", 0.7)),
            PoseError(float(eps[0]), float(eps[1])),
        )


@dataclass(frozen=True)
class ServoStep:
    eef_pose: Pose  # before the move
    prediction: Pose
    applied_step: Pose
    stage: str


@dataclass
class ServoTrace:
    reference_eef: Pose
    steps: List[ServoStep] = field(default_factory=list)
    final_eef: Pose = IDENTITY
    final_alignment: Pose = IDENTITY
    converged: bool = False
    last_prediction: Optional[Pose] = None

    def __len__(self):
        return len(self.steps)

    def to_jsonl(self) -> str:
        lines = []
        for i, s in enumerate(self.steps):
            err = error_between(s.prediction, IDENTITY)
            lines.append(
                json.dumps(
                    {
                        "step": i,
                        "stage": s.stage,
                        "eef_pose": s.eef_pose.to_json(),
                        "prediction": s.prediction.to_json(),
                        "applied_step": s.applied_step.to_json(),
                        "prediction_mm": err.position_mm,
                        "prediction_deg": err.orientation_deg,
                    },
                    separators=(",", ":"),
                )
            )
        return "".join(line + "\n" for line in lines)


def servo_step(current_rel: Pose, prediction: Pose) -> Pose:
    """Conjugate a reference-frame prediction into the current EEF frame."""
    return compose(inverse(current_rel), prediction, current_rel)


def scale_step(step: Pose, gain: float) -> Pose:
    """Scale rotation angle and translation by ``gain``; ``gain = 1`` returns ``step``."""
    if gain == 1.0:
        return step
    return Pose.from_rotvec(gain * step.rotvec(), gain * np.asarray(step.t))


def _below(e: PoseError, eps: PoseError) -> bool:
    return e.position_mm < eps.position_mm and e.orientation_deg < eps.orientation_deg


def run_servo(
    world: WorldState,
    est: AlignmentEstimator,
    cfg: ServoConfig = ServoConfig(),
    rng: Optional[np.random.Generator] = None,
    reference_eef: Optional[Pose] = None,
    truth: Optional[GroundTruthAccess] = None,
) -> ServoTrace:
    """Servo the held object onto the reference grasp.

    ``reference_eef`` defaults to ``world.eef_pose``; the loop may start elsewhere. Only
    estimators flagged ``uses_ground_truth`` get a probe from ``truth``, and every read
    through it is counted.
    """
    ref = reference_eef if reference_eef is not None else world.eef_pose
    ref_inv = inverse(ref)
    if est.uses_ground_truth and truth is None:
        raise ValueError("this estimator needs ground-truth access")
    trace = ServoTrace(ref)
    state = world
    for lam in range(cfg.total_steps):
        obs = observe(state, rng)
        stage = "coarse" if lam < cfg.coarse_steps else "fine"
        probe = truth.probe(state) if est.uses_ground_truth else None
        if isinstance(est, TwoStageEstimator):
            pred = est.estimate(obs, probe, rng, stage=stage)
        else:
            pred = est.estimate(obs, probe, rng)
        trace.last_prediction = pred
        if _below(error_between(pred, IDENTITY), cfg.early_stop_eps):
            trace.converged = True
            break
        rel = compose(ref_inv, state.eef_pose)
        step = scale_step(servo_step(rel, pred), cfg.gain)
        trace.steps.append(ServoStep(state.eef_pose, pred, step, stage))
        try:
            state = move_eef(state, step)
        except WorkspaceLimit as e:
            raise DivergedFromWorkspace(str(e)) from None
    trace.final_eef = state.eef_pose
    trace.final_alignment = compose(ref_inv, state.eef_pose)
    return trace
