"""Calibration-dependent registration baselines.

Both baselines register the deployment-grasp cloud onto the skill-grasp cloud in the
camera frame, ``skill ~= M @ deploy``, and move ``M`` into the EEF frame with the
believed camera pose. With ``E = inverse(R) @ believed_WC`` (camera in the reference
EEF frame) the corrective is ``E @ M @ inverse(E)``. Any error in the believed
extrinsics enters this conjugation directly.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration
from .estimator import AlignmentEstimator
from .registration import Correspondences, IcpConfig, RegistrationResult, arun_svd, icp
from .se3 import IDENTITY, Pose, compose, inverse
from .world import Observation

CORRESPONDENCE_NOISE = 0.002
OUTLIER_FRACTION = 0.10
BASELINE_METHODS = ("icp", "svd")


def synthetic_correspondences(
    source: Observation,
    target: Observation,
    rng: np.random.Generator,
    noise: float = CORRESPONDENCE_NOISE,
    outlier_fraction: float = OUTLIER_FRACTION,
) -> Correspondences:
    """Ground-truth pairings through shared point ids, then corrupted.

    Each matched target point gets isotropic noise ``noise`` (m); a fraction
    ``outlier_fraction`` of pairs is re-pointed at a random target point.
    """
    if source.point_ids is None or target.point_ids is None:
        raise ValueError("synthetic correspondences need point ids on both observations")
    common, si, ti = np.intersect1d(source.point_ids, target.point_ids, return_indices=True)
    if len(common) < 3:
        raise DegenerateConfiguration(f"only {len(common)} shared points")
    src = source.points_C[si]
    tgt = target.points_C[ti].copy()
    if noise > 0:
        tgt += rng.normal(0.0, noise, size=tgt.shape)
    n_out = int(round(outlier_fraction * len(tgt)))
    if n_out > 0:
        rows = rng.choice(len(tgt), size=n_out, replace=False)
        tgt[rows] = target.points_C[rng.integers(0, len(target), size=n_out)]
    return Correspondences(src, tgt, outlier_fraction)


def register(
    source: Observation,
    target: Observation,
    method: str,
    rng: Optional[np.random.Generator] = None,
    icp_config: IcpConfig = IcpConfig(),
    noise: float = CORRESPONDENCE_NOISE,
    outlier_fraction: float = OUTLIER_FRACTION,
) -> RegistrationResult:
    """``target ~= result.relative_pose_C @ source``."""
    if method == "icp":
        return icp(source.points_C, target.points_C, IDENTITY, icp_config)
    if method == "svd":
        if rng is None:
            raise ValueError("the svd baseline needs a random generator")
        return arun_svd(synthetic_correspondences(source, target, rng, noise, outlier_fraction))
    raise ValueError(f"unknown baseline method {method!r}")


def camera_in_eef(reference_eef: Pose, believed_pose_WC: Pose) -> Pose:
    return compose(inverse(reference_eef), believed_pose_WC)


def baseline_corrective(
    skill_obs: Observation,
    deploy_obs: Observation,
    believed_extrinsics: Pose,
    method: str = "icp",
    rng: Optional[np.random.Generator] = None,
    reference_eef: Pose = IDENTITY,
    icp_config: IcpConfig = IcpConfig(),
) -> Pose:
    """Single-shot corrective from two captures taken at the reference pose.

    ``believed_extrinsics`` is the believed camera pose in the world frame.
    """
    reg = register(deploy_obs, skill_obs, method, rng, icp_config)
    e = camera_in_eef(reference_eef, believed_extrinsics)
    return compose(e, reg.relative_pose_C, inverse(e))


class IcpAlignmentEstimator(AlignmentEstimator):
    """ICP wrapped in the estimator contract so that it can drive the servo loop.

    The query is registered onto ``target`` (a capture of the grasp to align to, taken
    at the reference pose), ``target ~= M @ query``, and the prediction is
    ``E @ M @ inverse(E)`` with the believed camera-in-EEF pose ``E``.
    """

    def __init__(self, target: Observation, reference_eef: Pose, believed_pose_WC: Pose, config: IcpConfig = IcpConfig()):
        self.target = target
        self.config = config
        self.e = camera_in_eef(reference_eef, believed_pose_WC)
        self.e_inv = inverse(self.e)
        self._tree = cKDTree(target.points_C)

    def estimate(self, observation, truth=None, rng=None) -> Pose:
        reg = icp(observation.points_C, self.target.points_C, IDENTITY, self.config, self._tree)
        return compose(self.e, reg.relative_pose_C, self.e_inv)
