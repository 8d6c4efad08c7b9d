"""Rigid point-set registration: closed-form SVD fit and point-to-point ICP."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration, EmptyCloud
from .se3 import IDENTITY, Pose


@dataclass(frozen=True)
class Correspondences:
    """Paired points in {C}: ``target[i]`` should match ``source[i]``."""

    source: np.ndarray
    target: np.ndarray
    outlier_fraction: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.source, dtype=float)
        t = np.asarray(self.target, dtype=float)
        if s.shape != t.shape or s.ndim != 2 or s.shape[1] != 3:
            raise ValueError("source and target must both be (n, 3)")
        if len(s) < 3:
            raise DegenerateConfiguration("need at least 3 correspondences")
        object.__setattr__(self, "source", s)
        object.__setattr__(self, "target", t)


@dataclass(frozen=True)
class RegistrationResult:
    """``target ~= relative_pose_C.apply(source)``."""

    relative_pose_C: Pose
    rms_residual: float
    iterations: int = 0
    converged: bool = True
    residual_history: List[float] = field(default_factory=list)


def _fit(p: np.ndarray, q: np.ndarray):
    pc = p.mean(axis=0)
    qc = q.mean(axis=0)
    p0 = p - pc
    q0 = q - qc
    scale = max(np.abs(p0).max(), np.abs(q0).max(), 1e-300)
    sv = np.linalg.svd(p0, compute_uv=False)
    if len(sv) < 2 or sv[1] <= 1e-9 * scale * np.sqrt(len(p)):
        raise DegenerateConfiguration("points are collinear or coincident")
    h = p0.T @ q0
    u, _, vt = np.linalg.svd(h)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T)) or 1.0
    r = v @ np.diag([1.0, 1.0, d]) @ u.T
    return r, qc - r @ pc


def arun_svd(c: Correspondences) -> RegistrationResult:
    """Least-squares rigid transform between paired points (Arun, Huang & Blostein 1987).

    Reflections are removed by flipping the last column of ``V``, so ``det(R) = +1``.
    """
    r, t = _fit(c.source, c.target)
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = t
    resid = c.target - (c.source @ r.T + t)
    return RegistrationResult(Pose.from_matrix(m), float(np.sqrt(np.mean(np.sum(resid**2, axis=1)))))


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    tolerance: float = 1e-7  # meters, change in mean residual
    trim_factor: float = 3.0  # matches farther than this times the median are ignored
    max_rms: float = 0.003  # a result above this inlier RMS is flagged non-converged


def icp(source, target, init: Pose = IDENTITY, config: IcpConfig = IcpConfig(), tree: Optional[cKDTree] = None) -> RegistrationResult:
    """Point-to-point ICP with trimmed matches.

    The tracked residual is the mean nearest-neighbour distance over all source points.
    An update that would raise it is rejected and the loop stops, so the residual
    history is non-increasing. ``iterations`` counts match-and-fit rounds, including
    a final rejected one.
    """
    src = np.asarray(source, dtype=float)
    tgt = np.asarray(target, dtype=float)
    if len(src) == 0 or len(tgt) == 0:
        raise EmptyCloud("ICP needs two non-empty clouds")
    if tree is None:
        tree = cKDTree(tgt)
    pose = init
    d, idx = tree.query(pose.apply(src))
    history = [float(d.mean())]
    iterations = 0
    for _ in range(config.max_iterations):
        inl = d <= config.trim_factor * np.median(d) + 1e-15
        if inl.sum() < 3:
            break
        try:
            r, t = _fit(src[inl], tgt[idx[inl]])
        except DegenerateConfiguration:
            break
        m = np.eye(4)
        m[:3, :3] = r
        m[:3, 3] = t
        cand = Pose.from_matrix(m)
        d_new, idx_new = tree.query(cand.apply(src))
        j = float(d_new.mean())
        iterations += 1
        if j > history[-1]:
            break
        pose, d, idx = cand, d_new, idx_new
        history.append(j)
        if history[-2] - j < config.tolerance:
            break
    inl = d <= config.trim_factor * np.median(d) + 1e-15
    rms = float(np.sqrt(np.mean(d[inl] ** 2)))
    return RegistrationResult(pose, rms, iterations, rms <= config.max_rms, history)
