"""Alignment estimators: observation -> EEF displacement that aligns the grasp to the reference grasp.

Two implementations stand in for a learned alignment network:

* :class:`OracleEstimator` reads simulator truth through an audited probe and adds
  controlled noise; it isolates the pipeline algebra from perception error.
* :class:`RetrievalEstimator` is built purely from a :class:`GraspDataset`. It looks up
  the stored capture with the closest descriptor and, optionally, refines its label
  with ICP between the query and that capture.

Refinement algebra. Let ``K`` be the camera pose in the reference-EEF frame and ``L``
the retrieved label. If ICP gives the camera-frame motion ``M`` with
``stored ~= M . query``, the aligning displacement for the query is

    X = L @ K @ M @ inverse(K)

``K`` is never read from the camera model. It is solved once at build time from the
dataset itself: for two stored captures ``i, j`` the camera-frame motion ``M_ij``
between them satisfies ``K M_ij = B_ij K`` with the known EEF motion
``B_ij = inverse(L_j) @ L_i`` (a hand-eye problem).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .collect import GraspDataset, ReferenceSetup, subset_by_range
from .errors import EmptyDataset, EmptyObservation, EmptySubset, RefinementDiverged
from .registration import IcpConfig, RegistrationResult, icp
from .se3 import IDENTITY, Pose, SampleRange, compose, inverse
from .world import Observation, WorldState, aligning_displacement

DEFAULT_FINE_RANGE = SampleRange(0.06, 12.0)
MIN_FINE_ENTRIES = 8

TruthProbe = Callable[[], Pose]


class GroundTruthAccess:
    """Audited access to simulator truth. Every read is counted in ``reads``."""

    def __init__(self, reference: ReferenceSetup):
        self.reference = reference
        self.reads = 0

    def aligning_displacement(self, state: WorldState) -> Pose:
        self.reads += 1
        return aligning_displacement(
            state.eef_pose, state.grasp, self.reference.reference_eef, self.reference.reference_grasp
        )

    def probe(self, state: WorldState) -> TruthProbe:
        return lambda: self.aligning_displacement(state)


class AlignmentEstimator:
    """Contract: ``estimate(observation) -> Pose``, the predicted aligning displacement."""

    trained_range: SampleRange = SampleRange(0.30, 60.0)
    uses_ground_truth = False

    def estimate(self, observation: Observation, truth: Optional[TruthProbe] = None, rng=None) -> Pose:
        raise NotImplementedError


# -- oracle ------------------------------------------------------------------


def random_perturbation(rng: np.random.Generator, noise_t: float, noise_r_deg: float) -> Pose:
    """Translation ~ N(0, noise_t) per axis; rotation by N(0, noise_r) degrees about a uniform axis."""
    t = rng.normal(0.0, noise_t, size=3) if noise_t > 0 else np.zeros(3)
    if noise_r_deg > 0:
        axis = rng.normal(size=3)
        angle = math.radians(rng.normal(0.0, noise_r_deg))
        return Pose.from_axis_angle(axis, angle, t)
    return Pose.from_translation(t)


def oracle_estimate(o: Observation, truth: Pose, noise_t: float = 0.0, noise_r_deg: float = 0.0, rng=None) -> Pose:
    """``truth`` composed with a random perturbation; exact when both noises are zero."""
    if noise_t == 0 and noise_r_deg == 0:
        return truth
    return compose(truth, random_perturbation(rng, noise_t, noise_r_deg))


class OracleEstimator(AlignmentEstimator):
    uses_ground_truth = True

    def __init__(self, noise_t: float = 0.0, noise_r_deg: float = 0.0, seed: int = 0, trained_range=None):
        self.noise_t = noise_t
        self.noise_r_deg = noise_r_deg
        self._rng = np.random.default_rng(seed)
        if trained_range is not None:
            self.trained_range = trained_range

    def estimate(self, observation, truth=None, rng=None) -> Pose:
        if truth is None:
            raise ValueError("the oracle estimator needs a ground-truth probe")
        return oracle_estimate(observation, truth(), self.noise_t, self.noise_r_deg, rng if rng is not None else self._rng)


# -- retrieval ---------------------------------------------------------------


@dataclass(frozen=True)
class RetrievalConfig:
    refine_icp: bool = True
    descriptor_bins: int = 16
    icp: IcpConfig = IcpConfig(max_iterations=30, tolerance=1e-7, max_rms=0.003)
    calibration_pairs: int = 60
    candidates: int = 32  # nearest entries tried, in order, by ICP refinement
    embedding_degree: int = 3
    lever: float = 0.1  # meters per radian when mixing rotation and translation


def descriptor(points: np.ndarray, appearance: Optional[np.ndarray], bins: int, r_max: float) -> np.ndarray:
    """Centroid (3) + centred covariance upper triangle (6) + radial histogram (``bins``).

    Histogram weights are the per-point appearance values when present.
    """
    c = points.mean(axis=0)
    p = points - c
    cov = p.T @ p / len(p)
    iu = np.triu_indices(3)
    r = np.linalg.norm(p, axis=1)
    hist, _ = np.histogram(np.minimum(r, r_max * (1 - 1e-12)), bins=bins, range=(0.0, r_max), weights=appearance)
    total = hist.sum()
    if total > 0:
        hist = hist / total
    return np.concatenate([c, cov[iu], hist])


def _poly_features(z: np.ndarray, degree: int) -> np.ndarray:
    """Monomials up to ``degree`` of the 9 moment features, plus the histogram linearly."""
    moments, hist = z[:, :9], z[:, 9:]
    cols = [np.ones((len(z), 1)), moments]
    prev = [(i,) for i in range(9)]
    for _ in range(degree - 1):
        nxt = [c + (j,) for c in prev for j in range(c[-1], 9)]
        cols.append(np.column_stack([np.prod(moments[:, list(c)], axis=1) for c in nxt]))
        prev = nxt
    cols.append(hist)
    return np.hstack(cols)


def label_coordinates(labels, lever: float) -> np.ndarray:
    return np.array([np.concatenate([p.t, lever * p.rotvec()]) for p in labels])


@dataclass(frozen=True)
class Retrieval:
    """Diagnostics for one lookup."""

    index: int
    label: Pose
    estimate: Pose
    refined: bool
    registration: Optional[RegistrationResult] = None


class RetrievalEstimator(AlignmentEstimator):
    """Nearest stored capture by descriptor, optionally refined by ICP.

    Descriptors are standardized and mapped through a least-squares polynomial fit onto
    label coordinates ``(t, lever * rotvec)``; the KD-tree lives in that embedding so
    that descriptor distance tracks pose distance. Datasets with fewer than 50 entries
    index the standardized descriptors directly.
    """

    def __init__(self, dataset: GraspDataset, config: RetrievalConfig, camera_in_eef: Optional[Pose]):
        if len(dataset) == 0:
            raise EmptyDataset("cannot build a retrieval estimator from an empty dataset")
        self.dataset = dataset
        self.config = config
        self.trained_range = dataset.range
        self.camera_in_eef = camera_in_eef
        clouds = [o.points_C for o in dataset.observations]
        self.r_max = 1.05 * max(float(np.linalg.norm(c - c.mean(axis=0), axis=1).max()) for c in clouds) or 1.0
        self.descriptors = np.array([descriptor(o.points_C, o.appearance, config.descriptor_bins, self.r_max) for o in dataset.observations])
        self.mean = self.descriptors.mean(axis=0)
        std = self.descriptors.std(axis=0)
        # features that are constant up to rounding carry no information
        live = std > 1e-9 * (1.0 + np.abs(self.mean))
        self.inv_std = np.where(live, 1.0 / np.where(live, std, 1.0), 0.0)
        z = (self.descriptors - self.mean) * self.inv_std
        # queries are clipped to the training box so the polynomial never extrapolates
        self.z_lo, self.z_hi = z.min(axis=0), z.max(axis=0)
        self.weights = None
        if len(dataset) >= 50:
            f = _poly_features(z, config.embedding_degree)
            y = label_coordinates(dataset.labels, config.lever)
            self.weights = np.linalg.solve(f.T @ f + 1e-4 * np.eye(f.shape[1]), f.T @ y)
            z = f @ self.weights
        self.embedded = z
        self.index = cKDTree(z)
        self._trees = {}

    def embed(self, o: Observation) -> np.ndarray:
        z = (descriptor(o.points_C, o.appearance, self.config.descriptor_bins, self.r_max) - self.mean) * self.inv_std
        z = np.clip(z, self.z_lo, self.z_hi)
        if self.weights is None:
            return z
        return (_poly_features(z[None], self.config.embedding_degree) @ self.weights)[0]

    def _tree(self, i: int) -> cKDTree:
        if i not in self._trees:
            self._trees[i] = cKDTree(self.dataset.entries[i][0].points_C)
        return self._trees[i]

    def retrieve(self, o: Observation) -> Retrieval:
        if len(o) == 0:
            raise EmptyObservation("empty query")
        k = min(max(self.config.candidates, 1), len(self.dataset))
        _, idx = self.index.query(self.embed(o), k=k)
        idx = np.atleast_1d(idx)
        first = int(idx[0])
        label = self.dataset.entries[first][1]
        if not self.config.refine_icp or self.camera_in_eef is None:
            return Retrieval(first, label, label, False)
        cam = self.camera_in_eef
        for i in map(int, idx):
            try:
                reg = _refine(o.points_C, self.dataset.entries[i][0].points_C, self.config.icp, self._tree(i))
            except RefinementDiverged:
                continue
            stored_label = self.dataset.entries[i][1]
            return Retrieval(i, stored_label, compose(stored_label, cam, reg.relative_pose_C, inverse(cam)), True, reg)
        return Retrieval(first, label, label, False)

    def estimate(self, observation, truth=None, rng=None) -> Pose:
        return self.retrieve(observation).estimate

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_trees"] = {}
        return state


def _refine(query: np.ndarray, stored: np.ndarray, config: IcpConfig, tree=None) -> RegistrationResult:
    reg = icp(query, stored, IDENTITY, config, tree)
    if not reg.converged:
        raise RefinementDiverged(f"ICP residual {reg.rms_residual:.4g} m above {config.max_rms} m")
    return reg


def label_distance_matrix(labels, lever: float = 0.1) -> np.ndarray:
    """Pairwise pose distance ``|dt| + lever * angle`` (meters) between labels."""
    t = np.array([p.t for p in labels])
    q = np.array([p.q for p in labels])
    dt = np.linalg.norm(t[:, None, :] - t[None, :, :], axis=-1)
    dots = np.clip(np.abs(q @ q.T), 0.0, 1.0)
    return dt + lever * 2.0 * np.arccos(dots)


def calibrate_camera_in_eef(dataset: GraspDataset, n_pairs: int = 60, config: IcpConfig = IcpConfig(max_iterations=50)) -> Optional[Pose]:
    """Hand-eye estimate of the camera pose in the reference-EEF frame from dataset pairs.

    Uses the closest label pairs whose relative rotation is at least 3 degrees, registers
    their stored clouds with ICP and solves ``K M = B K``. Returns ``None`` when the
    dataset does not constrain ``K`` (too few usable pairs or parallel rotation axes).
    """
    n = len(dataset)
    if n < 3:
        return None
    labels = dataset.labels
    dist = label_distance_matrix(labels)
    np.fill_diagonal(dist, np.inf)
    q = np.array([p.q for p in labels])
    rot = 2.0 * np.arccos(np.clip(np.abs(q @ q.T), 0.0, 1.0))
    dist[rot < math.radians(3.0)] = np.inf
    iu = np.triu_indices(n, 1)
    order = np.argsort(dist[iu], kind="stable")
    pairs = []
    for k in order[: 4 * n_pairs]:
        i, j = int(iu[0][k]), int(iu[1][k])
        if not np.isfinite(dist[i, j]):
            break
        oi, oj = dataset.entries[i][0], dataset.entries[j][0]
        if len(oi) < 8 or len(oj) < 8:
            continue
        reg = icp(oi.points_C, oj.points_C, IDENTITY, config)
        if not reg.converged:
            continue
        b = compose(inverse(labels[j]), labels[i])
        pairs.append((reg.relative_pose_C, b))
        if len(pairs) >= n_pairs:
            break
    if len(pairs) < 3:
        return None
    k = _solve_hand_eye(pairs)
    if k is None:
        return None
    # one round of outlier rejection on the rotation-axis residual
    resid = np.array([np.linalg.norm(k.rotation @ m.rotvec() - b.rotvec()) for m, b in pairs])
    keep = resid <= max(3.0 * np.median(resid), 1e-6)
    if keep.sum() >= 3 and not keep.all():
        k = _solve_hand_eye([p for p, ok in zip(pairs, keep) if ok]) or k
    return k


def _solve_hand_eye(pairs) -> Optional[Pose]:
    a = np.array([m.rotvec() for m, _ in pairs])
    b = np.array([bb.rotvec() for _, bb in pairs])
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[1] < 1e-3 * sv[0]:
        return None
    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T)) or 1.0
    r = v @ np.diag([1.0, 1.0, d]) @ u.T
    lhs = np.vstack([bb.rotation - np.eye(3) for _, bb in pairs])
    rhs = np.concatenate([r @ np.asarray(m.t) - np.asarray(bb.t) for m, bb in pairs])
    t, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    m4 = np.eye(4)
    m4[:3, :3] = r
    m4[:3, 3] = t
    return Pose.from_matrix(m4)


def build_retrieval(d: GraspDataset, config: RetrievalConfig = RetrievalConfig(), camera_in_eef: Optional[Pose] = None) -> RetrievalEstimator:
    """Index the dataset. ``camera_in_eef`` is self-calibrated from ``d`` unless given."""
    if len(d) == 0:
        raise EmptyDataset("empty dataset")
    if camera_in_eef is None and config.refine_icp:
        camera_in_eef = calibrate_camera_in_eef(d, config.calibration_pairs)
    return RetrievalEstimator(d, config, camera_in_eef)


def retrieval_estimate(e: RetrievalEstimator, o: Observation) -> Pose:
    return e.estimate(o)


# -- coarse / fine -----------------------------------------------------------


class TwoStageEstimator(AlignmentEstimator):
    """A full-range estimator for the first servo steps and a short-range one afterwards."""

    def __init__(self, coarse: AlignmentEstimator, fine: AlignmentEstimator):
        if not fine.trained_range.issubset(coarse.trained_range):
            raise ValueError("fine range must lie inside the coarse range")
        self.coarse = coarse
        self.fine = fine
        self.trained_range = coarse.trained_range
        self.uses_ground_truth = coarse.uses_ground_truth or fine.uses_ground_truth

    def estimate(self, observation, truth=None, rng=None, stage: str = "coarse") -> Pose:
        if stage == "coarse":
            return self.coarse.estimate(observation, truth, rng)
        if stage == "fine":
            return self.fine.estimate(observation, truth, rng)
        raise ValueError(f"unknown stage {stage!r}")


def two_stage_estimate(t: TwoStageEstimator, o: Observation, stage: str, truth=None, rng=None) -> Pose:
    return t.estimate(o, truth, rng, stage=stage)


def build_two_stage(
    d: GraspDataset,
    config: RetrievalConfig = RetrievalConfig(),
    fine_range: SampleRange = DEFAULT_FINE_RANGE,
    fine_dataset: Optional[GraspDataset] = None,
    camera_in_eef: Optional[Pose] = None,
) -> TwoStageEstimator:
    """Coarse retrieval on the whole dataset, fine retrieval on the ``fine_range`` subset.

    A dedicated ``fine_dataset`` collected over the short range replaces the subset when
    given. With fewer than 8 fine entries the coarse estimator is reused. A known
    ``camera_in_eef`` skips the self-calibration.
    """
    coarse = build_retrieval(d, config, camera_in_eef)
    if fine_dataset is not None:
        if not fine_dataset.range.issubset(d.range):
            raise ValueError("the fine dataset range must lie inside the coarse range")
        sub = fine_dataset
    else:
        try:
            sub = subset_by_range_safe(d, fine_range)
        except EmptySubset:
            sub = None
    if sub is None or len(sub) < MIN_FINE_ENTRIES:
        return TwoStageEstimator(coarse, coarse)
    fine = build_retrieval(sub, config, camera_in_eef=coarse.camera_in_eef)
    return TwoStageEstimator(coarse, fine)


def subset_by_range_safe(d: GraspDataset, sub: SampleRange) -> GraspDataset:
    """``subset_by_range`` with ``sub`` clipped to the dataset range."""
    clipped = SampleRange(min(sub.position_halfwidth, d.range.position_halfwidth), min(sub.orientation_halfwidth, d.range.orientation_halfwidth))
    return subset_by_range(d, clipped)
