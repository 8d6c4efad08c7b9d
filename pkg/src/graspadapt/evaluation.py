"""Evaluation protocols: forward-kinematics accuracy, peg-in-hole tolerance, calibration sweep.

Accuracy protocol, per object and method:

1. Sample a skill grasp ``S`` near the reference grasp and servo at the reference pose
   ``R`` to get the skill alignment ``A_S``.
2. Without touching the grasp, move the EEF to ``R @ N``. By the emulation identity the
   camera now sees the deployment grasp ``N @ S`` held at ``R``; servo on it to get
   ``A_D``.
3. ``C = inverse(A_S) @ A_D``. A perfect corrective undoes ``N``, so the error is
   ``error_between(R @ N @ C, R)``, computed from simulator kinematics only.

Trials draw their randomness from generators seeded by ``(seed, object, grasp,
deployment, ...)``, so methods are paired and results do not depend on the number of
worker processes.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .adapt import compute_corrective, insertion_trajectory
from .baselines import IcpAlignmentEstimator, baseline_corrective
from .collect import ReferenceSetup, collect_dataset
from .errors import GraspAdaptError, ProtocolViolation
from .estimator import (
    GroundTruthAccess,
    OracleEstimator,
    RetrievalConfig,
    build_two_stage,
)
from .scene import Scene, extrinsics_error
from .se3 import Pose, compose, error_between, sample_displacement
from .servo import run_servo
from .world import ObjectModel, WorldState, observe

SERVO_METHODS = ("oracle", "retrieval", "icp-servo")
SINGLE_SHOT_METHODS = ("icp", "svd")
METHODS = SERVO_METHODS + SINGLE_SHOT_METHODS
CSV_COLUMNS = ("object", "method", "mean_mm", "std_mm", "mean_deg", "std_deg", "n")


def derived_seed(*parts: int) -> int:
    """A 32-bit seed derived from integer parts, stable across platforms."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# -- method construction -----------------------------------------------------


def build_method(scene: Scene, obj: ObjectModel, method: str, seed: int, obj_index: int = 0, world: Optional[WorldState] = None):
    """Estimator for a servo method, or ``None`` for a single-shot baseline."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    w = world if world is not None else scene.world(obj)
    spec = scene.estimator
    if method == "oracle":
        return OracleEstimator(spec.noise_t_mm / 1000.0, spec.noise_r_deg, derived_seed(seed, obj_index, 7))
    if method == "retrieval":
        return build_retrieval_for(scene, w, seed, obj_index)
    if method == "icp-servo":
        ref_obs = observe(w, np.random.default_rng([seed, obj_index, 99]))
        return IcpAlignmentEstimator(ref_obs, scene.reference_eef, w.camera.believed_pose_WC)
    return None


def build_retrieval_for(scene: Scene, world: WorldState, seed: int, obj_index: int = 0):
    spec = scene.estimator
    cfg = RetrievalConfig(refine_icp=spec.refine_icp, descriptor_bins=spec.descriptor_bins, candidates=spec.candidates)
    data = collect_dataset(world, scene.collect_range, scene.m, derived_seed(seed, obj_index, 1))
    fine = None
    if scene.fine_m > 0 and spec.fine_range.issubset(scene.collect_range):
        fine = collect_dataset(world, spec.fine_range, scene.fine_m, derived_seed(seed, obj_index, 2))
    return build_two_stage(data, cfg, spec.fine_range, fine)


def _servo_alignment(world, est, scene, rng, truth: GroundTruthAccess) -> Pose:
    reads = truth.reads
    trace = run_servo(world, est, scene.servo, rng, scene.reference_eef, truth)
    if not est.uses_ground_truth and truth.reads != reads:
        raise ProtocolViolation(f"{type(est).__name__} read simulator truth")
    return trace.final_alignment


# -- accuracy protocol -------------------------------------------------------


@dataclass
class Trial:
    object: str
    method: str
    grasp: int
    deployment: int
    position_mm: float = math.nan
    orientation_deg: float = math.nan
    ok: bool = True
    failure: str = ""
    corrective: Optional[dict] = None


@dataclass
class ReportRow:
    object: str
    method: str
    mean_mm: float
    std_mm: float
    mean_deg: float
    std_deg: float
    n: int
    failures: int = 0


@dataclass
class AccuracyReport:
    rows: List[ReportRow] = field(default_factory=list)
    trials: List[Trial] = field(default_factory=list)
    seed: int = 0
    grasps: int = 4
    deployments: int = 5

    def row(self, obj: str, method: str) -> ReportRow:
        for r in self.rows:
            if r.object == obj and r.method == method:
                return r
        raise KeyError((obj, method))

    def trial_errors(self, obj: str, method: str) -> np.ndarray:
        return np.array([[t.position_mm, t.orientation_deg] for t in self.trials if t.object == obj and t.method == method])

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "grasps": self.grasps,
            "deployments": self.deployments,
            "rows": [asdict(r) for r in self.rows],
            "trials": [asdict(t) for t in self.trials],
        }

    @classmethod
    def from_json(cls, d: dict) -> "AccuracyReport":
        return cls(
            [ReportRow(**r) for r in d.get("rows", [])],
            [Trial(**t) for t in d.get("trials", [])],
            d.get("seed", 0),
            d.get("grasps", 4),
            d.get("deployments", 5),
        )

    def __eq__(self, other):
        if not isinstance(other, AccuracyReport):
            return NotImplemented
        return json.dumps(self.to_json(), sort_keys=True) == json.dumps(other.to_json(), sort_keys=True)


def summarize(obj: str, method: str, trials: Sequence[Trial]) -> ReportRow:
    ok = [t for t in trials if t.ok]
    pos = np.array([t.position_mm for t in ok])
    ang = np.array([t.orientation_deg for t in ok])
    n = len(ok)

    def sd(x):
        return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0

    return ReportRow(
        obj,
        method,
        float(pos.mean()) if n else math.nan,
        sd(pos),
        float(ang.mean()) if n else math.nan,
        sd(ang),
        n,
        len(trials) - n,
    )


@dataclass(frozen=True)
class _GraspTask:
    scene: Scene
    obj_index: int
    method: str
    grasp: int
    seed: int


# estimators shared with worker processes through the pool initializer
_WORKER_ESTIMATORS: Dict = {}


def _init_worker(estimators):
    _WORKER_ESTIMATORS.clear()
    _WORKER_ESTIMATORS.update(estimators)


def _run_grasp(task: _GraspTask) -> List[Trial]:
    scene, oi, method, g, seed = task.scene, task.obj_index, task.method, task.grasp, task.seed
    obj = scene.objects[oi]
    est = _WORKER_ESTIMATORS.get((oi, method))
    proto = scene.protocol
    R = scene.reference_eef
    world = scene.world(obj)
    skill_grasp = compose(sample_displacement(proto.skill_range, np.random.default_rng([seed, oi, g])), scene.reference_grasp)
    skill_world = world.replace(grasp=skill_grasp)
    truth = GroundTruthAccess(ReferenceSetup(R, scene.reference_grasp))
    out = []
    skill_alignment = skill_obs = None
    skill_failure = ""
    try:
        if est is not None:
            skill_alignment = _servo_alignment(skill_world, est, scene, np.random.default_rng([seed, oi, g, 1000]), truth)
        else:
            skill_obs = observe(skill_world, np.random.default_rng([seed, oi, g, 1000]))
    except ProtocolViolation:
        raise
    except GraspAdaptError as e:
        skill_failure = f"skill: {type(e).__name__}: {e}"
    for d in range(proto.deployments):
        trial = Trial(obj.name, method, g, d)
        out.append(trial)
        if skill_failure:
            trial.ok, trial.failure = False, skill_failure
            continue
        rng_d = np.random.default_rng([seed, oi, g, d])
        n = sample_displacement(proto.deploy_range, rng_d)
        noise_rng = np.random.default_rng([seed, oi, g, d, 1000])
        try:
            if est is not None:
                # the EEF at R @ n holding the skill grasp looks like grasp n @ S held at R
                deploy_world = world.replace(grasp=compose(n, skill_grasp))
                corrective = compute_corrective(skill_alignment, _servo_alignment(deploy_world, est, scene, noise_rng, truth))
            else:
                moved = skill_world.replace(eef_pose=compose(R, n))
                deploy_obs = observe(moved, noise_rng)
                corrective = baseline_corrective(skill_obs, deploy_obs, world.camera.believed_pose_WC, method, noise_rng, R)
        except ProtocolViolation:
            raise
        except GraspAdaptError as e:
            trial.ok, trial.failure = False, f"{type(e).__name__}: {e}"
            continue
        err = error_between(compose(R, n, corrective), R)
        trial.position_mm, trial.orientation_deg = err.position_mm, err.orientation_deg
        trial.corrective = corrective.to_json()
    return out


def _map(fn, tasks, estimators, workers: int):
    if workers <= 1:
        _init_worker(estimators)
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(estimators,)) as ex:
        return list(ex.map(fn, tasks))


def prepare_estimators(scene: Scene, methods: Sequence[str], seed: int) -> Dict:
    est = {}
    for oi, obj in enumerate(scene.objects):
        for m in methods:
            e = build_method(scene, obj, m, seed, oi)
            if e is not None:
                est[(oi, m)] = e
    return est


def run_accuracy_protocol(
    scene: Scene,
    methods: Sequence[str] = ("oracle",),
    grasps: Optional[int] = None,
    deployments: Optional[int] = None,
    seed: int = 0,
    workers: int = 1,
    estimators: Optional[Dict] = None,
) -> AccuracyReport:
    """grasps x deployments evaluations per object and method.

    Trial failures (empty captures, servo leaving the workspace) are recorded in the
    report and excluded from the statistics. A method reading ground truth it should not
    see raises ProtocolViolation.
    """
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    proto = scene.protocol
    if grasps is not None or deployments is not None:
        proto = replace(proto, grasps=grasps or proto.grasps, deployments=deployments or proto.deployments)
        scene = scene.with_changes(protocol=proto)
    if estimators is None:
        estimators = prepare_estimators(scene, methods, seed)
    tasks = [
        _GraspTask(scene, oi, m, g, seed)
        for oi in range(len(scene.objects))
        for m in methods
        for g in range(proto.grasps)
    ]
    results = _map(_run_grasp, tasks, estimators, workers)
    report = AccuracyReport(seed=seed, grasps=proto.grasps, deployments=proto.deployments)
    for oi, obj in enumerate(scene.objects):
        for m in methods:
            trials = [t for task, chunk in zip(tasks, results) if task.obj_index == oi and task.method == m for t in chunk]
            report.trials.extend(trials)
            report.rows.append(summarize(obj.name, m, trials))
    return report


# -- peg in hole -------------------------------------------------------------


@dataclass
class PegTrial:
    method: str
    trial: int
    lateral_mm: float = math.nan
    tilt_deg: float = math.nan
    ok: bool = True
    failure: str = ""


@dataclass
class PegInHoleStudy:
    tolerances_mm: List[float]
    trials_per: int
    max_tilt_deg: float = 5.0
    successes: Dict[str, List[int]] = field(default_factory=dict)
    trials: List[PegTrial] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.tolerances_mm, self.tolerances_mm[1:])):
            raise ValueError("tolerances must be strictly increasing")

    def rates(self, method: str) -> List[float]:
        return [s / self.trials_per for s in self.successes[method]]

    def average_rate(self, method: str) -> float:
        return float(np.mean(self.rates(method)))

    def to_json(self) -> dict:
        return {
            "tolerances_mm": list(self.tolerances_mm),
            "trials_per": self.trials_per,
            "max_tilt_deg": self.max_tilt_deg,
            "successes": self.successes,
            "trials": [asdict(t) for t in self.trials],
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PegInHoleStudy":
        return cls(
            list(d["tolerances_mm"]),
            d["trials_per"],
            d.get("max_tilt_deg", 5.0),
            {k: list(v) for k, v in d.get("successes", {}).items()},
            [PegTrial(**t) for t in d.get("trials", [])],
            d.get("seed", 0),
        )


def peg_tip_and_axis(obj: ObjectModel) -> tuple[np.ndarray, np.ndarray]:
    """Peg tip (object frame) at the +x end on the principal axis, and the axis itself."""
    p = obj.points
    tip = np.array([p[:, 0].max(), p[:, 1].mean(), p[:, 2].mean()])
    return tip, np.array([1.0, 0.0, 0.0])


def peg_errors(final_skill: Pose, final_deploy: Pose, tip: np.ndarray, axis: np.ndarray) -> tuple[float, float]:
    """Lateral tip offset (mm) perpendicular to the skill peg axis, and tilt (deg)."""
    a_s = final_skill.rotation @ axis
    a_d = final_deploy.rotation @ axis
    d = final_deploy.apply(tip[None])[0] - final_skill.apply(tip[None])[0]
    lateral = d - (d @ a_s) * a_s
    tilt = math.degrees(math.acos(float(np.clip(a_s @ a_d, -1.0, 1.0))))
    return 1000.0 * float(np.linalg.norm(lateral)), tilt


@dataclass(frozen=True)
class _PegTask:
    scene: Scene
    method: str
    trial: int
    seed: int


def _run_peg_trial(task: _PegTask) -> PegTrial:
    scene, method, i, seed = task.scene, task.method, task.trial, task.seed
    obj = scene.objects[0]
    est = _WORKER_ESTIMATORS.get((0, method))
    proto = scene.protocol
    R = scene.reference_eef
    world = scene.world(obj)
    rng = np.random.default_rng([seed, i])
    skill_grasp = compose(sample_displacement(proto.skill_range, rng), scene.reference_grasp)
    deploy_grasp = compose(sample_displacement(proto.deploy_range, rng), skill_grasp)
    start = compose(R, sample_displacement(proto.skill_range, rng))
    traj = insertion_trajectory(start)
    truth = GroundTruthAccess(ReferenceSetup(R, scene.reference_grasp))
    out = PegTrial(method, i)
    try:
        skill_world = world.replace(grasp=skill_grasp)
        deploy_world = world.replace(grasp=deploy_grasp)
        if est is not None:
            a_s = _servo_alignment(skill_world, est, scene, np.random.default_rng([seed, i, 1]), truth)
            a_d = _servo_alignment(deploy_world, est, scene, np.random.default_rng([seed, i, 2]), truth)
            corrective = compute_corrective(a_s, a_d)
        else:
            s_obs = observe(skill_world, np.random.default_rng([seed, i, 1]))
            d_obs = observe(deploy_world, np.random.default_rng([seed, i, 2]))
            corrective = baseline_corrective(s_obs, d_obs, world.camera.believed_pose_WC, method, np.random.default_rng([seed, i, 3]), R)
    except ProtocolViolation:
        raise
    except GraspAdaptError as e:
        out.ok, out.failure = False, f"{type(e).__name__}: {e}"
        return out
    end = traj.displacements[-1]
    final_skill = compose(start, end, skill_grasp)
    final_deploy = compose(start, end, corrective, deploy_grasp)
    tip, axis = peg_tip_and_axis(obj)
    out.lateral_mm, out.tilt_deg = peg_errors(final_skill, final_deploy, tip, axis)
    return out


def run_peg_study(
    scene: Scene,
    methods: Sequence[str] = ("oracle",),
    tolerances: Optional[Sequence[float]] = None,
    trials_per: Optional[int] = None,
    seed: int = 0,
    workers: int = 1,
    estimators: Optional[Dict] = None,
) -> PegInHoleStudy:
    """Insertion with the first scene object as the peg (tip at its +x end).

    Each trial's errors are computed once and thresholded at every tolerance, so the
    same trials are shared across tolerances and success can only grow with tolerance.
    """
    proto = scene.protocol
    tol = list(tolerances if tolerances is not None else proto.tolerances_mm)
    n = trials_per if trials_per is not None else proto.trials_per
    study = PegInHoleStudy(tol, n, proto.max_tilt_deg, seed=seed)
    if estimators is None:
        estimators = {}
        for m in methods:
            e = build_method(scene, scene.objects[0], m, seed, 0)
            if e is not None:
                estimators[(0, m)] = e
    tasks = [_PegTask(scene, m, i, seed) for m in methods for i in range(n)]
    results = _map(_run_peg_trial, tasks, estimators, workers)
    study.trials = results
    for m in methods:
        mine = [t for t in results if t.method == m]
        study.successes[m] = [
            sum(1 for t in mine if t.ok and t.lateral_mm < tmm and t.tilt_deg < proto.max_tilt_deg) for tmm in tol
        ]
    return study


# -- calibration sweep -------------------------------------------------------


@dataclass
class SweepResult:
    errors_mm: List[float]
    reports: List[AccuracyReport]

    def mean_mm(self, obj: str, method: str) -> List[float]:
        return [r.row(obj, method).mean_mm for r in self.reports]

    def correctives(self, method: str) -> List[List[Optional[dict]]]:
        return [[t.corrective for t in r.trials if t.method == method] for r in self.reports]


def run_calibration_sweep(
    scene: Scene,
    methods: Sequence[str] = ("retrieval", "icp"),
    errors_mm: Sequence[float] = (0.0, 5.0, 10.0),
    seed: int = 0,
    workers: int = 1,
) -> SweepResult:
    """Accuracy protocol repeated with the believed extrinsics off by each ``errors_mm``.

    Calibration-free estimators are built once from the unperturbed scene; the datasets
    they index do not depend on the believed extrinsics anyway.
    """
    reports = []
    shared = {}
    for e_mm in errors_mm:
        s = scene.with_changes(extrinsics_error=extrinsics_error(e_mm, 0.0))
        est = {}
        for oi, obj in enumerate(s.objects):
            for m in methods:
                if (oi, m) in shared:
                    est[(oi, m)] = shared[(oi, m)]
                    continue
                e = build_method(s, obj, m, seed, oi)
                if e is None:
                    continue
                if m in ("oracle", "retrieval"):
                    shared[(oi, m)] = e
                est[(oi, m)] = e
        reports.append(run_accuracy_protocol(s, methods, seed=seed, workers=workers, estimators=est))
    return SweepResult(list(errors_mm), reports)


# -- report emission ---------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def report_csv(report: AccuracyReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(CSV_COLUMNS)
    for r in report.rows:
        w.writerow([r.object, r.method, _fmt(r.mean_mm), _fmt(r.std_mm), _fmt(r.mean_deg), _fmt(r.std_deg), r.n])
    return buf.getvalue()


def emit_report(report, fmt: str, path) -> None:
    """Write ``report`` (AccuracyReport or PegInHoleStudy) as csv or json, atomically."""
    if fmt == "csv":
        if isinstance(report, AccuracyReport):
            text = report_csv(report)
        else:
            text = peg_csv(report)
    elif fmt == "json":
        text = json.dumps(report.to_json(), sort_keys=True, indent=1) + "\n"
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def peg_csv(study: PegInHoleStudy) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(("tolerance_mm", "method", "successes", "trials", "rate"))
    for m, counts in study.successes.items():
        for tmm, c in zip(study.tolerances_mm, counts):
            w.writerow([_fmt(tmm), m, c, study.trials_per, _fmt(c / study.trials_per)])
    return buf.getvalue()


def load_report(path):
    with open(path) as f:
        d = json.load(f)
    if "tolerances_mm" in d:
        return PegInHoleStudy.from_json(d)
    return AccuracyReport.from_json(d)


def format_table(report: AccuracyReport) -> str:
    lines = [f"{'object':<10} {'method':<10} {'mm':>16} {'deg':>16} {'n':>3}"]
    for r in report.rows:
        lines.append(
            f"{r.object:<10} {r.method:<10} {r.mean_mm:7.3f} +- {r.std_mm:6.3f} {r.mean_deg:7.3f} +- {r.std_deg:6.3f} {r.n:3d}"
        )
    return "\n".join(lines)
