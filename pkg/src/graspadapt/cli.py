"""Command-line interface.

Every subcommand reads an optional scene JSON (``--scene``), is deterministic for a
given ``--seed`` and writes its result to ``--out`` (stdout when omitted). Exit codes:
0 on success, 1 on I/O or configuration errors, 2 when a method breaks the evaluation
protocol (an estimator reading simulator truth it must not see).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from . import evaluation as ev
from .adapt import (
    SkillRecord,
    compute_corrective,
    execute_adapted,
    insertion_trajectory,
    load_skill,
    random_trajectory,
    save_skill,
    trajectory_deviation,
)
from .baselines import BASELINE_METHODS, baseline_corrective
from .collect import GraspDataset, ReferenceSetup, collect_dataset, load_dataset, save_dataset
from .errors import FormatError, GraspAdaptError, ProtocolViolation
from .estimator import (
    GroundTruthAccess,
    OracleEstimator,
    RetrievalConfig,
    build_two_stage,
)
from .scene import Scene, extrinsics_error, load_scene
from .se3 import Pose, SampleRange, compose, error_between, inverse, sample_displacement
from .servo import run_servo
from .world import observe

MANIFEST_VERSION = 1


# -- argument helpers --------------------------------------------------------


def parse_range(text: str) -> SampleRange:
    """``"0.30,60"`` -> SampleRange(0.30 m, 60 deg)."""
    try:
        a, b = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'meters,degrees', got {text!r}") from None
    return SampleRange(a, b)


def parse_extrinsics_error(text: str) -> tuple[float, float]:
    """``"10mm,5deg"`` (units optional) -> (10.0, 5.0)."""
    try:
        mm, deg = text.split(",")
        return float(mm.strip().removesuffix("mm")), float(deg.strip().removesuffix("deg"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'MMmm,DEGdeg', got {text!r}") from None


def _csv_list(text: str) -> List[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _write(text: str, path: Optional[str]) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _scene(args) -> Scene:
    scene = load_scene(args.scene) if args.scene else Scene()
    if getattr(args, "extrinsics_error", None) is not None:
        scene = scene.with_changes(extrinsics_error=extrinsics_error(*args.extrinsics_error))
    return scene


def _object_index(scene: Scene, name: Optional[str]) -> int:
    if name is None:
        return 0
    for i, o in enumerate(scene.objects):
        if o.name == name:
            return i
    raise FormatError(f"no object named {name!r} in the scene")


def _file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# -- estimator manifests -----------------------------------------------------


def _retrieval_config(scene: Scene) -> RetrievalConfig:
    spec = scene.estimator
    return RetrievalConfig(refine_icp=spec.refine_icp, descriptor_bins=spec.descriptor_bins, candidates=spec.candidates)


def _two_stage_from(coarse_data: GraspDataset, fine_data: Optional[GraspDataset], scene: Scene, camera_in_eef=None):
    return build_two_stage(coarse_data, _retrieval_config(scene), scene.estimator.fine_range, fine_data, camera_in_eef)


def load_estimator(path, scene: Scene):
    """Rebuild an estimator from a manifest written by ``build-estimator``."""
    with open(path) as f:
        try:
            m = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: {e}") from None
    if m.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {m.get('version')!r}")
    if m["kind"] == "oracle":
        return OracleEstimator(m["noise_t_mm"] / 1000.0, m["noise_r_deg"], m["seed"])
    base = os.path.dirname(os.path.abspath(path))

    def _load(key):
        if m.get(key) is None:
            return None
        p = os.path.join(base, m[key])
        if _file_sha256(p) != m[key + "_sha256"]:
            raise FormatError(f"{p}: dataset changed since the estimator was built")
        return load_dataset(p)

    k = Pose.from_json(m["camera_in_eef"]) if m.get("camera_in_eef") else None
    return _two_stage_from(_load("dataset"), _load("fine_dataset"), scene, k)


def _estimator(args, scene: Scene, oi: int):
    if getattr(args, "estimator", None):
        return load_estimator(args.estimator, scene)
    return ev.build_method(scene, scene.objects[oi], scene.estimator.estimator, args.seed, oi)


# -- subcommands -------------------------------------------------------------


def cmd_collect(args) -> int:
    scene = _scene(args)
    oi = _object_index(scene, args.object)
    rng_range = args.range or scene.collect_range
    m = args.m if args.m is not None else scene.m
    d = collect_dataset(scene.world(scene.objects[oi]), rng_range, m, args.seed)
    if args.out is None:
        raise FormatError("collect needs --out")
    save_dataset(d, args.out)
    return 0


def cmd_build_estimator(args) -> int:
    scene = _scene(args)
    if args.out is None:
        raise FormatError("build-estimator needs --out")
    out_dir = os.path.dirname(os.path.abspath(args.out))
    spec = scene.estimator
    if spec.estimator == "oracle":
        manifest = {"version": MANIFEST_VERSION, "kind": "oracle", "noise_t_mm": spec.noise_t_mm, "noise_r_deg": spec.noise_r_deg, "seed": args.seed}
        _write(_dumps(manifest), args.out)
        return 0
    oi = _object_index(scene, args.object)
    stem = os.path.splitext(args.out)[0]
    if args.data:
        data_path = args.data
        data = load_dataset(data_path)
    else:
        data_path = stem + ".data.jsonl"
        data = collect_dataset(scene.world(scene.objects[oi]), scene.collect_range, scene.m, ev.derived_seed(args.seed, oi, 1))
        save_dataset(data, data_path)
    fine_path = args.fine_data
    fine = load_dataset(fine_path) if fine_path else None
    if fine is None and scene.fine_m > 0 and spec.fine_range.issubset(data.range):
        fine_path = stem + ".fine.jsonl"
        fine = collect_dataset(scene.world(scene.objects[oi]), spec.fine_range, scene.fine_m, ev.derived_seed(args.seed, oi, 2))
        save_dataset(fine, fine_path)
    est = _two_stage_from(data, fine, scene)
    k = est.coarse.camera_in_eef
    manifest = {
        "version": MANIFEST_VERSION,
        "kind": "retrieval",
        "object": data.object_name,
        "config": spec.to_json(),
        "dataset": os.path.relpath(os.path.abspath(data_path), out_dir),
        "dataset_sha256": _file_sha256(data_path),
        "fine_dataset": os.path.relpath(os.path.abspath(fine_path), out_dir) if fine_path else None,
        "fine_dataset_sha256": _file_sha256(fine_path) if fine_path else None,
        "entries": [len(est.coarse.dataset), len(est.fine.dataset)],
        "camera_in_eef": k.to_json() if k is not None else None,
    }
    _write(_dumps(manifest), args.out)
    return 0


def _grasp(spec: str, scene: Scene, base: Pose, rng: np.random.Generator, sample_range: SampleRange) -> Pose:
    """``reference``, ``random`` (offset from ``base`` within ``sample_range``) or a pose JSON file."""
    if spec == "reference":
        return scene.reference_grasp
    if spec == "random":
        return compose(sample_displacement(sample_range, rng), base)
    with open(spec) as f:
        try:
            return Pose.from_json(json.load(f))
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            raise FormatError(f"{spec}: {e}") from None


def _checked_servo(world, est, scene, rng, truth):
    reads = truth.reads
    trace = run_servo(world, est, scene.servo, rng, scene.reference_eef, truth)
    if not est.uses_ground_truth and truth.reads != reads:
        raise ProtocolViolation(f"{type(est).__name__} read simulator truth")
    return trace


def cmd_servo(args) -> int:
    """Servo one grasp onto the reference; optionally store it as a skill."""
    scene = _scene(args)
    oi = _object_index(scene, args.object)
    rng = np.random.default_rng([args.seed, 0])
    grasp = _grasp(args.grasp, scene, scene.reference_grasp, rng, scene.protocol.skill_range)
    world = scene.world(scene.objects[oi]).replace(grasp=grasp)
    est = _estimator(args, scene, oi)
    truth = GroundTruthAccess(ReferenceSetup(scene.reference_eef, scene.reference_grasp))
    trace = _checked_servo(world, est, scene, np.random.default_rng([args.seed, 1]), truth)
    if args.dump_trace:
        _write(trace.to_jsonl(), args.dump_trace)
    achieved = compose(trace.final_eef, grasp)
    target = compose(scene.reference_eef, scene.reference_grasp)
    err = error_between(achieved, target)
    result = {
        "object": world.object.name,
        "final_alignment": trace.final_alignment.to_json(),
        "converged": trace.converged,
        "steps": len(trace),
        "object_error_mm": err.position_mm,
        "object_error_deg": err.orientation_deg,
    }
    if args.skill_out:
        if args.trajectory == "insertion":
            traj = insertion_trajectory(scene.reference_eef)
        else:
            traj = random_trajectory(np.random.default_rng([args.seed, 2]), scene.reference_eef)
        truth_meta = {"skill_grasp": grasp.to_json(), "reference_grasp": scene.reference_grasp.to_json()}
        save_skill(SkillRecord(traj, trace.final_alignment, world.object.name, truth_meta), args.skill_out)
    _write(_dumps(result), args.out)
    return 0


def cmd_adapt(args) -> int:
    scene = _scene(args)
    record = load_skill(args.skill)
    oi = _object_index(scene, record.object_name if args.object is None else args.object)
    skill_grasp = Pose.from_json(record.sim_truth["skill_grasp"]) if record.sim_truth else scene.reference_grasp
    rng = np.random.default_rng([args.seed, 0])
    deploy = _grasp(args.deploy_grasp, scene, skill_grasp, rng, args.deploy_range or scene.protocol.deploy_range)
    world = scene.world(scene.objects[oi]).replace(grasp=deploy)
    est = _estimator(args, scene, oi)
    truth = GroundTruthAccess(ReferenceSetup(scene.reference_eef, scene.reference_grasp))
    trace = _checked_servo(world, est, scene, np.random.default_rng([args.seed, 1]), truth)
    if args.dump_trace:
        _write(trace.to_jsonl(), args.dump_trace)
    corrective = compute_corrective(record.skill_alignment, trace.final_alignment)
    start = record.trajectory.initial_eef
    if args.start == "random":
        start = compose(start, sample_displacement(scene.protocol.skill_range, np.random.default_rng([args.seed, 2])))
    run = execute_adapted(record, corrective, world, start)
    result = {
        "object": world.object.name,
        "deployment_grasp": deploy.to_json(),
        "corrective": corrective.to_json(),
        "eef_trace": [p.to_json() for p in run.eef_trace],
        "object_trace": [p.to_json() for p in run.object_trace],
    }
    if record.sim_truth:
        # scoring only: compare against the object path the skill grasp would have produced
        ideal = [compose(p, skill_grasp) for p in record.trajectory.eef_poses(start)]
        dt, dr = trajectory_deviation(ideal, run.object_trace)
        result["max_object_deviation_mm"] = 1000.0 * dt
        result["max_object_deviation_deg"] = float(np.degrees(dr))
    _write(_dumps(result), args.out)
    return 0


def cmd_baseline(args) -> int:
    scene = _scene(args)
    oi = _object_index(scene, args.object)
    rng = np.random.default_rng([args.seed, 0])
    proto = scene.protocol
    skill = compose(sample_displacement(proto.skill_range, rng), scene.reference_grasp)
    deploy = compose(sample_displacement(proto.deploy_range, rng), skill)
    world = scene.world(scene.objects[oi])
    s_obs = observe(world.replace(grasp=skill), np.random.default_rng([args.seed, 1]))
    d_obs = observe(world.replace(grasp=deploy), np.random.default_rng([args.seed, 2]))
    corrective = baseline_corrective(
        s_obs, d_obs, world.camera.believed_pose_WC, args.method, np.random.default_rng([args.seed, 3]), scene.reference_eef
    )
    true_c = compose(skill, inverse(deploy))
    err = error_between(corrective, true_c)
    result = {
        "method": args.method,
        "object": world.object.name,
        "corrective": corrective.to_json(),
        "true_corrective": true_c.to_json(),
        "error_mm": err.position_mm,
        "error_deg": err.orientation_deg,
    }
    _write(_dumps(result), args.out)
    return 0


def _methods(text: Optional[str], default: Sequence[str]) -> List[str]:
    ms = _csv_list(text) if text else list(default)
    for m in ms:
        if m not in ev.METHODS:
            raise FormatError(f"unknown method {m!r}; expected some of {','.join(ev.METHODS)}")
    return ms


def _emit(report, fmt: str, path: Optional[str]) -> None:
    if path is None or path == "-":
        if fmt == "csv":
            text = ev.report_csv(report) if isinstance(report, ev.AccuracyReport) else ev.peg_csv(report)
        else:
            text = _dumps(report.to_json())
        sys.stdout.write(text)
    else:
        ev.emit_report(report, fmt, path)


def cmd_eval_accuracy(args) -> int:
    scene = _scene(args)
    methods = _methods(args.methods, ("oracle", "retrieval", "icp", "svd"))
    report = ev.run_accuracy_protocol(scene, methods, args.grasps, args.deployments, args.seed, args.workers)
    _emit(report, args.format, args.out)
    return 0


def cmd_eval_peg(args) -> int:
    scene = _scene(args)
    methods = _methods(args.methods, ("oracle", "retrieval", "icp", "svd"))
    study = ev.run_peg_study(scene, methods, args.tolerances, args.trials, args.seed, args.workers)
    _emit(study, args.format, args.out)
    return 0


def cmd_report(args) -> int:
    try:
        report = ev.load_report(args.input)
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{args.input}: {e}") from None
    if args.format == "table":
        if isinstance(report, ev.AccuracyReport):
            text = ev.format_table(report) + "\n"
        else:
            lines = [f"{'method':<10} " + " ".join(f"{t:>7g}mm" for t in report.tolerances_mm)]
            for m in report.successes:
                lines.append(f"{m:<10} " + " ".join(f"{r:>9.0%}" for r in report.rates(m)))
            text = "\n".join(lines) + "\n"
        _write(text, args.out)
    else:
        _emit(report, args.format, args.out)
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps a
    # subparser from overwriting a value given before it
    # subparsers share action objects with their parents, so the top-level parser gets
    # its own copies of the global flags (with real defaults)
    def add_globals(parser, default):
        parser.add_argument("--scene", default=default(None), help="scene JSON (defaults apply when omitted)")
        parser.add_argument("--seed", type=int, default=default(0), help="master seed (default 0)")
        parser.add_argument("--out", default=default(None), help="output path (stdout when omitted)")
        parser.add_argument("--dump-trace", default=default(None), help="write the servo trace as JSON lines")

    common = argparse.ArgumentParser(add_help=False)
    add_globals(common, lambda v: argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="graspadapt", description=__doc__.splitlines()[0])
    add_globals(p, lambda v: v)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", parents=[common], help="collect an emulated-grasp dataset")
    c.add_argument("--range", type=parse_range, help="meters,degrees per axis (default from scene)")
    c.add_argument("--m", type=int)
    c.add_argument("--object")
    c.set_defaults(func=cmd_collect)

    b = sub.add_parser("build-estimator", parents=[common], help="index datasets and write an estimator manifest")
    b.add_argument("--data", help="coarse dataset; collected from the scene when omitted")
    b.add_argument("--fine-data", help="fine-stage dataset")
    b.add_argument("--object")
    b.set_defaults(func=cmd_build_estimator)

    s = sub.add_parser("servo", parents=[common], help="servo one grasp to the reference pose")
    s.add_argument("--estimator", help="manifest from build-estimator (scene estimator when omitted)")
    s.add_argument("--grasp", default="random", help="reference | random | pose JSON file")
    s.add_argument("--object")
    s.add_argument("--skill-out", help="store the alignment as a skill record")
    s.add_argument("--trajectory", choices=("insertion", "random"), default="insertion")
    s.set_defaults(func=cmd_servo)

    a = sub.add_parser("adapt", parents=[common], help="deploy a skill under a new grasp")
    a.add_argument("--skill", required=True)
    a.add_argument("--estimator")
    a.add_argument("--deploy-grasp", default="random", help="reference | random | pose JSON file")
    a.add_argument("--deploy-range", type=parse_range)
    a.add_argument("--start", choices=("initial", "random"), default="initial")
    a.add_argument("--object")
    a.set_defaults(func=cmd_adapt)

    bl = sub.add_parser("baseline", parents=[common], help="single-shot registration corrective")
    bl.add_argument("--method", choices=BASELINE_METHODS, default="icp")
    bl.add_argument("--extrinsics-error", type=parse_extrinsics_error, help="e.g. 10mm,5deg")
    bl.add_argument("--object")
    bl.set_defaults(func=cmd_baseline)

    for name, fn, help_ in (
        ("eval-accuracy", cmd_eval_accuracy, "forward-kinematics accuracy protocol"),
        ("eval-peg", cmd_eval_peg, "peg-in-hole tolerance study"),
    ):
        e = sub.add_parser(name, parents=[common], help=help_)
        e.add_argument("--methods", help=f"comma list from {','.join(ev.METHODS)}")
        e.add_argument("--format", choices=("csv", "json"), default="csv")
        e.add_argument("--workers", type=int, default=1)
        e.add_argument("--extrinsics-error", type=parse_extrinsics_error)
        if name == "eval-accuracy":
            e.add_argument("--grasps", type=int)
            e.add_argument("--deployments", type=int)
        else:
            e.add_argument("--tolerances", type=_float_list)
            e.add_argument("--trials", type=int)
        e.set_defaults(func=fn)

    r = sub.add_parser("report", parents=[common], help="render a JSON report")
    r.add_argument("input")
    r.add_argument("--format", choices=("table", "csv", "json"), default="table")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # usage errors are configuration errors; exit code 2 is kept for protocol violations
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except ProtocolViolation as e:
        print(f"protocol violation: {e}", file=sys.stderr)
        return 2
    except (OSError, FormatError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except GraspAdaptError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
