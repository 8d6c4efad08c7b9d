"""Record a skill under one grasp, then replay it under another.

The retrieval estimator is built from an emulated-grasp dataset, servos both
grasps to the reference pose, and the corrective between the two alignments
maps the recorded end-effector trajectory onto the new grasp.

    python3 demos/align_and_adapt.py
"""
import numpy as np

from graspadapt.adapt import compute_corrective, execute_adapted, insertion_trajectory, SkillRecord
from graspadapt.evaluation import build_retrieval_for
from graspadapt.scene import Scene
from graspadapt.se3 import SampleRange, compose, error_between, sample_displacement
from graspadapt.servo import run_servo

scene = Scene()
world = scene.world()
rng = np.random.default_rng(0)

print("building the retrieval estimator ...")
est = build_retrieval_for(scene, world, seed=0)

skill_grasp = compose(sample_displacement(SampleRange(0.05, 15), rng), world.grasp)
deploy_grasp = compose(sample_displacement(SampleRange(0.05, 15), rng), skill_grasp)

a_s = run_servo(world.replace(grasp=skill_grasp), est, scene.servo, rng=rng).final_alignment
a_d = run_servo(world.replace(grasp=deploy_grasp), est, scene.servo, rng=rng).final_alignment
corrective = compute_corrective(a_s, a_d)

traj = insertion_trajectory(world.eef_pose)
run = execute_adapted(SkillRecord(traj, a_s), corrective, world.replace(grasp=deploy_grasp), world.eef_pose)
wanted = [compose(p, skill_grasp) for p in traj.eef_poses(world.eef_pose)]
errs = [error_between(got, want) for got, want in zip(run.object_trace, wanted)]

e = error_between(compose(corrective, deploy_grasp), skill_grasp)
print(f"corrective error: {e.position_mm:.3f} mm, {e.orientation_deg:.3f} deg")
print(f"worst object deviation along the skill: {max(x.position_mm for x in errs):.3f} mm")
