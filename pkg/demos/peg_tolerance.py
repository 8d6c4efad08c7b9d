"""Peg-in-hole success against hole clearance for each alignment method.

    python3 demos/peg_tolerance.py
"""
from graspadapt.evaluation import run_peg_study
from graspadapt.scene import Scene

study = run_peg_study(Scene(), ("oracle", "retrieval", "icp", "svd"), seed=3)
print("clearance mm:", "  ".join(f"{t:>4g}" for t in study.tolerances_mm))
for method, wins in study.successes.items():
    print(f"{method:>12}:", "  ".join(f"{w:>2}/{study.trials_per}" for w in wins))
