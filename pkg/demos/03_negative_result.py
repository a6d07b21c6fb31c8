"""Why the cost term must enter linearly.

Replacing c by c**2 in the MAE surrogate moves the surrogate-optimal rejector
to the wrong side of the accept/abstain boundary for some (p, c). The search
below finds such witnesses, while the admissible loss yields none.
"""
import numpy as np

from abstain_lab.bounds import negative_result_demo
from abstain_lab.core import LossSpec

broken = negative_result_demo(LossSpec(inner="mae", psi="square"))
control = negative_result_demo(LossSpec.admissible("mae"))

print(f"squared cost: {broken['witness_count']} witnesses out of {broken['checked']} points")
for w in broken["witnesses"][:3]:
    print(f"  p={np.round(w['p'], 3).tolist()} c={w['c']:.3f} gap={w['gap']:.4f}")
print(f"linear cost: witnesses found = {control['found']}, max gap {control['max_gap']:.1e}")
