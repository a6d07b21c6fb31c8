"""Pointwise risks: closed forms checked against brute-force minimization.

For one conditional distribution p and cost c we compare the best abstention
risk, the best surrogate risk of each admissible single-stage loss, and the
value returned by a grid oracle that knows nothing about the closed forms.
"""
import numpy as np

from abstain_lab.core import LossSpec
from abstain_lab.risk import (
    best_abstention_risk,
    best_single_stage_risk_bruteforce,
    best_single_stage_risk_closed_form,
)

p = np.array([0.6, 0.3, 0.1])
c = 0.25

# accept when the top class beats 1 - c, otherwise pay c
print(f"best abstention risk: {best_abstention_risk(p, c):.4f}")

for kind in ("mae", "rho_margin", "constrained_hinge"):
    spec = LossSpec.admissible(kind)
    closed = best_single_stage_risk_closed_form(spec, p, c)
    oracle = best_single_stage_risk_bruteforce(spec, p, c)
    print(f"{kind:>18}: closed {closed:.6f}  oracle {oracle.value:.6f}  best r {oracle.best_r:+.3f}")
