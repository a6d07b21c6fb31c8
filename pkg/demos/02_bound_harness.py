"""Randomized verification of the consistency bounds.

Each harness draws random finite distributions and score assignments, then
checks that the target calibration gap never exceeds Gamma of the surrogate
gap. Falsify mode shrinks Gamma, which should immediately produce violations.
"""
from abstain_lab.bounds import verify_second_stage_bound, verify_single_stage_bound, verify_two_stage_bound
from abstain_lab.core import LossSpec

TRIALS = 2000

for kind in ("mae", "rho_margin", "constrained_hinge"):
    spec = LossSpec.admissible(kind)
    ok = verify_single_stage_bound(spec, trials=TRIALS, seed=0)
    bad = verify_single_stage_bound(spec, trials=TRIALS, seed=0, falsify=True)
    print(f"single stage {kind:>18}: {ok.violations} violations (min slack {ok.max_slack:.2e}); "
          f"shrunk Gamma: {bad.violations}")

for phi in ("hinge", "exponential", "logistic"):
    second = verify_second_stage_bound(phi, trials=TRIALS, seed=1)
    both = verify_two_stage_bound(phi, trials=TRIALS, seed=2)
    print(f"{phi:>11}: second stage {second.violations} violations, two stage {both.violations} violations")
