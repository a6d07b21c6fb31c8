"""Predictor-rejector versus score-based abstention with linear functions.

Labels follow the sign of x0 where x1 > 0 and are coin flips elsewhere. A
linear predictor plus a linear rejector reach c / 2; every linear score-based
rule (abstain when the extra score beats |f|) does strictly worse.
"""
from abstain_lab.bounds import CounterexampleGrid, counterexample_experiment
from abstain_lab.synth import CounterexampleParams

out = counterexample_experiment(CounterexampleParams(c=0.2, sample_count=20_000, seed=0),
                                CounterexampleGrid(angle_step_deg=15))
print(f"Bayes loss           {out['bayes_loss']:.4f}")
print(f"analytic pred/rej    {out['analytic_loss']:.4f}")
print(f"best pred/rej (grid) {out['pr_best']:.4f}")
print(f"best score-based     {out['sb_best']:.4f}")
print(f"gap                  {out['gap']:.4f}")
