"""Consistency-bound functions, randomized bound harnesses and the two abstention demos.

Each harness draws random finite distributions and random ``(h, r)``
assignments, computes both sides of a bound from expected calibration gaps,
and counts violations. With unrestricted per-point hypothesis classes the
minimizability gaps vanish, so the gap expectations are exactly the excess
risks that appear in the bounds.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .core import InnerLoss, LossSpec, Phi, Psi, psi_value
from .risk import (
    FiniteDistribution,
    GridSpec,
    ScoreAssignment,
    Target,
    abstention_calibration_gap,
    best_single_stage_risk_bruteforce,
    expected_calibration_gap,
    golden_section_minimize,
    inner_calibration_gap,
    inner_conditional_risk,
    second_stage_calibration_gap,
)
from .synth import CounterexampleParams, gen_counterexample

__all__ = [
    "BOUND_TOL",
    "BoundReport",
    "CounterexampleParams",
    "CounterexampleGrid",
    "gamma_single_stage",
    "gamma_binary",
    "gamma_first_stage",
    "verify_single_stage_bound",
    "verify_second_stage_bound",
    "verify_two_stage_bound",
    "negative_result_demo",
    "counterexample_experiment",
    "thread_cap",
]

BOUND_TOL = 1e-9
N_CHOICES = (2, 3, 5, 10)


def thread_cap() -> int:
    """Worker count from ``ABSTAIN_LAB_THREADS`` (default 1)."""
    raw = os.environ.get("ABSTAIN_LAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"ABSTAIN_LAB_THREADS must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# Gamma functions


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("Gamma is only defined for t >= 0")
    return t


def _out(a):
    return float(a) if np.ndim(a) == 0 else a


def gamma_single_stage(kind: InnerLoss | str, t, n: int):
    kind = InnerLoss(kind)
    t = _check_t(t)
    if kind is InnerLoss.MAE:
        return _out(np.maximum(2 * n * np.sqrt(t), n * t))
    if kind is InnerLoss.RHO_MARGIN:
        return _out(np.maximum(2 * np.sqrt(t), t))
    if kind is InnerLoss.CONSTRAINED_HINGE:
        return _out(np.maximum(2 * np.sqrt(n * t), t))
    raise ValueError(f"no single-stage bound for inner loss {kind.value}")


def gamma_binary(kind: Phi | str, t):
    kind = Phi(kind)
    t = _check_t(t)
    if kind is Phi.HINGE:
        return _out(t)
    return _out(math.sqrt(2.0) * np.sqrt(t))


def gamma_first_stage(kind: InnerLoss | str, t, n: int):
    """First-stage bound of the zero-one excess risk by the inner-loss excess risk (MAE only)."""
    if InnerLoss(kind) is not InnerLoss.MAE:
        raise ValueError("the first-stage bound is implemented for MAE only")
    return _out(n * _check_t(t))


def _clamp(t: float) -> float:
    # expected gaps are sums of non-negative terms; tiny negatives are rounding
    if t < -1e-12:
        raise ValueError(f"negative expected calibration gap {t}")
    return max(t, 0.0)


# ---------------------------------------------------------------------------
# reports and trial machinery


@dataclass
class BoundReport:
    name: str
    trials: int
    violations: int
    max_slack: float
    worst_case: dict
    lhs_mean: float
    rhs_mean: float
    tolerance: float = BOUND_TOL
    falsify: bool = False
    seed: int = 0

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Trial:
    lhs: float
    rhs: float
    inputs: dict


def _random_dist(rng: np.random.Generator) -> FiniteDistribution:
    m = int(rng.integers(1, 21))
    n = int(rng.choice(N_CHOICES))
    c = float(rng.uniform(0.02, 0.6))
    return FiniteDistribution.random(rng, m, n, cost=c)


def _run(name: str, trials: int, seed: int, one: Callable[[np.random.Generator], _Trial], falsify: bool) -> BoundReport:
    if trials < 1:
        raise ValueError("trials must be positive")

    def chunk(ids):
        return [one(np.random.default_rng([seed, t])) for t in ids]

    workers = thread_cap()
    ids = np.array_split(np.arange(trials), workers)
    if workers == 1:
        results = chunk(ids[0])
    else:
        with ThreadPoolExecutor(workers) as ex:
            results = [r for part in ex.map(chunk, ids) for r in part]
    lhs = np.array([r.lhs for r in results])
    rhs = np.array([r.rhs for r in results])
    slack = rhs - lhs
    k = int(np.argmin(slack))
    worst = dict(results[k].inputs, trial=k, lhs=float(lhs[k]), rhs=float(rhs[k]))
    return BoundReport(
        name=name,
        trials=trials,
        violations=int(np.sum(lhs > rhs + BOUND_TOL)),
        max_slack=float(slack[k]),
        worst_case=worst,
        lhs_mean=float(lhs.mean()),
        rhs_mean=float(rhs.mean()),
        falsify=falsify,
        seed=seed,
    )


def _inputs(dist: FiniteDistribution, scores, r) -> dict:
    return {
        "weights": dist.weights.tolist(),
        "probs": dist.probs.tolist(),
        "costs": dist.costs.tolist(),
        "scores": np.asarray(scores).tolist(),
        "rejector": np.asarray(r).tolist(),
    }


def _optimal_scores(spec: LossSpec, p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Scores at (or near) the inner-risk optimum for the admissible losses."""
    m, n = p.shape
    top = np.argmax(p, axis=1)
    s = np.zeros((m, n))
    rows = np.arange(m)
    if spec.inner is InnerLoss.MAE:
        s[rows, top] = rng.uniform(3.0, 15.0, size=m)
    elif spec.inner is InnerLoss.RHO_MARGIN:
        s[rows, top] = spec.rho * rng.uniform(1.0, 2.0, size=m)
    else:
        s[:] = -spec.rho
        s[rows, top] = (n - 1) * spec.rho
    return s


def _random_assignment(spec: LossSpec, dist: FiniteDistribution, rng: np.random.Generator):
    """Mix of uniform draws and perturbations of the surrogate optimum.

    Uniform draws alone give large surrogate gaps where any Gamma is slack;
    perturbed optima probe the small-gap regime where the bound is tight.
    """
    m, n = dist.probs.shape
    mode = int(rng.integers(0, 3))
    if mode == 0:
        s = rng.uniform(-4.0, 4.0, size=(m, n))
        r = rng.uniform(-3.0, 3.0, size=m)
    else:
        s = _optimal_scores(spec, dist.probs, rng)
        a = np.maximum(inner_conditional_risk(spec.inner, dist.probs, s, spec.rho), 1e-300)
        b = psi_value(spec.psi, dist.costs, n)
        r = np.log(b / a) / (2 * spec.alpha)
        scale = 10.0 ** rng.uniform(-4, 0)
        s = s + scale * rng.normal(size=s.shape)
        r = r + scale * rng.normal(size=m)
        if mode == 2:
            # push r across the decision boundary at random points
            flip = rng.uniform(size=m) < 0.5
            r = np.where(flip, -r * rng.uniform(0.0, 1.0, size=m), r)
    if spec.inner is InnerLoss.CONSTRAINED_HINGE:
        s = s - s.mean(axis=1, keepdims=True)
    return s, r


def verify_single_stage_bound(
    spec: LossSpec,
    trials: int = 10_000,
    seed: int = 0,
    falsify: bool = False,
) -> BoundReport:
    """Check ``E[dC_abs] <= Gamma(E[dC_surrogate])`` on random trials.

    ``falsify`` divides Gamma by ``10 n`` as a sensitivity self-test.
    """
    spec.require_admissible()

    def one(rng):
        dist = _random_dist(rng)
        s, r = _random_assignment(spec, dist, rng)
        asg = ScoreAssignment(s, r)
        lhs = expected_calibration_gap(dist, asg, Target.ABSTENTION)
        t = _clamp(expected_calibration_gap(dist, asg, spec))
        n = dist.n_classes
        rhs = gamma_single_stage(spec.inner, t, n)
        if falsify:
            rhs /= 10 * n
        return _Trial(lhs, rhs, _inputs(dist, s, r))

    return _run(f"single_stage[{spec.inner.value}]", trials, seed, one, falsify)


def _second_stage_r(phi: Phi, q: np.ndarray, c: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mode = int(rng.integers(0, 3))
    m = q.shape[0]
    if mode == 0:
        return rng.uniform(-3.0, 3.0, size=m)
    qq = np.maximum(q, 1e-12)
    if phi is Phi.EXPONENTIAL:
        r = 0.5 * np.log(c / qq)
    elif phi is Phi.LOGISTIC:
        r = np.log(c / qq)
    else:
        r = np.where(qq > c, -1.0, 1.0)
    r = r + 10.0 ** rng.uniform(-4, 0) * rng.normal(size=m)
    if mode == 2:
        flip = rng.uniform(size=m) < 0.5
        r = np.where(flip, -r * rng.uniform(0.0, 1.0, size=m), r)
    return r


def verify_second_stage_bound(phi: Phi | str, trials: int = 10_000, seed: int = 0, falsify: bool = False) -> BoundReport:
    """Check ``E[dC_abs,h] <= Gamma(E[dC_phi,h] / c)`` for a random fixed predictor."""
    phi = Phi(phi)

    def one(rng):
        dist = _random_dist(rng)
        m, n = dist.probs.shape
        pred = rng.integers(0, n, size=m)
        q = 1.0 - dist.probs[np.arange(m), pred]
        c = dist.costs
        r = _second_stage_r(phi, q, c, rng)
        lhs = float(dist.weights @ (np.where(r > 0, q, c) - np.minimum(q, c)))
        t = _clamp(float(dist.weights @ second_stage_calibration_gap(phi, q, c, r)))
        rhs = gamma_binary(phi, t / c[0])
        if falsify:
            rhs /= 10 * n
        return _Trial(lhs, rhs, dict(_inputs(dist, np.eye(n)[pred], r), predicted=pred.tolist()))

    return _run(f"second_stage[{phi.value}]", trials, seed, one, falsify)


def verify_two_stage_bound(
    phi: Phi | str,
    inner: InnerLoss | str = InnerLoss.MAE,
    trials: int = 10_000,
    seed: int = 0,
    falsify: bool = False,
) -> BoundReport:
    """Check ``E[dC_abs] <= Gamma1(E[dC_mae(h)]) + (1 + c) Gamma2(E[dC_phi,h] / c)``.

    For the hinge the second term is the plain expected gap, without the
    ``1 + c`` and ``1 / c`` factors.
    """
    phi = Phi(phi)
    inner = InnerLoss(inner)
    if inner is not InnerLoss.MAE:
        raise ValueError("the two-stage harness is implemented for the MAE first stage")
    mae = LossSpec.admissible(InnerLoss.MAE)

    def one(rng):
        dist = _random_dist(rng)
        m, n = dist.probs.shape
        if rng.uniform() < 0.5:
            s = rng.uniform(-4.0, 4.0, size=(m, n))
        else:
            s = _optimal_scores(mae, dist.probs, rng) + 10.0 ** rng.uniform(-3, 1) * rng.normal(size=(m, n))
        pred = np.argmax(s, axis=1)
        q = 1.0 - dist.probs[np.arange(m), pred]
        c = dist.costs
        r = _second_stage_r(phi, q, c, rng)
        lhs = float(dist.weights @ abstention_calibration_gap(dist.probs, c, s, r))
        t1 = _clamp(float(dist.weights @ inner_calibration_gap(InnerLoss.MAE, dist.probs, s)))
        t2 = _clamp(float(dist.weights @ second_stage_calibration_gap(phi, q, c, r)))
        if phi is Phi.HINGE:
            rhs = gamma_first_stage(inner, t1, n) + t2
        else:
            rhs = gamma_first_stage(inner, t1, n) + (1 + c[0]) * gamma_binary(phi, t2 / c[0])
        if falsify:
            rhs /= 10 * n
        return _Trial(lhs, rhs, _inputs(dist, s, r))

    return _run(f"two_stage[{inner.value},{phi.value}]", trials, seed, one, falsify)


# ---------------------------------------------------------------------------
# negative result


def _simplex_lattice(n: int, steps: int) -> np.ndarray:
    pts = []

    def rec(prefix, left):
        if len(prefix) == n - 1:
            pts.append(prefix + [left])
            return
        for k in range(left + 1):
            rec(prefix + [k], left - k)

    rec([], steps)
    return np.array(pts, dtype=float) / steps


def negative_result_demo(
    spec: LossSpec | None = None,
    n: int = 3,
    costs=None,
    lattice_steps: int = 20,
    grid: GridSpec | None = None,
    tolerance: float = 1e-3,
) -> dict:
    """Search for points where the surrogate-optimal rejector takes the wrong side.

    For each ``p`` on a simplex lattice and each cost, the surrogate is
    minimised jointly over a score grid and an ``r`` grid (the best grid ``r``
    is then refined by golden-section search). A witness is a point where
    the abstention calibration gap at that minimiser exceeds ``tolerance``.
    """
    spec = spec or LossSpec(inner=InnerLoss.MAE, psi=Psi.SQUARE)
    costs = np.linspace(0.1, 0.45, 8) if costs is None else np.asarray(costs, dtype=float)
    grid = grid or GridSpec()
    step = (grid.r_range[1] - grid.r_range[0]) / (grid.r_steps - 1)
    witnesses = []
    max_gap = 0.0
    checked = 0
    for p in _simplex_lattice(n, lattice_steps):
        for c in costs:
            best = best_single_stage_risk_bruteforce(spec, p, c, grid=grid)
            a, b = best.best_inner, float(psi_value(spec.psi, c, n))
            r_star, _ = golden_section_minimize(
                lambda r: a * np.exp(spec.alpha * r) + b * np.exp(-spec.beta * r),
                best.best_r - step, best.best_r + step,
            )
            r_star = float(r_star)
            gap = float(abstention_calibration_gap(p, c, best.best_scores, r_star))
            checked += 1
            max_gap = max(max_gap, gap)
            if gap > tolerance:
                witnesses.append({
                    "p": p.tolist(), "c": float(c), "r_star": r_star, "gap": gap,
                    "surrogate_rejects": r_star <= 0, "abstention_rejects": bool(p.max() < 1 - c),
                })
    return {
        "spec": spec.to_dict(),
        "n": n,
        "costs": costs.tolist(),
        "checked": checked,
        "witness_count": len(witnesses),
        "witnesses": witnesses,
        "max_gap": max_gap,
        "found": bool(witnesses),
        "tolerance": tolerance,
    }


# ---------------------------------------------------------------------------
# score-based counterexample


@dataclass(frozen=True)
class CounterexampleGrid:
    """Linear functions ``w . x + b`` with ``|w| = 1``: angle steps times bias steps."""

    angle_step_deg: float = 10.0
    bias_lo: float = -1.2
    bias_hi: float = 1.2
    bias_steps: int = 13

    def functions(self) -> np.ndarray:
        """Rows ``(w1, w2, b)``."""
        ang = np.deg2rad(np.arange(0.0, 360.0, self.angle_step_deg))
        bias = np.linspace(self.bias_lo, self.bias_hi, self.bias_steps)
        a, b = np.meshgrid(ang, bias, indexing="ij")
        return np.stack([np.cos(a).ravel(), np.sin(a).ravel(), b.ravel()], axis=1)


def counterexample_experiment(params: CounterexampleParams | None = None, grid: CounterexampleGrid | None = None) -> dict:
    """Compare the predictor-rejector and score-based formulations on the disk example.

    Both formulations search the same grid of unit-norm linear functions:
    a predictor ``(f, -f)`` and rejector ``g`` on one side, a score triple
    ``(f1, -f1, f2)`` on the other. The analytic predictor-rejector solution
    ``h = (f_pred, -f_pred), r = f_abs`` is evaluated as well.
    """
    params = params or CounterexampleParams()
    grid = grid or CounterexampleGrid()
    if params.dim != 2:
        raise ValueError("the grid search covers the two-dimensional example only")
    ds = gen_counterexample(params)
    x, y, c = ds.features, ds.labels, params.c
    m = ds.m
    # Bayes loss on the same points: c on the coin-flip half, 0 elsewhere
    bayes_loss = float(np.mean(np.where(params.f_abs(x) <= 0, c, 0.0)))

    fx = params.f_pred(x)
    pred = np.where(fx >= -fx, 0, 1)
    analytic = float(np.mean(np.where(params.f_abs(x) > 0, pred != y, c)))

    funcs = grid.functions()
    vals = x @ funcs[:, :2].T + funcs[:, 2]  # m x K
    # predictor (f, -f): label 0 iff f >= -f, i.e. f >= 0
    err = ((vals >= 0).astype(np.int8) != (y == 0)[:, None]).astype(np.float32)
    acc = (vals > 0).astype(np.float32)
    pr = (err.T @ acc) / m + c * (1.0 - acc.mean(axis=0))[None, :]
    i, j = np.unravel_index(int(np.argmin(pr)), pr.shape)
    pr_best = float(pr[i, j])

    # score-based: abstain iff f2 >= max(f1, -f1) = |f1|
    # loss = mean(err) + mean(abstain * (c - err))
    best_sb = math.inf
    best_pair = (0, 0)
    for k in range(funcs.shape[0]):
        e = err[:, k]
        w = (c - e).astype(np.float32)
        abst = (vals >= np.abs(vals[:, k : k + 1])).astype(np.float32)
        losses = e.mean() + (w @ abst) / m
        kk = int(np.argmin(losses))
        if losses[kk] < best_sb:
            best_sb, best_pair = float(losses[kk]), (k, kk)
    return {
        "params": asdict(params),
        "grid": asdict(grid),
        "bayes_loss": bayes_loss,
        "analytic_loss": analytic,
        "pr_best": min(pr_best, analytic),
        "pr_grid_best": pr_best,
        "pr_grid_argmin": {"predictor": funcs[i].tolist(), "rejector": funcs[j].tolist()},
        "sb_best": best_sb,
        "sb_argmin": {"f1": funcs[best_pair[0]].tolist(), "f2": funcs[best_pair[1]].tolist()},
        "gap": best_sb - min(pr_best, analytic),
        "sample_count": m,
    }
