"""Conditional-risk calculus on finite supports.

A point ``x`` is summarised by its conditional label distribution ``p`` and
its cost ``c``. The conditional risk of a loss is ``sum_y p[y] * L(h, r, y)``;
its infimum over all scores and rejector values is the best-in-class
conditional risk, and the difference between the two is the calibration gap.

Closed forms are paired with brute-force grid oracles so each one can be
checked independently.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import optimize

from .core import (
    Family,
    InnerLoss,
    LossSpec,
    Phi,
    inner_loss_all_labels,
    phi_value,
    psi_value,
)

__all__ = [
    "Target",
    "HypothesisClass",
    "FiniteDistribution",
    "ScoreAssignment",
    "GridSpec",
    "OracleResult",
    "SecondStageBest",
    "GapEstimate",
    "conditional_risk",
    "inner_conditional_risk",
    "best_inner_risk",
    "inner_calibration_gap",
    "best_abstention_risk",
    "abstention_calibration_gap",
    "best_single_stage_risk_closed_form",
    "best_single_stage_risk_bruteforce",
    "surrogate_calibration_gap",
    "second_stage_conditional_risk",
    "best_second_stage_risk",
    "second_stage_calibration_gap",
    "golden_section_minimize",
    "expected_calibration_gap",
    "minimizability_gap",
]

PROB_TOL = 1e-9


class Target(str, enum.Enum):
    """Target (non-surrogate) losses the risk functions understand."""

    ABSTENTION = "abstention"
    # abstention loss with the predictor held fixed
    TWO_STAGE_ABSTENTION = "two_stage_abstention"


class HypothesisClass(str, enum.Enum):
    UNRESTRICTED = "unrestricted"
    CONSTANT_REJECTOR = "constant_rejector"
    LINEAR_OVER_FEATURES = "linear_over_features"


@dataclass
class FiniteDistribution:
    """Distribution over ``m`` support points with per-point label law and cost."""

    weights: np.ndarray
    probs: np.ndarray
    costs: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=float)
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=float))
        m, n = self.probs.shape
        self.costs = np.broadcast_to(np.asarray(self.costs, dtype=float), (m,)).copy()
        if self.weights.shape != (m,):
            raise ValueError(f"weights shape {self.weights.shape} does not match {m} points")
        if n < 2:
            raise ValueError("need at least two labels")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1) > PROB_TOL:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=1) - 1) > PROB_TOL):
            raise ValueError("each conditional distribution must be non-negative and sum to 1")
        if np.any(self.costs < 0) or np.any(self.costs > 1):
            raise ValueError("costs must lie in [0, 1]")
        if self.features is not None:
            self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
            if self.features.shape[0] != m:
                raise ValueError("features need one row per support point")

    @property
    def size(self) -> int:
        return self.probs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        size: int,
        n_classes: int,
        cost: float | tuple[float, float],
        n_features: int | None = None,
    ) -> "FiniteDistribution":
        """Dirichlet(1, ..., 1) weights and conditionals; ``cost`` is a constant or a range."""
        weights = rng.dirichlet(np.ones(size)) if size > 1 else np.ones(1)
        probs = rng.dirichlet(np.ones(n_classes), size=size)
        if isinstance(cost, tuple):
            c = rng.uniform(*cost)
        else:
            c = float(cost)
        feats = rng.normal(size=(size, n_features)) if n_features else None
        return cls(weights=weights, probs=probs, costs=np.full(size, c), features=feats)


@dataclass
class ScoreAssignment:
    """Concrete ``(h, r)`` restricted to the support points."""

    scores: np.ndarray
    rejector: np.ndarray

    def __post_init__(self) -> None:
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=float))
        self.rejector = np.atleast_1d(np.asarray(self.rejector, dtype=float))
        if self.rejector.shape != self.scores.shape[:1]:
            raise ValueError("one rejector value per support point")

    def check_aligned(self, dist: FiniteDistribution) -> None:
        if self.scores.shape != dist.probs.shape:
            raise ValueError(
                f"assignment shape {self.scores.shape} does not match distribution {dist.probs.shape}"
            )

    @property
    def predicted(self) -> np.ndarray:
        return np.argmax(self.scores, axis=1)


@dataclass(frozen=True)
class GridSpec:
    """Resolution of the brute-force oracle searches."""

    score_range: tuple[float, float] = (-10.0, 10.0)
    score_steps: int = 41
    r_range: tuple[float, float] = (-12.0, 12.0)
    r_steps: int = 4801
    # full grids over n - 1 free scores are used while they stay below this size
    max_full_grid: int = 50_000

    def __post_init__(self) -> None:
        lo, hi = self.score_range
        rlo, rhi = self.r_range
        if not (lo < hi and rlo < rhi):
            raise ValueError("grid ranges need lo < hi")
        if self.score_steps < 2 or self.r_steps < 2:
            raise ValueError("grid steps must be at least 2")

    def score_levels(self) -> np.ndarray:
        return np.linspace(*self.score_range, self.score_steps)

    def r_values(self) -> np.ndarray:
        return np.linspace(*self.r_range, self.r_steps)


class OracleResult(NamedTuple):
    value: float
    joint_grid: float
    reduced: float
    best_inner: float
    best_scores: np.ndarray
    best_r: float


class SecondStageBest(NamedTuple):
    surrogate: float | np.ndarray
    target: float | np.ndarray


@dataclass
class GapEstimate:
    value: float
    best_in_class: float
    pointwise: float
    hypothesis_class: HypothesisClass
    is_estimate: bool
    details: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# conditional risks


def _as_p(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape[-1] < 2:
        raise ValueError("need at least two labels")
    return p


def inner_conditional_risk(kind: InnerLoss, p, scores, rho: float = 1.0):
    """``sum_y p[y] * inner(scores, y)``."""
    p = _as_p(p)
    return (p * inner_loss_all_labels(kind, scores, rho)).sum(axis=-1)


def best_inner_risk(kind: InnerLoss, p, rho: float = 1.0):
    """Infimum over unrestricted scores of the inner conditional risk."""
    kind = InnerLoss(kind)
    p = _as_p(p)
    n = p.shape[-1]
    gap_to_top = 1.0 - p.max(axis=-1)
    if kind in (InnerLoss.MAE, InnerLoss.RHO_MARGIN, InnerLoss.ZERO_ONE):
        return gap_to_top
    if kind is InnerLoss.CONSTRAINED_HINGE:
        return n * gap_to_top
    # logistic: the entropy of p
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(p > 0, p * np.log(p), 0.0).sum(axis=-1)


def inner_calibration_gap(kind: InnerLoss, p, scores, rho: float = 1.0):
    return inner_conditional_risk(kind, p, scores, rho) - best_inner_risk(kind, p, rho)


def conditional_risk(loss, p, scores, r, c):
    """Conditional risk of a target or surrogate loss at one or many points.

    ``loss`` is a :class:`Target` or a :class:`LossSpec`. For the two-stage
    family the predictor enters only through ``argmax(scores)``.
    """
    p = _as_p(p)
    s = np.asarray(scores, dtype=float)
    r = np.asarray(r, dtype=float)
    c = np.asarray(c, dtype=float)
    n = p.shape[-1]
    if isinstance(loss, Target):
        q = 1.0 - np.take_along_axis(p, np.argmax(s, axis=-1)[..., None], axis=-1)[..., 0]
        return np.where(r > 0, q, c)
    spec: LossSpec = loss
    if spec.family is Family.TWO_STAGE:
        q = 1.0 - np.take_along_axis(p, np.argmax(s, axis=-1)[..., None], axis=-1)[..., 0]
        return second_stage_conditional_risk(spec.phi, q, r, c)
    inner = inner_conditional_risk(spec.inner, p, s, spec.rho)
    return inner * np.exp(spec.alpha * r) + psi_value(spec.psi, c, n) * np.exp(-spec.beta * r)


def best_abstention_risk(p, c):
    """``1 - max(max_y p[y], 1 - c)``: accept the top label or reject, whichever is cheaper."""
    p = _as_p(p)
    return 1.0 - np.maximum(p.max(axis=-1), 1.0 - np.asarray(c, dtype=float))


def abstention_calibration_gap(p, c, scores, r):
    p = _as_p(p)
    c = np.asarray(c, dtype=float)
    top = p.max(axis=-1)
    picked = np.take_along_axis(p, np.argmax(np.asarray(scores), axis=-1)[..., None], axis=-1)[..., 0]
    accept_gap = np.maximum(top, 1.0 - c) - picked
    reject_gap = np.maximum(top - 1.0 + c, 0.0)
    return np.where(np.asarray(r) > 0, accept_gap, reject_gap)


def best_single_stage_risk_closed_form(spec: LossSpec, p, c, n: int | None = None):
    """Best-in-class single-stage conditional risk for the admissible specs.

    Minimising ``A * exp(alpha r) + B * exp(-alpha r)`` over ``r`` gives
    ``2 sqrt(A B)``, with ``A`` the best inner risk and ``B = psi(c)``.
    """
    spec.require_admissible()
    p = _as_p(p)
    n = p.shape[-1] if n is None else n
    if n != p.shape[-1]:
        raise ValueError("n does not match the length of p")
    a = best_inner_risk(spec.inner, p, spec.rho)
    b = psi_value(spec.psi, np.asarray(c, dtype=float), n)
    return 2.0 * np.sqrt(a * b)


def surrogate_calibration_gap(spec: LossSpec, p, c, scores, r, grid: GridSpec | None = None):
    """Surrogate conditional risk minus its infimum (closed form when admissible)."""
    risk = conditional_risk(spec, p, scores, r, c)
    if spec.family is Family.TWO_STAGE:
        q = 1.0 - np.take_along_axis(_as_p(p), np.argmax(np.asarray(scores), axis=-1)[..., None], axis=-1)[..., 0]
        return risk - best_second_stage_risk(spec.phi, q, c).surrogate
    if spec.is_admissible:
        return risk - best_single_stage_risk_closed_form(spec, p, c)
    p2 = np.atleast_2d(p)
    c2 = np.broadcast_to(np.asarray(c, dtype=float), p2.shape[:1])
    best = np.array([best_single_stage_risk_bruteforce(spec, pi, ci, grid=grid).value for pi, ci in zip(p2, c2)])
    return risk - best.reshape(np.shape(risk))


# ---------------------------------------------------------------------------
# brute-force oracle for the single-stage surrogate


def _candidate_scores(spec: LossSpec, p: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Score vectors searched by the oracle.

    Two sources: a full grid over ``n - 1`` free coordinates while that stays
    small, and two-level vectors (``k`` labels at one level, the rest at
    another) laid out along the order of ``p``. The losses only see score
    differences, so the free coordinates fix the last score at 0; the
    constrained hinge instead sets it to minus the sum of the others.
    """
    n = p.shape[0]
    levels = grid.score_levels()
    hinge = spec.inner is InnerLoss.CONSTRAINED_HINGE
    if hinge:
        # the hinge optimum puts every non-top score exactly at -rho
        levels = np.union1d(levels, [-spec.rho])
    out = []
    if len(levels) ** (n - 1) <= grid.max_full_grid:
        mesh = np.stack(np.meshgrid(*([levels] * (n - 1)), indexing="ij"), axis=-1).reshape(-1, n - 1)
        last = -mesh.sum(axis=1, keepdims=True) if hinge else np.zeros((len(mesh), 1))
        out.append(np.hstack([mesh, last]))
    order = np.argsort(-p, kind="stable")
    for k in range(1, n):
        if hinge:
            low = levels
            high = -low * (n - k) / k
        else:
            high, low = (g.ravel() for g in np.meshgrid(levels, levels, indexing="ij"))
        block = np.empty((len(low), n))
        block[:, order[:k]] = high[:, None]
        block[:, order[k:]] = low[:, None]
        out.append(block)
    return np.vstack(out)


def best_single_stage_risk_bruteforce(
    spec: LossSpec, p, c, n: int | None = None, grid: GridSpec | None = None
) -> OracleResult:
    """Grid-search infimum of the single-stage conditional risk.

    For a fixed ``r`` the surrogate is increasing in the inner risk, so the
    joint grid minimum over ``(scores, r)`` is reached at the candidate with
    the smallest inner risk; only the ``r`` sweep remains. When alpha == beta
    the ``r`` minimisation also has the closed form ``2 sqrt(A psi(c))``,
    reported as a second value. The smaller of the two is returned.
    """
    grid = grid or GridSpec()
    p = _as_p(p).astype(float)
    if n is not None and n != p.shape[0]:
        raise ValueError("n does not match the length of p")
    n = p.shape[0]
    cands = _candidate_scores(spec, p, grid)
    a = inner_conditional_risk(spec.inner, p, cands, spec.rho)
    i = int(np.argmin(a))
    a_min = float(a[i])
    b = float(psi_value(spec.psi, c, n))
    rs = grid.r_values()
    curve = a_min * np.exp(spec.alpha * rs) + b * np.exp(-spec.beta * rs)
    j = int(np.argmin(curve))
    joint = float(curve[j])
    reduced = 2.0 * math.sqrt(a_min * b) if math.isclose(spec.alpha, spec.beta) else math.inf
    return OracleResult(
        value=min(joint, reduced),
        joint_grid=joint,
        reduced=reduced,
        best_inner=a_min,
        best_scores=cands[i],
        best_r=float(rs[j]),
    )


# ---------------------------------------------------------------------------
# second stage (fixed predictor)


def second_stage_conditional_risk(phi: Phi, q_err, r, c):
    """``q_err * phi(-r) + c * phi(r)`` where ``q_err`` is the predictor's conditional error."""
    return np.asarray(q_err) * phi_value(phi, -np.asarray(r)) + np.asarray(c) * phi_value(phi, r)


def golden_section_minimize(f, lo, hi, tol: float = 1e-10, max_iter: int = 200):
    """Vectorised golden-section search of a unimodal ``f`` on ``[lo, hi]``.

    ``lo``/``hi`` may be arrays; ``f`` must evaluate elementwise. Returns
    ``(x_min, f_min)`` where ``f_min`` also considers the interval ends.
    """
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a = np.asarray(lo, dtype=float).copy()
    b = np.asarray(hi, dtype=float).copy()
    a, b = np.broadcast_arrays(a, b)
    a, b = a.copy(), b.copy()
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(max_iter):
        if np.all(b - a <= tol):
            break
        left = f1 <= f2
        # keep [a, x2] when the left probe is lower, else [x1, b]
        b = np.where(left, x2, b)
        a = np.where(left, a, x1)
        nx1 = np.where(left, b - invphi * (b - a), x2)
        nx2 = np.where(left, x1, a + invphi * (b - a))
        nf1 = np.where(left, f(nx1), f2)
        nf2 = np.where(left, f1, f(nx2))
        x1, x2, f1, f2 = nx1, nx2, nf1, nf2
    xm = 0.5 * (a + b)
    cands = np.stack([f(xm), f(np.asarray(lo, dtype=float) + 0 * xm), f(np.asarray(hi, dtype=float) + 0 * xm)])
    pts = np.stack([xm, np.asarray(lo, dtype=float) + 0 * xm, np.asarray(hi, dtype=float) + 0 * xm])
    k = np.argmin(cands, axis=0)
    fmin = np.take_along_axis(cands, k[None], axis=0)[0]
    xmin = np.take_along_axis(pts, k[None], axis=0)[0]
    return xmin, fmin


_R_BOUND = 60.0


def best_second_stage_risk(phi: Phi, q_err, c) -> SecondStageBest:
    """Infimum over ``r`` of the second-stage surrogate and of the fixed-predictor target.

    Exponential uses ``2 sqrt(q c)``; hinge and logistic are minimised
    numerically by golden-section search on ``[-60, 60]`` (tolerance 1e-10).
    """
    phi = Phi(phi)
    q = np.asarray(q_err, dtype=float)
    c = np.asarray(c, dtype=float)
    if np.any(q < -1e-12) or np.any(q > 1 + 1e-12):
        raise ValueError("q_err must lie in [0, 1]")
    q, c = np.broadcast_arrays(np.clip(q, 0.0, 1.0), c)
    target = np.minimum(q, c)
    if phi is Phi.EXPONENTIAL:
        sur = 2.0 * np.sqrt(q * c)
    else:
        lo = np.full(q.shape, -_R_BOUND)
        hi = np.full(q.shape, _R_BOUND)
        _, sur = golden_section_minimize(lambda r: second_stage_conditional_risk(phi, q, r, c), lo, hi)
    if sur.ndim == 0:
        return SecondStageBest(float(sur), float(target))
    return SecondStageBest(sur, target)


def second_stage_calibration_gap(phi: Phi, q_err, c, r):
    return second_stage_conditional_risk(phi, q_err, r, c) - best_second_stage_risk(phi, q_err, c).surrogate


# ---------------------------------------------------------------------------
# expectations over a finite distribution


def _pointwise_gap(loss, dist: FiniteDistribution, asg: ScoreAssignment, grid: GridSpec | None):
    p, c, s, r = dist.probs, dist.costs, asg.scores, asg.rejector
    if loss is Target.ABSTENTION:
        return abstention_calibration_gap(p, c, s, r)
    if loss is Target.TWO_STAGE_ABSTENTION:
        q = 1.0 - p[np.arange(dist.size), asg.predicted]
        return np.where(r > 0, q, c) - np.minimum(q, c)
    if isinstance(loss, LossSpec):
        return surrogate_calibration_gap(loss, p, c, s, r, grid)
    raise TypeError(f"unsupported loss selector {loss!r}")


def expected_calibration_gap(
    dist: FiniteDistribution,
    assignment: ScoreAssignment,
    loss,
    grid: GridSpec | None = None,
) -> float:
    """``E_x[conditional risk - best-in-class conditional risk]``."""
    assignment.check_aligned(dist)
    return float(dist.weights @ _pointwise_gap(loss, dist, assignment, grid))


# ---------------------------------------------------------------------------
# minimizability gaps


def _best_pointwise(loss, dist: FiniteDistribution, grid: GridSpec | None) -> np.ndarray:
    if loss is Target.ABSTENTION:
        return best_abstention_risk(dist.probs, dist.costs)
    spec: LossSpec = loss
    if spec.family is Family.TWO_STAGE:
        raise ValueError("minimizability gaps are defined here for the joint (h, r) losses")
    if spec.is_admissible:
        return best_single_stage_risk_closed_form(spec, dist.probs, dist.costs)
    return np.array(
        [best_single_stage_risk_bruteforce(spec, p, c, grid=grid).value for p, c in zip(dist.probs, dist.costs)]
    )


def _inner_floor(spec: LossSpec, dist: FiniteDistribution, grid: GridSpec) -> np.ndarray:
    if spec.is_admissible or spec.inner is InnerLoss.LOGISTIC:
        return best_inner_risk(spec.inner, dist.probs, spec.rho)
    return np.array([best_single_stage_risk_bruteforce(spec, p, 0.0, grid=grid).best_inner for p in dist.probs])


def _expected_loss_linear(loss, dist: FiniteDistribution, theta: np.ndarray) -> float:
    x = dist.features
    m, d = x.shape
    n = dist.n_classes
    hinge = isinstance(loss, LossSpec) and loss.inner is InnerLoss.CONSTRAINED_HINGE
    heads = n - 1 if hinge else n
    w = theta[: heads * (d + 1)].reshape(heads, d + 1)
    v = theta[heads * (d + 1):]
    s = x @ w[:, :d].T + w[:, d]
    if hinge:
        s = np.hstack([s, -s.sum(axis=1, keepdims=True)])
    r = x @ v[:d] + v[d]
    if isinstance(loss, LossSpec):
        bound = 500.0 / max(loss.alpha, loss.beta)
        r = np.clip(r, -bound, bound)
    risk = conditional_risk(loss, dist.probs, s, r, dist.costs)
    return float(dist.weights @ risk)


def minimizability_gap(
    dist: FiniteDistribution,
    loss,
    hypothesis_class: HypothesisClass | str = HypothesisClass.UNRESTRICTED,
    grid: GridSpec | None = None,
    seed: int = 0,
    n_candidates: int = 4000,
) -> GapEstimate:
    """Best-in-class expected risk minus the expected pointwise best risk.

    Unrestricted classes give exactly 0 on a finite support. Restricted
    classes are searched on a grid (constant rejector) or by random search
    plus local refinement (linear scorers and rejector over the features);
    those values upper-bound the true gap and are flagged as estimates.
    """
    hypothesis_class = HypothesisClass(hypothesis_class)
    grid = grid or GridSpec()
    pointwise = float(dist.weights @ _best_pointwise(loss, dist, grid))
    if hypothesis_class is HypothesisClass.UNRESTRICTED:
        return GapEstimate(0.0, pointwise, pointwise, hypothesis_class, is_estimate=False)

    if hypothesis_class is HypothesisClass.CONSTANT_REJECTOR:
        rs = grid.r_values()
        if loss is Target.ABSTENTION:
            accept = float(dist.weights @ (1.0 - dist.probs.max(axis=1)))
            reject = float(dist.weights @ dist.costs)
            curve = np.where(rs > 0, accept, reject)
        else:
            a = _inner_floor(loss, dist, grid)
            b = psi_value(loss.psi, dist.costs, dist.n_classes)
            curve = (dist.weights @ a) * np.exp(loss.alpha * rs) + (dist.weights @ b) * np.exp(-loss.beta * rs)
        j = int(np.argmin(curve))
        best = float(curve[j])
        return GapEstimate(
            max(best - pointwise, 0.0), best, pointwise, hypothesis_class, is_estimate=True,
            details={"best_constant_r": float(rs[j])},
        )

    if dist.features is None:
        raise ValueError("the linear class needs features on the distribution")
    rng = np.random.default_rng(seed)
    d = dist.features.shape[1]
    hinge = isinstance(loss, LossSpec) and loss.inner is InnerLoss.CONSTRAINED_HINGE
    dim = ((dist.n_classes - 1) if hinge else dist.n_classes) * (d + 1) + d + 1
    scale = max(abs(grid.score_range[0]), abs(grid.score_range[1]))
    thetas = rng.uniform(-scale, scale, size=(n_candidates, dim))
    vals = np.array([_expected_loss_linear(loss, dist, th) for th in thetas])
    order = np.argsort(vals)
    best = float(vals[order[0]])
    best_theta = thetas[order[0]]
    if isinstance(loss, LossSpec):
        for k in order[:5]:
            res = optimize.minimize(
                lambda th: _expected_loss_linear(loss, dist, th), thetas[k], method="Powell",
                options={"xtol": 1e-8, "ftol": 1e-12, "maxfev": 20_000},
            )
            if res.fun < best:
                best, best_theta = float(res.fun), res.x
    return GapEstimate(
        max(best - pointwise, 0.0), best, pointwise, hypothesis_class, is_estimate=True,
        details={"best_theta": best_theta.tolist()},
    )
