"""Pointwise losses for multi-class learning with abstention.

Everything here works on raw label scores ``h(x, .)`` (last array axis holds
the ``n`` labels) and a scalar rejector value ``r(x)``. Labels are 0-based
integers. Inputs broadcast: a ``(m, n)`` score array with ``(m,)`` labels and
rejector values evaluates ``m`` points at once.

A point is rejected when ``r <= 0``. The predicted label is the argmax of the
scores with ties broken toward the lowest index.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "InnerLoss",
    "Psi",
    "Phi",
    "Family",
    "LossSpec",
    "DomainError",
    "ConstraintViolationError",
    "HINGE_SUM_TOL",
    "predicted_label",
    "softmax",
    "abstention_loss",
    "score_based_loss",
    "mae_loss",
    "rho_margin_loss",
    "constrained_rho_hinge_loss",
    "logistic_loss",
    "zero_one_loss",
    "inner_loss",
    "inner_loss_all_labels",
    "psi_value",
    "phi_value",
    "phi_derivative",
    "single_stage_surrogate",
    "two_stage_surrogate",
    "two_stage_abstention_loss",
    "loss_gradient",
    "inner_loss_gradient",
]

HINGE_SUM_TOL = 1e-9
_EXP_LIMIT = 500.0


class DomainError(ValueError):
    """An argument lies outside the range where a loss is evaluated safely."""


class ConstraintViolationError(ValueError):
    """Scores passed to the constrained hinge loss do not sum to zero."""


class InnerLoss(str, enum.Enum):
    MAE = "mae"
    RHO_MARGIN = "rho_margin"
    CONSTRAINED_HINGE = "constrained_hinge"
    LOGISTIC = "logistic"
    ZERO_ONE = "zero_one"


class Psi(str, enum.Enum):
    """Transform applied to the abstention cost in the single-stage surrogate."""

    IDENTITY = "identity"
    SCALE_BY_N = "scale_by_n"
    # breaks the admissibility condition; only used by the negative-result demo
    SQUARE = "square"


class Phi(str, enum.Enum):
    """Margin losses for the rejector. Logistic is taken in base 2 so Phi(0) = 1."""

    EXPONENTIAL = "exponential"
    LOGISTIC = "logistic"
    HINGE = "hinge"


class Family(str, enum.Enum):
    SINGLE_STAGE = "single_stage"
    TWO_STAGE = "two_stage"


_ADMISSIBLE = {
    (InnerLoss.MAE, Psi.IDENTITY),
    (InnerLoss.RHO_MARGIN, Psi.IDENTITY),
    (InnerLoss.CONSTRAINED_HINGE, Psi.SCALE_BY_N),
}


@dataclass(frozen=True)
class LossSpec:
    """Selects a surrogate family and its parameters.

    The single-stage surrogate is ``inner(h, y) * exp(alpha * r) + psi(c) * exp(-beta * r)``;
    the two-stage (second stage) surrogate is ``1[pred != y] * phi(-r) + c * phi(r)``.
    """

    inner: InnerLoss = InnerLoss.MAE
    rho: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    psi: Psi = Psi.IDENTITY
    phi: Phi = Phi.EXPONENTIAL
    family: Family = Family.SINGLE_STAGE

    def __post_init__(self) -> None:
        # accept plain strings for the enum fields
        object.__setattr__(self, "inner", InnerLoss(self.inner))
        object.__setattr__(self, "psi", Psi(self.psi))
        object.__setattr__(self, "phi", Phi(self.phi))
        object.__setattr__(self, "family", Family(self.family))
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"alpha and beta must be positive, got {self.alpha}, {self.beta}")

    @property
    def is_admissible(self) -> bool:
        """True when this loss is one of the three pairings with a known consistency bound."""
        return (
            self.family is Family.SINGLE_STAGE
            and math.isclose(self.alpha, self.beta)
            and (self.inner, self.psi) in _ADMISSIBLE
        )

    def require_admissible(self) -> None:
        if not self.is_admissible:
            raise ValueError(
                "spec needs alpha == beta and (inner, psi) in "
                "{(mae, identity), (rho_margin, identity), (constrained_hinge, scale_by_n)}; "
                f"got inner={self.inner.value}, psi={self.psi.value}, "
                f"alpha={self.alpha}, beta={self.beta}"
            )

    @classmethod
    def admissible(cls, inner: InnerLoss | str, rho: float = 1.0, alpha: float = 1.0) -> "LossSpec":
        """The admissible single-stage spec for ``inner``."""
        inner = InnerLoss(inner)
        psi = Psi.SCALE_BY_N if inner is InnerLoss.CONSTRAINED_HINGE else Psi.IDENTITY
        spec = cls(inner=inner, rho=rho, alpha=alpha, beta=alpha, psi=psi)
        spec.require_admissible()
        return spec

    def to_dict(self) -> dict:
        return {
            "inner": self.inner.value,
            "rho": self.rho,
            "alpha": self.alpha,
            "beta": self.beta,
            "psi": self.psi.value,
            "phi": self.phi.value,
            "family": self.family.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LossSpec":
        return cls(**data)


# ---------------------------------------------------------------------------
# helpers


def _scores(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    if s.ndim == 0 or s.shape[-1] < 2:
        raise ValueError("scores need at least two labels on the last axis")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s


def _labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(np.asarray(y, dtype=float) != np.round(np.asarray(y, dtype=float))):
            raise ValueError("labels must be integers")
        y = y.astype(int)
    if np.any(y < 0) or np.any(y >= n):
        raise ValueError(f"label out of range for {n} classes: {y}")
    return y


def _pick(values: np.ndarray, y: np.ndarray) -> np.ndarray:
    """values[..., y] with y broadcast against the leading axes."""
    lead = np.broadcast_shapes(values.shape[:-1], y.shape)
    v = np.broadcast_to(values, lead + values.shape[-1:])
    yy = np.broadcast_to(y, lead)
    return np.take_along_axis(v, yy[..., None], axis=-1)[..., 0]


def _cost(c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if np.any(c < 0) or np.any(c > 1):
        raise ValueError(f"cost must lie in [0, 1], got {c}")
    return c


def _rejector(r, scale: float = 1.0) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("rejector value must be finite")
    if np.any(np.abs(r) * scale > _EXP_LIMIT):
        raise DomainError(f"|r| exceeds {_EXP_LIMIT}/{scale}; exponential would overflow")
    return r


def _out(a):
    a = np.asarray(a)
    return float(a) if a.ndim == 0 else a


def _one_hot(y: np.ndarray, n: int) -> np.ndarray:
    return (y[..., None] == np.arange(n)).astype(float)


# ---------------------------------------------------------------------------
# decisions and target losses


def predicted_label(scores):
    """Argmax label; ties go to the lowest index."""
    s = _scores(scores)
    return _out(np.argmax(s, axis=-1))


def softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    z = np.exp(s - s.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def abstention_loss(scores, r, y, c):
    """Zero-one loss when accepting (``r > 0``), cost ``c`` when rejecting."""
    s = _scores(scores)
    y = _labels(y, s.shape[-1])
    c = _cost(c)
    r = np.asarray(r, dtype=float)
    wrong = (np.argmax(s, axis=-1) != y).astype(float)
    return _out(np.where(r > 0, wrong, c))


def score_based_loss(scores_aug, y, c):
    """Abstention loss of the augmented formulation with ``n + 1`` scores.

    The last entry is the rejection score; the learner abstains whenever it is
    at least the largest label score.
    """
    s = np.asarray(scores_aug, dtype=float)
    if s.ndim == 0 or s.shape[-1] < 3:
        raise ValueError("augmented scores need n + 1 >= 3 entries")
    n = s.shape[-1] - 1
    y = _labels(y, n)
    c = _cost(c)
    label_scores = s[..., :n]
    abstain = s[..., n] >= label_scores.max(axis=-1)
    wrong = (np.argmax(label_scores, axis=-1) != y).astype(float)
    return _out(np.where(abstain, c, wrong))


# ---------------------------------------------------------------------------
# multi-class inner losses


def mae_loss(scores, y):
    """Mean absolute error ``1 - softmax(scores)[y]``."""
    s = _scores(scores)
    y = _labels(y, s.shape[-1])
    return _out(1.0 - _pick(softmax(s), y))


def _margins(s: np.ndarray) -> np.ndarray:
    """Confidence margin of every label: ``s[y] - max_{y' != y} s[y']``."""
    order = np.sort(s, axis=-1)
    top, second = order[..., -1:], order[..., -2:-1]
    best_other = np.where(s == top, second, top)
    # a tied top score is "other" for its twin; sort handles that since second == top
    return s - best_other


def rho_margin_loss(scores, y, rho: float):
    """Ramp ``min(max(0, 1 - m / rho), 1)`` of the confidence margin ``m``."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    s = _scores(scores)
    y = _labels(y, s.shape[-1])
    m = _pick(_margins(s), y)
    return _out(np.clip(1.0 - m / rho, 0.0, 1.0))


def _check_sum_zero(s: np.ndarray) -> None:
    total = np.abs(s.sum(axis=-1))
    if np.any(total > HINGE_SUM_TOL):
        raise ConstraintViolationError(
            f"constrained hinge needs scores summing to 0 (tol {HINGE_SUM_TOL}); "
            f"max |sum| = {float(total.max()):.3g}"
        )


def constrained_rho_hinge_loss(scores, y, rho: float):
    """``sum_{y' != y} max(0, 1 + s[y'] / rho)`` for scores constrained to sum to zero."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    s = _scores(scores)
    _check_sum_zero(s)
    y = _labels(y, s.shape[-1])
    terms = np.maximum(0.0, 1.0 + s / rho)
    return _out(terms.sum(axis=-1) - _pick(terms, y))


def logistic_loss(scores, y):
    """Cross-entropy of the softmax, ``logsumexp(scores) - scores[y]``."""
    s = _scores(scores)
    y = _labels(y, s.shape[-1])
    mx = s.max(axis=-1)
    lse = mx + np.log(np.exp(s - mx[..., None]).sum(axis=-1))
    return _out(lse - _pick(s, y))


def zero_one_loss(scores, y):
    s = _scores(scores)
    y = _labels(y, s.shape[-1])
    return _out((np.argmax(s, axis=-1) != y).astype(float))


def inner_loss_all_labels(kind: InnerLoss, scores, rho: float = 1.0) -> np.ndarray:
    """Inner loss evaluated for every candidate true label; shape matches ``scores``."""
    kind = InnerLoss(kind)
    s = _scores(scores)
    n = s.shape[-1]
    if kind is InnerLoss.MAE:
        return 1.0 - softmax(s)
    if kind is InnerLoss.LOGISTIC:
        mx = s.max(axis=-1, keepdims=True)
        lse = mx + np.log(np.exp(s - mx).sum(axis=-1, keepdims=True))
        return lse - s
    if kind is InnerLoss.RHO_MARGIN:
        return np.clip(1.0 - _margins(s) / rho, 0.0, 1.0)
    if kind is InnerLoss.CONSTRAINED_HINGE:
        _check_sum_zero(s)
        terms = np.maximum(0.0, 1.0 + s / rho)
        return terms.sum(axis=-1, keepdims=True) - terms
    if kind is InnerLoss.ZERO_ONE:
        return 1.0 - _one_hot(np.argmax(s, axis=-1), n)
    raise ValueError(f"unknown inner loss {kind}")


def inner_loss(kind: InnerLoss, scores, y, rho: float = 1.0):
    s = _scores(scores)
    y = _labels(y, s.shape[-1])
    return _out(_pick(inner_loss_all_labels(kind, s, rho), y))


# ---------------------------------------------------------------------------
# surrogate pieces


def psi_value(kind: Psi, c, n: int):
    kind = Psi(kind)
    c = np.asarray(c, dtype=float)
    if kind is Psi.IDENTITY:
        return _out(c)
    if kind is Psi.SCALE_BY_N:
        return _out(n * c)
    return _out(c * c)


def phi_value(kind: Phi, t):
    kind = Phi(kind)
    t = np.asarray(t, dtype=float)
    if kind is Phi.EXPONENTIAL:
        return _out(np.exp(-t))
    if kind is Phi.LOGISTIC:
        return _out(np.logaddexp(0.0, -t) / math.log(2.0))
    return _out(np.maximum(0.0, 1.0 - t))


def phi_derivative(kind: Phi, t):
    """Right derivative of ``phi`` (the hinge kink at t = 1 gets slope 0)."""
    kind = Phi(kind)
    t = np.asarray(t, dtype=float)
    if kind is Phi.EXPONENTIAL:
        return _out(-np.exp(-t))
    if kind is Phi.LOGISTIC:
        # -sigmoid(-t) / ln 2, written stably
        return _out(-np.exp(-np.logaddexp(0.0, t)) / math.log(2.0))
    return _out(np.where(t < 1.0, -1.0, 0.0))


def single_stage_surrogate(spec: LossSpec, scores, r, y, c):
    s = _scores(scores)
    n = s.shape[-1]
    r = _rejector(r, max(spec.alpha, spec.beta))
    ell = inner_loss(spec.inner, s, y, spec.rho)
    return _out(ell * np.exp(spec.alpha * r) + psi_value(spec.psi, _cost(c), n) * np.exp(-spec.beta * r))


def two_stage_surrogate(phi: Phi, predicted, y, r, c):
    """Second-stage rejector loss ``1[predicted != y] * phi(-r) + c * phi(r)``."""
    wrong = (np.asarray(predicted) != np.asarray(y)).astype(float)
    r = _rejector(r)
    return _out(wrong * phi_value(phi, -r) + _cost(c) * phi_value(phi, r))


def two_stage_abstention_loss(predicted, y, r, c):
    wrong = (np.asarray(predicted) != np.asarray(y)).astype(float)
    r = np.asarray(r, dtype=float)
    return _out(np.where(r > 0, wrong, _cost(c)))


# ---------------------------------------------------------------------------
# gradients


def _inner_grad(kind: InnerLoss, s: np.ndarray, y: np.ndarray, rho: float) -> np.ndarray:
    n = s.shape[-1]
    onehot = _one_hot(np.broadcast_to(y, s.shape[:-1]), n)
    if kind is InnerLoss.MAE:
        p = softmax(s)
        py = (p * onehot).sum(axis=-1, keepdims=True)
        return py * p - py * onehot
    if kind is InnerLoss.LOGISTIC:
        return softmax(s) - onehot
    if kind is InnerLoss.RHO_MARGIN:
        others = np.where(onehot > 0, -np.inf, s)
        rival = np.argmax(others, axis=-1)
        m = (s * onehot).sum(axis=-1) - others.max(axis=-1)
        # right derivative: the ramp is active on [0, rho)
        slope = np.where((m >= 0) & (m < rho), -1.0 / rho, 0.0)[..., None]
        return slope * (onehot - _one_hot(rival, n))
    if kind is InnerLoss.CONSTRAINED_HINGE:
        active = (1.0 + s / rho >= 0).astype(float) / rho
        return active * (1.0 - onehot)
    raise ValueError(f"{kind.value} has no useful gradient")


def inner_loss_gradient(kind: InnerLoss, scores, y, rho: float = 1.0) -> np.ndarray:
    """Gradient of ``inner_loss`` with respect to the scores (right derivatives at kinks)."""
    kind = InnerLoss(kind)
    s = _scores(scores)
    return _inner_grad(kind, s, _labels(y, s.shape[-1]), rho)


def loss_gradient(spec: LossSpec, scores, r, y, c):
    """Gradient of the selected surrogate with respect to ``(scores, r)``.

    Returns ``(score_grad, r_grad)``. For the two-stage family the scores only
    enter through the predicted label, so the score gradient is zero.
    """
    s = _scores(scores)
    n = s.shape[-1]
    y = _labels(y, n)
    c = _cost(c)
    if spec.family is Family.TWO_STAGE:
        r = _rejector(r)
        wrong = (np.argmax(s, axis=-1) != y).astype(float)
        g_r = -wrong * phi_derivative(spec.phi, -r) + c * phi_derivative(spec.phi, r)
        g_s = np.zeros(np.broadcast_shapes(s.shape, np.shape(g_r) + (n,)))
        return g_s, _out(g_r)
    if spec.inner is InnerLoss.CONSTRAINED_HINGE:
        _check_sum_zero(s)
    r = _rejector(r, max(spec.alpha, spec.beta))
    ell = _pick(inner_loss_all_labels(spec.inner, s, spec.rho), y)
    up = np.exp(spec.alpha * r)
    down = psi_value(spec.psi, c, n) * np.exp(-spec.beta * r)
    g_s = np.asarray(up)[..., None] * _inner_grad(spec.inner, s, y, spec.rho)
    g_r = spec.alpha * ell * up - spec.beta * down
    return g_s, _out(g_r)
