"""Synthetic datasets and CSV ingestion.

Labels are stored 0-based. Every generator is deterministic given its seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "CounterexampleParams",
    "CsvFormatError",
    "gen_counterexample",
    "counterexample_labels",
    "gen_realizable",
    "gen_noisy_mixture",
    "noisy_mixture_posterior",
    "noisy_mixture_bayes_loss",
    "load_csv",
    "write_csv",
]


class CsvFormatError(ValueError):
    """Malformed CSV input; the message names the offending row and column."""


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    costs: np.ndarray | None = None
    label_names: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("need exactly one label per feature row")
        if not np.issubdtype(self.labels.dtype, np.integer):
            if np.any(self.labels != np.round(self.labels)):
                raise ValueError("labels must be integers")
        self.labels = self.labels.astype(np.int64)
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in 0..{self.n_classes - 1}")
        if self.costs is not None:
            self.costs = np.asarray(self.costs, dtype=float)
            if self.costs.shape != self.labels.shape:
                raise ValueError("need one cost per row")
            if np.any(self.costs < 0) or np.any(self.costs > 1):
                raise ValueError("costs must lie in [0, 1]")
        if self.label_names is not None and len(self.label_names) != self.n_classes:
            raise ValueError("label_names must have one entry per class")

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.features[idx],
            self.labels[idx],
            self.n_classes,
            None if self.costs is None else self.costs[idx],
            self.label_names,
            dict(self.meta),
        )

    def split(self, train_fraction: float = 0.8, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Deterministic shuffled split."""
        if not 0 < train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        perm = np.random.default_rng(seed).permutation(self.m)
        k = int(round(train_fraction * self.m))
        return self.subset(np.sort(perm[:k])), self.subset(np.sort(perm[k:]))

    def cost_vector(self, default: float) -> np.ndarray:
        return np.full(self.m, float(default)) if self.costs is None else self.costs


# ---------------------------------------------------------------------------
# generators


@dataclass(frozen=True)
class CounterexampleParams:
    """Two unit-norm linear functions on the unit disk plus the abstention cost."""

    w_abs: tuple[float, ...] = (0.0, 1.0)
    b_abs: float = 0.0
    w_pred: tuple[float, ...] = (1.0, 0.0)
    b_pred: float = 0.0
    c: float = 0.2
    sample_count: int = 50_000
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("w_abs", "w_pred"):
            w = np.asarray(getattr(self, name), dtype=float)
            if w.ndim != 1 or abs(np.linalg.norm(w) - 1.0) > 1e-9:
                raise ValueError(f"{name} must have unit Euclidean norm")
            object.__setattr__(self, name, tuple(float(v) for v in w))
        if len(self.w_abs) != len(self.w_pred):
            raise ValueError("w_abs and w_pred must have the same dimension")
        if not 0.0 <= self.c < 0.5:
            raise ValueError("cost must lie in [0, 1/2)")
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")

    @property
    def dim(self) -> int:
        return len(self.w_abs)

    def f_abs(self, x: np.ndarray) -> np.ndarray:
        return x @ np.asarray(self.w_abs) + self.b_abs

    def f_pred(self, x: np.ndarray) -> np.ndarray:
        return x @ np.asarray(self.w_pred) + self.b_pred


def _unit_ball(rng: np.random.Generator, m: int, d: int) -> np.ndarray:
    out = np.empty((0, d))
    while out.shape[0] < m:
        need = m - out.shape[0]
        cand = rng.uniform(-1.0, 1.0, size=(int(need / (math.pi / 4) * 1.2) + 16, d))
        cand = cand[np.einsum("ij,ij->i", cand, cand) <= 1.0]
        out = np.vstack([out, cand[:need]])
    return out


def counterexample_labels(params: CounterexampleParams, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    coin = rng.integers(0, 2, size=x.shape[0])
    clean = np.where(params.f_pred(x) > 0, 0, 1)
    return np.where(params.f_abs(x) <= 0, coin, clean)


def gen_counterexample(params: CounterexampleParams | None = None) -> Dataset:
    """Uniform points on the unit ball with the coin-flip / linear labelling rule.

    Points with ``f_abs <= 0`` get a fair coin label; elsewhere the label is
    0 where ``f_pred > 0`` and 1 otherwise.
    """
    params = params or CounterexampleParams()
    rng = np.random.default_rng(params.seed)
    x = _unit_ball(rng, params.sample_count, params.dim)
    y = counterexample_labels(params, x, rng)
    return Dataset(x, y, 2, meta={"generator": "counterexample", "c": params.c})


def gen_realizable(n: int, d: int, m: int, margin: float, seed: int = 0, max_attempts: int = 50) -> Dataset:
    """Points labelled by a hidden linear scorer, kept only where its top-two gap is at least ``margin``.

    The hidden scorer together with ``r = 1`` has zero abstention loss.
    The hidden weights and bias are stored in ``meta``.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    if n < 2 or d < 1 or m < 1:
        raise ValueError("need n >= 2, d >= 1, m >= 1")
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        w = rng.normal(size=(n, d))
        b = rng.normal(scale=0.5, size=n)
        kept = np.empty((0, d))
        while kept.shape[0] < m:
            x = rng.normal(size=(2 * m, d))
            s = np.sort(x @ w.T + b, axis=1)
            kept = np.vstack([kept, x[s[:, -1] - s[:, -2] >= margin]])
        x = kept[:m]
        y = np.argmax(x @ w.T + b, axis=1)
        if np.bincount(y, minlength=n).min() >= 1:
            return Dataset(
                x, y, n,
                meta={"generator": "realizable", "hidden_weights": w.tolist(), "hidden_bias": b.tolist(),
                      "margin": margin, "attempt": attempt},
            )
    raise RuntimeError("could not draw a realizable sample with every class present")


def _mixture_means(n: int, d: int, separation: float) -> np.ndarray:
    if d < n + 1:
        raise ValueError("the noisy mixture needs d >= n + 1 (one region coordinate plus one axis per class)")
    means = np.zeros((n, d))
    means[np.arange(n), 1 + np.arange(n)] = separation
    return means


def gen_noisy_mixture(
    n: int,
    d: int,
    m: int,
    noise_region_fraction: float,
    noise_level: float,
    seed: int = 0,
    separation: float = 4.0,
) -> Dataset:
    """Gaussian class blobs with a label-noise region.

    Coordinate 0 is ``z ~ U[0, 1]`` and carries no class signal; the noise
    region is ``z < noise_region_fraction``. The other coordinates hold
    unit-variance blobs centred at ``separation * e_k``. Inside the region a
    label is replaced by a uniform draw with probability ``noise_level``.
    """
    if not (0 <= noise_region_fraction <= 1 and 0 <= noise_level <= 1):
        raise ValueError("fractions must lie in [0, 1]")
    means = _mixture_means(n, d, separation)
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n, size=m)
    x = means[y] + rng.normal(size=(m, d))
    x[:, 0] = rng.uniform(0.0, 1.0, size=m)
    flip = (x[:, 0] < noise_region_fraction) & (rng.uniform(size=m) < noise_level)
    y = np.where(flip, rng.integers(0, n, size=m), y)
    return Dataset(
        x, y, n,
        meta={"generator": "noisy_mixture", "noise_region_fraction": noise_region_fraction,
              "noise_level": noise_level, "separation": separation},
    )


def noisy_mixture_posterior(
    x: np.ndarray, n: int, noise_region_fraction: float, noise_level: float, separation: float = 4.0
) -> np.ndarray:
    """Exact ``p(y | x)`` for :func:`gen_noisy_mixture`."""
    x = np.atleast_2d(x)
    means = _mixture_means(n, x.shape[1], separation)
    logits = x[:, 1:] @ means[:, 1:].T - 0.5 * (means[:, 1:] ** 2).sum(axis=1)
    logits -= logits.max(axis=1, keepdims=True)
    post = np.exp(logits)
    post /= post.sum(axis=1, keepdims=True)
    eta = np.where(x[:, 0] < noise_region_fraction, noise_level, 0.0)[:, None]
    return (1.0 - eta) * post + eta / n


def noisy_mixture_bayes_loss(
    n: int,
    d: int,
    noise_region_fraction: float,
    noise_level: float,
    c: float,
    separation: float = 4.0,
    samples: int = 200_000,
    seed: int = 12345,
) -> dict:
    """Monte-Carlo integral of ``min(1 - max p, c)`` and the Bayes rejection mass."""
    ds = gen_noisy_mixture(n, d, samples, noise_region_fraction, noise_level, seed, separation)
    p = noisy_mixture_posterior(ds.features, n, noise_region_fraction, noise_level, separation)
    err = 1.0 - p.max(axis=1)
    reject = err > c
    return {
        "bayes_loss": float(np.minimum(err, c).mean()),
        "bayes_rejection_ratio": float(reject.mean()),
        "stderr": float(np.minimum(err, c).std() / math.sqrt(samples)),
    }


# ---------------------------------------------------------------------------
# CSV


def _label_order(values: list[str]) -> list[str]:
    uniq = set(values)
    try:
        return sorted(uniq, key=lambda v: (float(v), v))
    except ValueError:
        return sorted(uniq)


def load_csv(
    path: str | Path,
    label_column: str = "label",
    feature_columns: list[str] | None = None,
    cost_column: str | None = "cost",
    label_names: list[str] | None = None,
) -> Dataset:
    """Read a header-row CSV into a :class:`Dataset`.

    Labels are mapped to ``0..n-1``: numeric labels in numeric order,
    otherwise lexicographically, unless ``label_names`` fixes the order, in
    which case an unseen label is an error. Without a cost column the
    dataset carries ``meta["cost_fallback"] = True`` and callers supply a
    constant cost.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        rows = list(reader)
    if label_column not in header:
        raise CsvFormatError(f"{path}: no label column {label_column!r} in header {header}")
    has_cost = cost_column is not None and cost_column in header
    if feature_columns is None:
        feature_columns = [h for h in header if h != label_column and not (has_cost and h == cost_column)]
    missing = [f for f in feature_columns if f not in header]
    if missing:
        raise CsvFormatError(f"{path}: feature columns {missing} not in header")
    if not feature_columns:
        raise CsvFormatError(f"{path}: no feature columns")
    fidx = [header.index(f) for f in feature_columns]
    lidx = header.index(label_column)
    cidx = header.index(cost_column) if has_cost else None

    feats = np.empty((len(rows), len(fidx)))
    raw_labels: list[str] = []
    costs = np.empty(len(rows)) if has_cost else None
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise CsvFormatError(f"{path}: row {i} has {len(row)} fields, header has {len(header)}")
        for j, k in enumerate(fidx):
            try:
                feats[i - 2, j] = float(row[k])
            except ValueError:
                raise CsvFormatError(
                    f"{path}: row {i}, column {header[k]!r}: non-numeric feature {row[k]!r}"
                ) from None
        raw_labels.append(row[lidx].strip())
        if cidx is not None:
            try:
                costs[i - 2] = float(row[cidx])
            except ValueError:
                raise CsvFormatError(f"{path}: row {i}, column {cost_column!r}: non-numeric cost {row[cidx]!r}") from None

    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    names = list(label_names) if label_names is not None else _label_order(raw_labels)
    index = {name: k for k, name in enumerate(names)}
    unknown = sorted(set(raw_labels) - set(index))
    if unknown:
        raise CsvFormatError(f"{path}: labels {unknown} not in the declared label set {names}")
    y = np.array([index[v] for v in raw_labels], dtype=np.int64)
    meta = {"source": str(path), "feature_names": feature_columns, "cost_fallback": not has_cost}
    return Dataset(feats, y, max(len(names), 2), costs, names if len(names) >= 2 else None, meta)


def write_csv(ds: Dataset, path: str | Path, label_column: str = "label", cost_column: str = "cost") -> None:
    """Write ``ds`` so that :func:`load_csv` reads it back unchanged.

    Floats use ``repr`` so they round-trip exactly; rows keep their order.
    """
    names = ds.meta.get("feature_names") or [f"x{j}" for j in range(ds.d)]
    label_names = ds.label_names or [str(k) for k in range(ds.n_classes)]
    header = list(names) + [label_column] + ([cost_column] if ds.costs is not None else [])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(ds.m):
            row = [repr(float(v)) for v in ds.features[i]] + [label_names[ds.labels[i]]]
            if ds.costs is not None:
                row.append(repr(float(ds.costs[i])))
            w.writerow(row)
