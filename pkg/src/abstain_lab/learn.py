"""Linear and one-hidden-layer models for predictor and rejector, trained by SGD.

Everything is plain numpy with hand-written backprop so that every gradient
can be audited against finite differences.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    DomainError,
    Family,
    InnerLoss,
    LossSpec,
    abstention_loss,
    inner_loss,
    inner_loss_gradient,
    loss_gradient,
    single_stage_surrogate,
    two_stage_surrogate,
)
from .synth import Dataset

__all__ = [
    "ABSTAIN",
    "CHECKPOINT_VERSION",
    "Stage",
    "Net",
    "Model",
    "TrainConfig",
    "Metrics",
    "GradCheckResult",
    "TrainingDivergedError",
    "init_model",
    "forward",
    "objective",
    "train",
    "train_single_stage",
    "train_two_stage",
    "predict",
    "evaluate",
    "gradient_check",
    "kink_free_mask",
    "save_model",
    "load_model",
]

ABSTAIN = -1
CHECKPOINT_VERSION = 1
DIVERGENCE_LIMIT = 1e6
SINGLE_STAGE_INNER = (InnerLoss.MAE, InnerLoss.RHO_MARGIN, InnerLoss.CONSTRAINED_HINGE)


class TrainingDivergedError(RuntimeError):
    pass


class Stage(str, enum.Enum):
    SINGLE_STAGE = "single_stage"
    TWO_STAGE_STAGE1 = "two_stage_stage1"
    TWO_STAGE_STAGE2 = "two_stage_stage2"


# ---------------------------------------------------------------------------
# networks


@dataclass
class Net:
    """``x -> W x + b`` or ``x -> W2 relu(W1 x + b1) + b2``."""

    kind: str
    params: dict[str, np.ndarray]

    @property
    def d_in(self) -> int:
        return self.params["W" if self.kind == "linear" else "W1"].shape[1]

    @property
    def d_out(self) -> int:
        return self.params["W" if self.kind == "linear" else "W2"].shape[0]

    @property
    def hidden(self) -> int | None:
        return None if self.kind == "linear" else self.params["W1"].shape[0]

    @classmethod
    def create(cls, kind: str, d_in: int, d_out: int, rng: np.random.Generator, hidden: int = 16) -> "Net":
        if kind == "linear":
            lim = 1.0 / math.sqrt(d_in)
            return cls("linear", {"W": rng.uniform(-lim, lim, (d_out, d_in)), "b": np.zeros(d_out)})
        if kind == "mlp":
            l1, l2 = 1.0 / math.sqrt(d_in), 1.0 / math.sqrt(hidden)
            return cls("mlp", {
                "W1": rng.uniform(-l1, l1, (hidden, d_in)), "b1": np.zeros(hidden),
                "W2": rng.uniform(-l2, l2, (d_out, hidden)), "b2": np.zeros(d_out),
            })
        raise ValueError(f"unknown network kind {kind!r}; expected 'linear' or 'mlp'")

    def forward(self, x: np.ndarray):
        p = self.params
        if self.kind == "linear":
            return x @ p["W"].T + p["b"], (x,)
        pre = x @ p["W1"].T + p["b1"]
        hid = np.maximum(pre, 0.0)
        return hid @ p["W2"].T + p["b2"], (x, pre, hid)

    def backward(self, cache, g_out: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        if self.kind == "linear":
            (x,) = cache
            return {"W": g_out.T @ x, "b": g_out.sum(axis=0)}
        x, pre, hid = cache
        g_hid = (g_out @ p["W2"]) * (pre > 0)
        return {"W1": g_hid.T @ x, "b1": g_hid.sum(axis=0), "W2": g_out.T @ hid, "b2": g_out.sum(axis=0)}

    def copy(self) -> "Net":
        return Net(self.kind, {k: v.copy() for k, v in self.params.items()})


@dataclass
class Model:
    predictor: Net
    rejector: Net
    n_classes: int
    constrained: bool = False
    history: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        heads = self.n_classes - 1 if self.constrained else self.n_classes
        if self.predictor.d_out != heads:
            raise ValueError(f"predictor has {self.predictor.d_out} outputs, expected {heads}")
        if self.rejector.d_out != 1:
            raise ValueError("rejector must have a single output")
        if self.predictor.d_in != self.rejector.d_in:
            raise ValueError("predictor and rejector disagree on the feature dimension")

    @property
    def d(self) -> int:
        return self.predictor.d_in

    def copy(self) -> "Model":
        return Model(self.predictor.copy(), self.rejector.copy(), self.n_classes, self.constrained, dict(self.history))

    def parameters(self) -> dict[str, np.ndarray]:
        out = {f"predictor.{k}": v for k, v in self.predictor.params.items()}
        out.update({f"rejector.{k}": v for k, v in self.rejector.params.items()})
        return out


def init_model(
    n_classes: int,
    d: int,
    kind: str = "linear",
    hidden: int = 16,
    constrained: bool = False,
    seed: int = 0,
    rejector_kind: str | None = None,
) -> Model:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, rejector bias +0.1."""
    rng = np.random.default_rng(seed)
    heads = n_classes - 1 if constrained else n_classes
    pred = Net.create(kind, d, heads, rng, hidden)
    rej = Net.create(rejector_kind or kind, d, 1, rng, hidden)
    rej.params["b" if rej.kind == "linear" else "b2"][:] = 0.1
    return Model(pred, rej, n_classes, constrained)


def _x(model: Model, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.d:
        raise ValueError(f"feature dimension {x.shape[1]} does not match model dimension {model.d}")
    return x, single


def _forward(model: Model, x: np.ndarray):
    z, pc = model.predictor.forward(x)
    if model.constrained:
        z = np.hstack([z, -z.sum(axis=1, keepdims=True)])
    r, rc = model.rejector.forward(x)
    return z, r[:, 0], (pc, rc)


def forward(model: Model, x):
    """Scores ``(m, n)`` and rejector values ``(m,)``; a 1-D ``x`` gives unbatched outputs."""
    x, single = _x(model, x)
    s, r, _ = _forward(model, x)
    return (s[0], float(r[0])) if single else (s, r)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    loss: LossSpec
    cost: float = 0.1
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    stage: Stage = Stage.SINGLE_STAGE

    def __post_init__(self) -> None:
        if isinstance(self.loss, dict):
            self.loss = LossSpec.from_dict(self.loss)
        self.stage = Stage(self.stage)
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 <= self.cost <= 1:
            raise ValueError("cost must lie in [0, 1]")
        spec = self.loss
        if self.stage is Stage.SINGLE_STAGE:
            if spec.family is not Family.SINGLE_STAGE or spec.inner not in SINGLE_STAGE_INNER:
                raise ValueError(
                    "single-stage training needs a single-stage spec with inner loss mae, rho_margin or constrained_hinge"
                )
        elif self.stage is Stage.TWO_STAGE_STAGE1:
            if spec.inner is InnerLoss.ZERO_ONE:
                raise ValueError("the zero-one loss has no useful gradient")
        elif spec.family is not Family.TWO_STAGE:
            raise ValueError("stage 2 needs a two-stage spec")

    def to_dict(self) -> dict:
        return {
            "loss": self.loss.to_dict(), "cost": self.cost, "epochs": self.epochs,
            "batch_size": self.batch_size, "learning_rate": self.learning_rate,
            "momentum": self.momentum, "seed": self.seed, "stage": self.stage.value,
        }


# ---------------------------------------------------------------------------
# objective and gradients


def _per_example_loss(model: Model, x, y, c, spec: LossSpec, stage: Stage) -> np.ndarray:
    s, r, _ = _forward(model, x)
    if stage is Stage.TWO_STAGE_STAGE1:
        return inner_loss(spec.inner, s, y, spec.rho)
    if stage is Stage.TWO_STAGE_STAGE2:
        return two_stage_surrogate(spec.phi, np.argmax(s, axis=1), y, r, c)
    return single_stage_surrogate(spec, s, r, y, c)


def objective(model: Model, data: Dataset, config: TrainConfig) -> float:
    """Empirical mean of the stage's training loss."""
    c = data.cost_vector(config.cost)
    return float(np.mean(_per_example_loss(model, data.features, data.labels, c, config.loss, config.stage)))


def _grads(model: Model, x, y, c, spec: LossSpec, stage: Stage) -> dict[str, np.ndarray]:
    """Gradients of the batch-mean loss, keyed like :meth:`Model.parameters`."""
    m = x.shape[0]
    s, r, (pc, rc) = _forward(model, x)
    if stage is Stage.TWO_STAGE_STAGE1:
        g_s = inner_loss_gradient(spec.inner, s, y, spec.rho)
        g_r = np.zeros(m)
    else:
        g_s, g_r = loss_gradient(spec, s, r, y, c)
    g_s = np.asarray(g_s) / m
    g_r = np.asarray(g_r).reshape(m, 1) / m
    if model.constrained:
        # last score is minus the sum of the heads
        g_s = g_s[:, :-1] - g_s[:, -1:]
    out = {f"predictor.{k}": v for k, v in model.predictor.backward(pc, g_s).items()}
    out.update({f"rejector.{k}": v for k, v in model.rejector.backward(rc, g_r).items()})
    return out


def _trainable(stage: Stage) -> tuple[str, ...]:
    if stage is Stage.TWO_STAGE_STAGE1:
        return ("predictor.",)
    if stage is Stage.TWO_STAGE_STAGE2:
        return ("rejector.",)
    return ("predictor.", "rejector.")


def train(model: Model, data: Dataset, config: TrainConfig) -> Model:
    """Mini-batch SGD with classical momentum on one stage; returns a new model.

    Batches are reshuffled each epoch from the run seed and the last partial
    batch is kept. The full-data objective is recorded after every epoch and
    training aborts with :class:`TrainingDivergedError` past 1e6.
    """
    if data.d != model.d:
        raise ValueError(f"data dimension {data.d} does not match model dimension {model.d}")
    if data.n_classes != model.n_classes:
        raise ValueError("data and model disagree on the number of classes")
    if config.loss.inner is InnerLoss.CONSTRAINED_HINGE and config.stage is not Stage.TWO_STAGE_STAGE2:
        if not model.constrained:
            raise ValueError("the constrained hinge needs a model built with constrained=True")
    model = model.copy()
    params = model.parameters()
    keys = [k for k in params if k.startswith(_trainable(config.stage))]
    velocity = {k: np.zeros_like(params[k]) for k in keys}
    rng = np.random.default_rng(config.seed)
    c_all = data.cost_vector(config.cost)
    trace = []
    for epoch in range(config.epochs):
        perm = rng.permutation(data.m)
        for start in range(0, data.m, config.batch_size):
            idx = perm[start : start + config.batch_size]
            try:
                g = _grads(model, data.features[idx], data.labels[idx], c_all[idx], config.loss, config.stage)
            except DomainError as exc:
                raise TrainingDivergedError(f"epoch {epoch}: rejector left the finite range ({exc})") from exc
            for k in keys:
                velocity[k] *= config.momentum
                velocity[k] -= config.learning_rate * g[k]
                params[k] += velocity[k]
        try:
            value = objective(model, data, config)
        except DomainError as exc:
            raise TrainingDivergedError(f"epoch {epoch}: rejector left the finite range ({exc})") from exc
        if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
            raise TrainingDivergedError(f"epoch {epoch}: objective {value:.3g} exceeds {DIVERGENCE_LIMIT:g}")
        trace.append(value)
    model.history = dict(model.history)
    model.history[config.stage.value] = trace
    return model


def train_single_stage(data: Dataset, config: TrainConfig, model: Model | None = None, kind: str = "linear",
                       hidden: int = 16) -> Model:
    """Joint predictor and rejector training on the single-stage surrogate."""
    if config.stage is not Stage.SINGLE_STAGE:
        raise ValueError("config.stage must be single_stage")
    if model is None:
        model = init_model(data.n_classes, data.d, kind, hidden,
                           constrained=config.loss.inner is InnerLoss.CONSTRAINED_HINGE, seed=config.seed)
    return train(model, data, config)


def train_two_stage(data: Dataset, config1: TrainConfig, config2: TrainConfig, model: Model | None = None,
                    kind: str = "linear", hidden: int = 16) -> Model:
    """Stage 1 fits the predictor; stage 2 fits the rejector against the frozen predictor's labels."""
    if config1.stage is not Stage.TWO_STAGE_STAGE1 or config2.stage is not Stage.TWO_STAGE_STAGE2:
        raise ValueError("expected a stage-1 and a stage-2 config")
    if model is None:
        model = init_model(data.n_classes, data.d, kind, hidden,
                           constrained=config1.loss.inner is InnerLoss.CONSTRAINED_HINGE, seed=config1.seed)
    model = train(model, data, config1)
    frozen = {k: v.copy() for k, v in model.predictor.params.items()}
    model = train(model, data, config2)
    for k, v in frozen.items():
        if not np.array_equal(v, model.predictor.params[k]):
            raise AssertionError("stage 2 modified the predictor")
    return model


# ---------------------------------------------------------------------------
# inference


def predict(model: Model, x) -> np.ndarray | int:
    """Predicted label, or ``ABSTAIN`` where ``r(x) <= 0``."""
    x, single = _x(model, x)
    s, r, _ = _forward(model, x)
    out = np.where(r > 0, np.argmax(s, axis=1), ABSTAIN)
    return int(out[0]) if single else out


@dataclass
class Metrics:
    abstention_loss: float
    accepted_error: float
    rejection_ratio: float
    accepted_count: int
    count: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def evaluate(model: Model, data: Dataset, c: float | None = None) -> Metrics:
    """Mean abstention loss, zero-one error on accepted points and rejection ratio.

    With nothing accepted the accepted error is reported as 0 and
    ``accepted_count`` is 0.
    """
    if data.m == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if c is None and data.costs is None:
        raise ValueError("need a cost: pass c or use a dataset with a cost column")
    cost = data.cost_vector(0.0 if c is None else c)
    s, r, _ = _forward(model, data.features)
    loss = abstention_loss(s, r, data.labels, cost)
    decision = predict(model, data.features)
    accepted = decision != ABSTAIN
    n_acc = int(accepted.sum())
    err = float(np.mean(decision[accepted] != data.labels[accepted])) if n_acc else 0.0
    return Metrics(float(np.mean(loss)), err, float(1.0 - n_acc / data.m), n_acc, data.m)


# ---------------------------------------------------------------------------
# gradient checking


def kink_free_mask(model: Model, x, y, spec: LossSpec, radius: float = 1e-4, stage: Stage | None = None) -> np.ndarray:
    """Rows whose loss is differentiable with at least ``radius`` to spare.

    Excludes ReLU pre-activations, margin and hinge breakpoints, argmax ties
    and hinge-Phi breakpoints that lie within ``radius``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y)
    s, r, (pc, rc) = _forward(model, x)
    ok = np.ones(x.shape[0], dtype=bool)
    for net, cache in ((model.predictor, pc), (model.rejector, rc)):
        if net.kind == "mlp":
            ok &= np.all(np.abs(cache[1]) > radius, axis=1)
    srt = np.sort(s, axis=1)
    top_gap = srt[:, -1] - srt[:, -2]
    if stage is Stage.TWO_STAGE_STAGE2 or spec.family is Family.TWO_STAGE:
        ok &= top_gap > radius
        if spec.phi.value == "hinge":
            ok &= (np.abs(r - 1) > radius) & (np.abs(r + 1) > radius)
        return ok
    rows = np.arange(x.shape[0])
    if spec.inner is InnerLoss.RHO_MARGIN:
        others = s.copy()
        others[rows, y] = -np.inf
        osrt = np.sort(others, axis=1)
        m = s[rows, y] - osrt[:, -1]
        ok &= (np.abs(m) > radius) & (np.abs(m - spec.rho) > radius)
        ok &= (osrt[:, -1] - osrt[:, -2] > radius) if s.shape[1] > 2 else True
    elif spec.inner is InnerLoss.CONSTRAINED_HINGE:
        ok &= np.all(np.abs(1 + s / spec.rho) > radius, axis=1)
    return ok


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_parameter: dict[str, float]
    points: int


def _flat_grads(model: Model, x, y, c, spec, stage) -> np.ndarray:
    g = _grads(model, x, y, c, spec, stage)
    return np.concatenate([g[k].ravel() for k in model.parameters()])


def gradient_check(
    model: Model,
    x,
    y,
    spec: LossSpec,
    cost: float = 0.2,
    stage: Stage | None = None,
    eps: float = 1e-5,
    per_point: bool = True,
) -> GradCheckResult:
    """Compare backprop gradients with central finite differences.

    The error is norm-wise, ``|g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8)``,
    computed over the full parameter vector for each point (or for the
    batch mean when ``per_point`` is false); the maximum is reported.
    Callers should drop kink neighbourhoods first (:func:`kink_free_mask`).
    """
    if stage is None:
        stage = Stage.TWO_STAGE_STAGE2 if spec.family is Family.TWO_STAGE else Stage.SINGLE_STAGE
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y)
    m = x.shape[0]
    c = np.full(m, float(cost))
    model = model.copy()
    params = model.parameters()
    names = list(params)
    sizes = [params[k].size for k in names]

    # finite differences of every per-example loss at once
    fd = np.empty((m, sum(sizes)))
    col = 0
    for k in names:
        flat = params[k].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = _per_example_loss(model, x, y, c, spec, stage)
            flat[i] = old - eps
            down = _per_example_loss(model, x, y, c, spec, stage)
            flat[i] = old
            fd[:, col] = (up - down) / (2 * eps)
            col += 1

    def rel(a, f):
        return float(np.linalg.norm(a - f) / max(np.linalg.norm(a), np.linalg.norm(f), 1e-8))

    splits = np.cumsum(sizes)[:-1]
    per_param = {k: 0.0 for k in names}
    worst = 0.0
    if per_point:
        for i in range(m):
            a = _flat_grads(model, x[i : i + 1], y[i : i + 1], c[i : i + 1], spec, stage)
            worst = max(worst, rel(a, fd[i]))
            for k, ap, fp in zip(names, np.split(a, splits), np.split(fd[i], splits)):
                per_param[k] = max(per_param[k], rel(ap, fp))
    else:
        a = _flat_grads(model, x, y, c, spec, stage)
        f = fd.mean(axis=0)
        worst = rel(a, f)
        for k, ap, fp in zip(names, np.split(a, splits), np.split(f, splits)):
            per_param[k] = rel(ap, fp)
    return GradCheckResult(worst, per_param, m)


# ---------------------------------------------------------------------------
# checkpoints


def _net_dict(net: Net) -> dict:
    return {
        "kind": net.kind,
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in net.params.items()},
    }


def _net_from(d: dict) -> Net:
    return Net(d["kind"], {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["params"].items()})


def save_model(model: Model, path: str | Path, spec: LossSpec | None = None, extra: dict | None = None) -> None:
    doc = {
        "format": "abstain_lab.model",
        "version": CHECKPOINT_VERSION,
        "n_classes": model.n_classes,
        "d": model.d,
        "constrained": model.constrained,
        "predictor": _net_dict(model.predictor),
        "rejector": _net_dict(model.rejector),
        "spec": None if spec is None else spec.to_dict(),
        "history": model.history,
        "extra": extra or {},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_model(path: str | Path) -> Model:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a JSON checkpoint ({exc})") from exc
    if doc.get("format") != "abstain_lab.model":
        raise ValueError(f"{path}: not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {doc.get('version')} is not {CHECKPOINT_VERSION}")
    model = Model(_net_from(doc["predictor"]), _net_from(doc["rejector"]), doc["n_classes"], doc["constrained"],
                  doc.get("history", {}))
    if model.d != doc["d"]:
        raise ValueError(f"{path}: stored dimension does not match the parameters")
    return model
