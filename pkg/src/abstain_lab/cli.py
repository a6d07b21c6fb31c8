"""Command-line front end: ``abstain-lab <command> [options]``.

Exit codes: 0 pass, 1 a check failed (violations, missed threshold,
divergence), 2 configuration or input error. Every command prints a JSON
report (schema version "1") and can also write it to ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from . import learn
from .bounds import (
    CounterexampleGrid,
    counterexample_experiment,
    verify_second_stage_bound,
    verify_single_stage_bound,
    verify_two_stage_bound,
)
from .core import InnerLoss, LossSpec, Phi
from .learn import Stage, TrainConfig, TrainingDivergedError
from .synth import CounterexampleParams, CsvFormatError, gen_counterexample, gen_noisy_mixture, gen_realizable, load_csv

SCHEMA_VERSION = "1"
EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
GRADCHECK_TOL = 1e-5

SINGLE_LOSSES = ("mae", "rho_margin", "constrained_hinge")
PHIS = tuple(p.value for p in Phi)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# reports


def make_report(command: str, config: dict, results: dict, passed: bool, started: float) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": config,
        "results": results,
        "passed": passed,
        "duration_s": time.perf_counter() - started,
        "seed": config.get("seed"),
    }


def write_json_atomic(doc: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name, suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, indent=2, default=_json_default)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file with option values (flags override it)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the JSON report here")


def _data_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("dataset")
    g.add_argument("--data", choices=["realizable", "noisy_mixture", "counterexample", "csv"], default="realizable")
    g.add_argument("--csv", help="CSV path when --data csv")
    g.add_argument("--label-column", default="label")
    g.add_argument("--cost-column", default="cost")
    g.add_argument("--n-classes", type=int, default=3)
    g.add_argument("--dim", type=int, default=10)
    g.add_argument("--samples", type=int, default=5000)
    g.add_argument("--margin", type=float, default=0.2, help="realizable margin")
    g.add_argument("--noise-fraction", type=float, default=0.3)
    g.add_argument("--noise-level", type=float, default=0.9)
    g.add_argument("--data-seed", type=int, help="dataset seed (defaults to --seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abstain-lab", description="Learning with abstention: bounds, demos, training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-bounds", help="randomized consistency-bound checks")
    _common(p)
    p.add_argument("--theorem", type=int, choices=[2, 3, 4], default=2,
                   help="2: single-stage, 3: second stage with a fixed predictor, 4: two-stage")
    p.add_argument("--loss", choices=[*SINGLE_LOSSES, "all"], default="all")
    p.add_argument("--phi", choices=[*PHIS, "all"], default="all")
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--falsify", action="store_true", help="shrink Gamma by 10n; passes iff violations appear")

    p = sub.add_parser("counterexample", help="predictor-rejector vs score-based on the disk example")
    _common(p)
    p.add_argument("--cost", type=float, default=0.2)
    p.add_argument("--samples", type=int, default=50_000)
    p.add_argument("--angle-step", type=float, default=10.0)
    p.add_argument("--bias-steps", type=int, default=13)
    p.add_argument("--tol", type=float, default=0.01, help="allowed excess of pr_best over the Bayes loss")
    p.add_argument("--min-gap", type=float, default=0.02, help="required sb_best - pr_best")

    p = sub.add_parser("train", help="train a predictor and rejector")
    _common(p)
    _data_args(p)
    p.add_argument("--stage", choices=["single", "two"], default="two")
    p.add_argument("--inner", default=None, help="single: mae|rho_margin|constrained_hinge; two: stage-1 loss")
    p.add_argument("--phi", choices=PHIS, default="exponential")
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--cost", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--model", choices=["linear", "mlp"], default="linear")
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--checkpoint", default="model.json")
    p.add_argument("--threshold", type=float, help="fail if held-out abstention loss exceeds this")

    p = sub.add_parser("gradcheck", help="backprop vs central finite differences")
    _common(p)
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--inject-sign-flip", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoint", required=False)
    p.add_argument("--cost", type=float, default=0.1)
    p.add_argument("--dump", help="write per-example decisions to this CSV")
    return parser


def _load_toml(path: str, command: str) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    flat = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    section = doc.get(command, doc.get(command.replace("-", "_"), {}))
    if not isinstance(section, dict):
        raise ConfigError(f"[{command}] in {path} must be a table")
    flat.update(section)
    return {k.replace("-", "_"): v for k, v in flat.items()}


def parse_config(argv: list[str] | None) -> argparse.Namespace:
    """Flags override the TOML file, which overrides defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = _load_toml(args.config, args.command)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known - {"config", "command"})
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {unknown}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def _echo(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("out",)}


# ---------------------------------------------------------------------------
# commands


def cmd_verify_bounds(args) -> tuple[dict, bool]:
    if args.trials < 1:
        raise ConfigError("--trials must be a positive integer")
    if args.rho <= 0:
        raise ConfigError("--rho must be positive")
    reports = []
    if args.theorem == 2:
        losses = SINGLE_LOSSES if args.loss == "all" else (args.loss,)
        for name in losses:
            spec = LossSpec.admissible(name, rho=args.rho)
            reports.append(verify_single_stage_bound(spec, args.trials, args.seed, args.falsify))
    else:
        phis = PHIS if args.phi == "all" else (args.phi,)
        fn = verify_second_stage_bound if args.theorem == 3 else verify_two_stage_bound
        for phi in phis:
            reports.append(fn(phi, trials=args.trials, seed=args.seed, falsify=args.falsify))
    if args.falsify:
        passed = all(r.violations > 0 for r in reports)
    else:
        passed = all(r.violations == 0 for r in reports)
    return {"reports": [r.to_dict() for r in reports]}, passed


def cmd_counterexample(args) -> tuple[dict, bool]:
    try:
        params = CounterexampleParams(c=args.cost, sample_count=args.samples, seed=args.seed)
        grid = CounterexampleGrid(angle_step_deg=args.angle_step, bias_steps=args.bias_steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.angle_step <= 0 or args.bias_steps < 1:
        raise ConfigError("grid resolution must be positive")
    out = counterexample_experiment(params, grid)
    passed = out["pr_best"] <= out["bayes_loss"] + args.tol and out["gap"] > args.min_gap
    return out, passed


def resolve_dataset(args):
    seed = args.seed if args.data_seed is None else args.data_seed
    try:
        if args.data == "csv":
            if not args.csv:
                raise ConfigError("--data csv needs --csv PATH")
            return load_csv(args.csv, label_column=args.label_column, cost_column=args.cost_column)
        if args.data == "realizable":
            return gen_realizable(args.n_classes, args.dim, args.samples, args.margin, seed)
        if args.data == "noisy_mixture":
            return gen_noisy_mixture(args.n_classes, args.dim, args.samples, args.noise_fraction, args.noise_level, seed)
        return gen_counterexample(CounterexampleParams(sample_count=args.samples, seed=seed))
    except (OSError, CsvFormatError) as exc:
        raise ConfigError(f"dataset: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"dataset: {exc}") from exc


def _train_configs(args):
    common = dict(cost=args.cost, epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                  momentum=args.momentum, seed=args.seed)
    try:
        if args.stage == "single":
            inner = args.inner or "mae"
            if inner not in SINGLE_LOSSES:
                raise ConfigError(f"--inner {inner} is not a single-stage loss; choose from {list(SINGLE_LOSSES)}")
            spec = LossSpec.admissible(inner, rho=args.rho, alpha=args.alpha)
            return [TrainConfig(spec, stage=Stage.SINGLE_STAGE, **common)]
        inner = args.inner or "logistic"
        if inner not in {k.value for k in InnerLoss} - {"zero_one"}:
            raise ConfigError(f"--inner {inner} is not a usable stage-1 loss")
        c1 = TrainConfig(LossSpec(inner=inner, rho=args.rho), stage=Stage.TWO_STAGE_STAGE1, **common)
        c2 = TrainConfig(LossSpec(family="two_stage", phi=args.phi), stage=Stage.TWO_STAGE_STAGE2, **common)
        return [c1, c2]
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args) -> tuple[dict, bool]:
    configs = _train_configs(args)
    ds = resolve_dataset(args)
    train_set, test_set = ds.split(0.8, seed=args.seed)
    hinge = configs[0].loss.inner is InnerLoss.CONSTRAINED_HINGE
    model = learn.init_model(ds.n_classes, ds.d, args.model, args.hidden, constrained=hinge, seed=args.seed)
    try:
        if len(configs) == 1:
            model = learn.train_single_stage(train_set, configs[0], model=model)
        else:
            model = learn.train_two_stage(train_set, configs[0], configs[1], model=model)
    except TrainingDivergedError as exc:
        return {"error": str(exc)}, False
    held_out = learn.evaluate(model, test_set, args.cost)
    scores, _ = learn.forward(model, test_set.features)
    stage1_error = float(np.mean(np.argmax(scores, axis=1) != test_set.labels))
    learn.save_model(model, args.checkpoint, spec=configs[-1].loss,
                     extra={"train_configs": [c.to_dict() for c in configs]})
    results = {
        "held_out": held_out.to_dict(),
        "train": learn.evaluate(model, train_set, args.cost).to_dict(),
        "predictor_zero_one_error": stage1_error,
        "final_objectives": {k: (v[-1] if v else None) for k, v in model.history.items()},
        "checkpoint": str(args.checkpoint),
        "train_configs": [c.to_dict() for c in configs],
        "split": {"train": train_set.m, "test": test_set.m},
    }
    passed = args.threshold is None or held_out.abstention_loss <= args.threshold
    return results, passed


GRADCHECK_CASES = [
    ("single_stage/mae", LossSpec.admissible("mae"), Stage.SINGLE_STAGE),
    ("single_stage/rho_margin", LossSpec.admissible("rho_margin", rho=0.5), Stage.SINGLE_STAGE),
    ("single_stage/constrained_hinge", LossSpec.admissible("constrained_hinge", rho=0.5), Stage.SINGLE_STAGE),
    ("stage1/logistic", LossSpec(inner="logistic"), Stage.TWO_STAGE_STAGE1),
    ("stage1/mae", LossSpec(inner="mae"), Stage.TWO_STAGE_STAGE1),
    ("stage2/exponential", LossSpec(family="two_stage", phi="exponential"), Stage.TWO_STAGE_STAGE2),
    ("stage2/logistic", LossSpec(family="two_stage", phi="logistic"), Stage.TWO_STAGE_STAGE2),
    ("stage2/hinge", LossSpec(family="two_stage", phi="hinge"), Stage.TWO_STAGE_STAGE2),
]


def run_gradcheck(points: int = 100, seed: int = 0, hidden: int = 8, n: int = 4, d: int = 5) -> dict:
    """Per-case max relative error over ``points`` kink-free random points."""
    results = {}
    for name, spec, stage in GRADCHECK_CASES:
        for kind in ("linear", "mlp"):
            constrained = stage is Stage.SINGLE_STAGE and spec.inner is InnerLoss.CONSTRAINED_HINGE
            model = learn.init_model(n, d, kind, hidden, constrained=constrained, seed=seed)
            rng = np.random.default_rng([seed, len(results)])
            x = np.empty((0, d))
            y = np.empty(0, dtype=int)
            while len(y) < points:
                xb = rng.normal(size=(4 * points, d))
                yb = rng.integers(0, n, 4 * points)
                keep = learn.kink_free_mask(model, xb, yb, spec, stage=stage)
                x, y = np.vstack([x, xb[keep]]), np.concatenate([y, yb[keep]])
            res = learn.gradient_check(model, x[:points], y[:points], spec, cost=0.3, stage=stage)
            results[f"{name}/{kind}"] = {"max_rel_error": res.max_rel_error, "points": res.points,
                                         "per_parameter": res.per_parameter}
    return results


def cmd_gradcheck(args) -> tuple[dict, bool]:
    if args.points < 1:
        raise ConfigError("--points must be positive")
    original = learn._grads
    if args.inject_sign_flip:
        learn._grads = lambda *a: {k: -v for k, v in original(*a).items()}
    try:
        per_case = run_gradcheck(args.points, args.seed, args.hidden)
    finally:
        learn._grads = original
    worst = max(v["max_rel_error"] for v in per_case.values())
    return {"per_case": per_case, "max_rel_error": worst, "tolerance": GRADCHECK_TOL}, worst <= GRADCHECK_TOL


def cmd_eval(args) -> tuple[dict, bool]:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    try:
        model = learn.load_model(args.checkpoint)
    except OSError as exc:
        raise ConfigError(f"checkpoint: {exc}") from exc
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"checkpoint: {exc}") from exc
    ds = resolve_dataset(args)
    if ds.d != model.d or ds.n_classes != model.n_classes:
        raise ConfigError(
            f"checkpoint expects d={model.d}, n={model.n_classes}; dataset has d={ds.d}, n={ds.n_classes}"
        )
    metrics = learn.evaluate(model, ds, None if ds.costs is not None else args.cost)
    results = {"metrics": metrics.to_dict()}
    if args.dump:
        scores, r = learn.forward(model, ds.features)
        decisions = learn.predict(model, ds.features)
        cost = ds.cost_vector(args.cost)
        with open(args.dump, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "label", "decision", "rejector", "cost", "loss"]
                       + [f"score_{k}" for k in range(ds.n_classes)])
            for i in range(ds.m):
                loss = cost[i] if decisions[i] == learn.ABSTAIN else float(decisions[i] != ds.labels[i])
                w.writerow([i, int(ds.labels[i]), int(decisions[i]), repr(float(r[i])), repr(float(cost[i])),
                            repr(float(loss))] + [repr(float(v)) for v in scores[i]])
        results["dump"] = {"path": str(args.dump), "rows": ds.m}
    return results, True


COMMANDS = {
    "verify-bounds": cmd_verify_bounds,
    "counterexample": cmd_counterexample,
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    started = time.perf_counter()
    try:
        args = parse_config(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # argparse usage errors
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_PASS
    try:
        results, passed = COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = make_report(args.command, _echo(args), results, passed, started)
    text = json.dumps(report, indent=2, default=_json_default)
    print(text)
    if args.out:
        write_json_atomic(report, args.out)
    return EXIT_PASS if passed else EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
