import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from abstain_lab.bounds import (
    CounterexampleGrid,
    CounterexampleParams,
    counterexample_experiment,
    gamma_binary,
    gamma_first_stage,
    gamma_single_stage,
    negative_result_demo,
    thread_cap,
    verify_second_stage_bound,
    verify_single_stage_bound,
    verify_two_stage_bound,
)
from abstain_lab.core import LossSpec, Phi
from abstain_lab.risk import FiniteDistribution, ScoreAssignment, Target, expected_calibration_gap

ADMISSIBLE = [LossSpec.admissible(k) for k in ("mae", "rho_margin", "constrained_hinge")]


class TestGamma:
    def test_examples(self):
        assert gamma_single_stage("mae", 0.04, 10) == pytest.approx(4.0)
        assert gamma_single_stage("rho_margin", 9.0, 3) == pytest.approx(9.0)
        assert gamma_binary("hinge", 0.3) == pytest.approx(0.3)
        assert gamma_binary("exponential", 0.5) == pytest.approx(1.0)
        for kind in ("mae", "rho_margin", "constrained_hinge"):
            assert gamma_single_stage(kind, 0.0, 4) == 0.0
        for phi in Phi:
            assert gamma_binary(phi, 0.0) == 0.0

    def test_negative_t(self):
        with pytest.raises(ValueError):
            gamma_single_stage("mae", -0.1, 3)
        with pytest.raises(ValueError):
            gamma_binary("hinge", -1e-3)
        with pytest.raises(ValueError):
            gamma_single_stage("logistic", 0.1, 3)

    def test_first_stage(self):
        assert gamma_first_stage("mae", 0.2, 5) == pytest.approx(1.0)
        with pytest.raises(ValueError):
            gamma_first_stage("logistic", 0.2, 5)

    @given(st.floats(0, 50), st.floats(0, 50), st.sampled_from([2, 3, 5, 10]))
    def test_monotone(self, a, b, n):
        lo, hi = sorted([a, b])
        for kind in ("mae", "rho_margin", "constrained_hinge"):
            assert gamma_single_stage(kind, lo, n) <= gamma_single_stage(kind, hi, n)
        for phi in Phi:
            assert gamma_binary(phi, lo) <= gamma_binary(phi, hi)


class TestHarnesses:
    @pytest.mark.parametrize("spec", ADMISSIBLE, ids=lambda s: s.inner.value)
    def test_single_stage_small(self, spec):
        rep = verify_single_stage_bound(spec, trials=800, seed=3)
        assert rep.violations == 0 and rep.trials == 800
        assert rep.max_slack >= -1e-9
        assert rep.worst_case["rhs"] - rep.worst_case["lhs"] == pytest.approx(rep.max_slack)
        assert verify_single_stage_bound(spec, trials=800, seed=3, falsify=True).violations > 0

    def test_single_stage_requires_admissible(self):
        with pytest.raises(ValueError):
            verify_single_stage_bound(LossSpec(inner="mae", psi="square"), trials=5)

    def test_zero_trials(self):
        with pytest.raises(ValueError):
            verify_single_stage_bound(ADMISSIBLE[0], trials=0)

    def test_deterministic_and_thread_independent(self, monkeypatch):
        a = verify_second_stage_bound("exponential", trials=200, seed=9)
        monkeypatch.setenv("ABSTAIN_LAB_THREADS", "3")
        assert thread_cap() == 3
        b = verify_second_stage_bound("exponential", trials=200, seed=9)
        assert a.to_dict() == b.to_dict()

    def test_bad_thread_env(self, monkeypatch):
        monkeypatch.setenv("ABSTAIN_LAB_THREADS", "many")
        with pytest.raises(ValueError):
            thread_cap()

    @pytest.mark.parametrize("phi", list(Phi))
    def test_second_and_two_stage_small(self, phi):
        assert verify_second_stage_bound(phi, trials=300, seed=1).violations == 0
        assert verify_two_stage_bound(phi, trials=300, seed=1).violations == 0
        assert verify_second_stage_bound(phi, trials=300, seed=1, falsify=True).violations > 0

    def test_pointwise_optimal_lhs_zero(self):
        rng = np.random.default_rng(0)
        d = FiniteDistribution.random(rng, 6, 3, cost=0.3)
        top = d.probs.argmax(axis=1)
        s = np.eye(3)[top] * 20.0
        r = 0.5 * np.log(d.costs / (1 - d.probs.max(axis=1)))
        asg = ScoreAssignment(s, r)
        assert expected_calibration_gap(d, asg, Target.ABSTENTION) == pytest.approx(0.0, abs=1e-12)

    def test_two_stage_only_mae(self):
        with pytest.raises(ValueError):
            verify_two_stage_bound("hinge", inner="rho_margin", trials=3)


class TestNegativeResult:
    def test_square_psi_has_witness(self):
        out = negative_result_demo(lattice_steps=10, costs=[0.2, 0.3, 0.4])
        assert out["found"]
        w = out["witnesses"][0]
        # the surrogate rejects although accepting is optimal
        assert w["surrogate_rejects"] and not w["abstention_rejects"]
        p, c = np.array(w["p"]), w["c"]
        assert c**2 < 1 - p.max() < c
        assert w["gap"] == pytest.approx(c - (1 - p.max()), abs=1e-9)

    def test_control_has_none(self):
        out = negative_result_demo(LossSpec.admissible("mae"), lattice_steps=10, costs=[0.2, 0.3, 0.4])
        assert not out["found"] and out["max_gap"] <= 1e-3

    def test_one_hot_never_witness(self):
        out = negative_result_demo(lattice_steps=1, costs=np.linspace(0.1, 0.45, 5))
        assert out["checked"] == 3 * 5
        assert not out["found"]


class TestCounterexample:
    def test_params_validation(self):
        with pytest.raises(ValueError):
            CounterexampleParams(c=0.5)
        with pytest.raises(ValueError):
            CounterexampleParams(w_abs=(1.0, 1.0))

    def test_small_run(self):
        params = CounterexampleParams(sample_count=4000, seed=5)
        out = counterexample_experiment(params, CounterexampleGrid(angle_step_deg=30, bias_steps=7))
        assert out["analytic_loss"] == pytest.approx(out["bayes_loss"])
        assert out["pr_best"] <= out["sb_best"]
        assert abs(out["bayes_loss"] - 0.1) < 0.02

    def test_grid_functions_unit_norm(self):
        f = CounterexampleGrid().functions()
        np.testing.assert_allclose(np.hypot(f[:, 0], f[:, 1]), 1.0)
        assert f.shape == (36 * 13, 3)
