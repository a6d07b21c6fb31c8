import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abstain_lab.core import InnerLoss, LossSpec, Phi, abstention_loss, single_stage_surrogate
from abstain_lab.risk import (
    FiniteDistribution,
    GridSpec,
    HypothesisClass,
    ScoreAssignment,
    Target,
    abstention_calibration_gap,
    best_abstention_risk,
    best_inner_risk,
    best_second_stage_risk,
    best_single_stage_risk_bruteforce,
    best_single_stage_risk_closed_form,
    conditional_risk,
    expected_calibration_gap,
    golden_section_minimize,
    minimizability_gap,
    second_stage_conditional_risk,
)

ADMISSIBLE = [LossSpec.admissible(k) for k in ("mae", "rho_margin", "constrained_hinge")]


def enumerate_abstention(p, c):
    # accept each label in turn, or reject
    return min([1.0 - pi for pi in p] + [c])


def direct_conditional_risk(loss_fn, p, *args):
    return sum(p[y] * loss_fn(y, *args) for y in range(len(p)))


@st.composite
def prob_and_cost(draw, n_values=(2, 3, 5, 10)):
    n = draw(st.sampled_from(n_values))
    raw = draw(st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n))
    raw = np.array(raw) + 1e-3
    c = draw(st.floats(0.0, 1.0))
    return raw / raw.sum(), c


class TestDistributionTypes:
    def test_valid(self):
        d = FiniteDistribution([0.5, 0.5], [[0.2, 0.8], [1.0, 0.0]], 0.3)
        assert d.size == 2 and d.n_classes == 2
        np.testing.assert_array_equal(d.costs, [0.3, 0.3])

    @pytest.mark.parametrize(
        "weights, probs, costs",
        [
            ([0.5, 0.6], [[0.5, 0.5], [0.5, 0.5]], 0.1),
            ([1.0], [[0.6, 0.6]], 0.1),
            ([1.0], [[1.2, -0.2]], 0.1),
            ([1.0], [[0.5, 0.5]], 1.5),
            ([1.0], [[1.0]], 0.1),
        ],
    )
    def test_invalid(self, weights, probs, costs):
        with pytest.raises(ValueError):
            FiniteDistribution(weights, probs, costs)

    def test_assignment_alignment(self):
        with pytest.raises(ValueError):
            ScoreAssignment(np.zeros((3, 2)), np.zeros(2))
        d = FiniteDistribution([1.0], [[0.5, 0.5]], 0.1)
        with pytest.raises(ValueError):
            expected_calibration_gap(d, ScoreAssignment(np.zeros((1, 3)), [0.0]), Target.ABSTENTION)

    @pytest.mark.parametrize("kw", [dict(score_range=(1, 1)), dict(r_steps=1), dict(score_steps=1)])
    def test_grid_invalid(self, kw):
        with pytest.raises(ValueError):
            GridSpec(**kw)


class TestConditionalRisk:
    def test_reject(self):
        assert conditional_risk(Target.ABSTENTION, [0.3, 0.7], [1.0, 0.0], 0.0, 0.2) == pytest.approx(0.2)

    def test_accept(self):
        assert conditional_risk(Target.ABSTENTION, [0.3, 0.7], [1.0, 0.0], 0.5, 0.2) == pytest.approx(0.7)

    def test_mae_single_stage_example(self):
        spec = LossSpec.admissible("mae")
        assert conditional_risk(spec, [0.5, 0.5], [0.0, 0.0], 0.0, 0.25) == pytest.approx(0.75)

    @given(prob_and_cost(n_values=(2, 3, 5)), st.integers(0, 2**31))
    @settings(max_examples=60, deadline=None)
    def test_matches_direct_summation(self, pc, seed):
        p, c = pc
        rng = np.random.default_rng(seed)
        s = rng.uniform(-3, 3, len(p))
        r = rng.uniform(-2, 2)
        spec = LossSpec(inner="rho_margin", rho=0.7, alpha=1.3, beta=0.6)
        direct = direct_conditional_risk(lambda y: float(single_stage_surrogate(spec, s, r, y, c)), p)
        assert conditional_risk(spec, p, s, r, c) == pytest.approx(direct, rel=1e-12, abs=1e-12)
        direct = direct_conditional_risk(lambda y: float(abstention_loss(s, r, y, c)), p)
        assert conditional_risk(Target.ABSTENTION, p, s, r, c) == pytest.approx(direct, abs=1e-12)


class TestBestAbstentionRisk:
    @pytest.mark.parametrize("p, c, expected", [([0.7, 0.3], 0.2, 0.2), ([0.4, 0.6], 0.0, 0.0), ([1.0, 0.0], 0.9, 0.0)])
    def test_examples(self, p, c, expected):
        assert best_abstention_risk(p, c) == pytest.approx(expected, abs=1e-15)

    @given(prob_and_cost())
    @settings(max_examples=200, deadline=None)
    def test_enumeration(self, pc):
        p, c = pc
        assert abs(best_abstention_risk(p, c) - enumerate_abstention(p, c)) <= 1e-12

    @given(prob_and_cost(), st.floats(0, 1), st.randoms())
    @settings(max_examples=100, deadline=None)
    def test_monotone_and_symmetric(self, pc, c2, rnd):
        p, c = pc
        lo, hi = sorted([c, c2])
        assert best_abstention_risk(p, lo) <= best_abstention_risk(p, hi)
        perm = list(range(len(p)))
        rnd.shuffle(perm)
        assert best_abstention_risk(p[perm], c) == best_abstention_risk(p, c)


class TestAbstentionGap:
    def test_examples(self):
        assert abstention_calibration_gap([0.9, 0.1], 0.3, [1.0, 0.0], 1.0) == 0.0
        assert abstention_calibration_gap([0.9, 0.1], 0.2, [1.0, 0.0], 0.0) == pytest.approx(0.1)
        assert abstention_calibration_gap([0.5, 0.5], 0.2, [1.0, 0.0], -1.0) == 0.0

    @given(prob_and_cost(), st.integers(0, 2**31))
    @settings(max_examples=150, deadline=None)
    def test_equals_risk_difference(self, pc, seed):
        p, c = pc
        rng = np.random.default_rng(seed)
        s = rng.normal(size=len(p))
        r = rng.choice([-1.0, 0.0, 1.0])
        gap = abstention_calibration_gap(p, c, s, r)
        diff = conditional_risk(Target.ABSTENTION, p, s, r, c) - enumerate_abstention(p, c)
        assert gap >= 0
        assert gap == pytest.approx(diff, abs=1e-12)


class TestSingleStageBest:
    def test_examples(self):
        mae = LossSpec.admissible("mae")
        hinge = LossSpec.admissible("constrained_hinge")
        assert best_single_stage_risk_closed_form(mae, [0.75, 0.25], 0.25) == pytest.approx(0.5)
        assert best_single_stage_risk_closed_form(hinge, [0.75, 0.2, 0.05], 0.25) == pytest.approx(1.5)
        for spec in ADMISSIBLE:
            assert best_single_stage_risk_closed_form(spec, [1.0, 0.0, 0.0], 0.7) == 0.0

    def test_rejects_non_admissible(self):
        with pytest.raises(ValueError):
            best_single_stage_risk_closed_form(LossSpec(inner="mae", psi="square"), [0.5, 0.5], 0.2)
        with pytest.raises(ValueError):
            best_single_stage_risk_closed_form(LossSpec(inner="mae", alpha=1.0, beta=2.0), [0.5, 0.5], 0.2)

    def test_oracle_examples(self):
        mae = LossSpec.admissible("mae")
        assert best_single_stage_risk_bruteforce(mae, [0.75, 0.25], 0.25).value == pytest.approx(0.5, abs=1e-3)
        hinge = LossSpec.admissible("constrained_hinge")
        assert best_single_stage_risk_bruteforce(hinge, [0.75, 0.2, 0.05], 0.25, n=3).value == pytest.approx(
            1.5, abs=1e-3
        )

    @pytest.mark.parametrize("spec", ADMISSIBLE, ids=lambda s: s.inner.value)
    @pytest.mark.parametrize("n", [2, 3, 5, 10])
    def test_one_hot(self, spec, n):
        assert best_single_stage_risk_bruteforce(spec, np.eye(n)[0], 0.4).value <= 1e-3

    @pytest.mark.parametrize("spec", ADMISSIBLE, ids=lambda s: s.inner.value)
    def test_coarse_grid_never_undershoots(self, spec):
        grid = GridSpec(score_steps=2, r_steps=2)
        rng = np.random.default_rng(3)
        for _ in range(20):
            p = rng.dirichlet(np.ones(3))
            c = rng.uniform()
            out = best_single_stage_risk_bruteforce(spec, p, c, grid=grid)
            assert out.value >= best_single_stage_risk_closed_form(spec, p, c) - 1e-12

    @pytest.mark.parametrize("spec", ADMISSIBLE, ids=lambda s: s.inner.value)
    @given(pc=prob_and_cost(), rho=st.sampled_from([0.5, 0.7, 1.0, 2.0]))
    @settings(max_examples=25, deadline=None)
    def test_closed_form_matches_oracle(self, spec, pc, rho):
        p, c = pc
        spec = LossSpec.admissible(spec.inner, rho=rho)
        out = best_single_stage_risk_bruteforce(spec, p, c)
        assert abs(out.value - best_single_stage_risk_closed_form(spec, p, c)) <= 1e-3
        assert abs(out.joint_grid - out.reduced) <= 1e-3

    def test_unequal_exponents_use_joint_grid(self):
        spec = LossSpec(inner="mae", alpha=2.0, beta=1.0)
        out = best_single_stage_risk_bruteforce(spec, [0.6, 0.4], 0.3)
        assert math.isinf(out.reduced)
        # analytic minimum of A e^{2r} + B e^{-r}: r* = ln(B / 2A) / 3
        a, b = 0.4, 0.3
        r = math.log(b / (2 * a)) / 3
        assert out.value == pytest.approx(a * math.exp(2 * r) + b * math.exp(-r), abs=1e-3)


class TestInnerBest:
    def test_logistic_is_entropy(self):
        p = np.array([0.2, 0.3, 0.5])
        scores = np.log(p)
        risk = float((p * -np.log(p)).sum())
        assert best_inner_risk(InnerLoss.LOGISTIC, p) == pytest.approx(risk)
        from abstain_lab.risk import inner_conditional_risk

        assert inner_conditional_risk(InnerLoss.LOGISTIC, p, scores) == pytest.approx(risk)


class TestSecondStage:
    def test_exponential_example(self):
        out = best_second_stage_risk(Phi.EXPONENTIAL, 0.04, 0.25)
        assert out.surrogate == pytest.approx(0.2)
        assert out.target == pytest.approx(0.04)

    def test_zero_error(self):
        for phi in Phi:
            assert best_second_stage_risk(phi, 0.0, 0.3).target == 0.0

    @pytest.mark.parametrize("phi", list(Phi))
    def test_golden_section_vs_dense_grid(self, phi):
        rs = np.linspace(-20, 20, 400_001)
        for q, c in [(0.3, 0.3), (0.1, 0.4), (0.6, 0.05), (0.0, 0.2), (0.5, 0.0)]:
            grid_min = second_stage_conditional_risk(phi, q, rs, c).min()
            got = best_second_stage_risk(phi, q, c).surrogate
            assert got <= grid_min + 1e-9
            assert got == pytest.approx(grid_min, abs=1e-6)

    def test_closed_forms(self):
        q = np.linspace(0, 1, 51)
        c = 0.35
        hinge = best_second_stage_risk(Phi.HINGE, q, np.full_like(q, c)).surrogate
        np.testing.assert_allclose(hinge, 2 * np.minimum(q, c), atol=1e-9)
        with np.errstate(divide="ignore", invalid="ignore"):
            ref = np.where(q > 0, q * np.log2(1 + c / q) + c * np.log2(1 + q / c), 0.0)
        logi = best_second_stage_risk(Phi.LOGISTIC, q, np.full_like(q, c)).surrogate
        np.testing.assert_allclose(logi, ref, atol=1e-9)

    def test_golden_section_vectorised(self):
        centers = np.array([-2.0, 0.5, 3.0])
        x, f = golden_section_minimize(lambda t: (t - centers) ** 2, np.full(3, -10.0), np.full(3, 10.0))
        np.testing.assert_allclose(x, centers, atol=1e-8)
        assert np.all(f < 1e-15)

    def test_bad_q(self):
        with pytest.raises(ValueError):
            best_second_stage_risk(Phi.HINGE, 1.5, 0.2)


def random_dist(rng, m, n):
    return FiniteDistribution.random(rng, m, n, cost=(0.05, 0.5))


class TestExpectedGap:
    def test_pointwise_optimal_is_zero(self):
        rng = np.random.default_rng(0)
        d = random_dist(rng, 8, 4)
        scores = d.probs.copy()
        r = np.where(d.probs.max(axis=1) >= 1 - d.costs, 1.0, -1.0)
        asg = ScoreAssignment(scores, r)
        assert expected_calibration_gap(d, asg, Target.ABSTENTION) == pytest.approx(0.0, abs=1e-15)
        spec = LossSpec.admissible("rho_margin")
        # margin optimum: top score rho above the rest; r = log(sqrt(psi / A)) with A = 1 - max p
        s = np.zeros_like(d.probs)
        s[np.arange(d.size), d.probs.argmax(axis=1)] = 1.0
        a = 1 - d.probs.max(axis=1)
        asg = ScoreAssignment(s, 0.5 * np.log(d.costs / a))
        assert expected_calibration_gap(d, asg, spec) == pytest.approx(0.0, abs=1e-12)

    def test_single_point(self):
        d = FiniteDistribution([1.0], [[0.9, 0.1]], 0.2)
        asg = ScoreAssignment([[1.0, 0.0]], [0.0])
        assert expected_calibration_gap(d, asg, Target.ABSTENTION) == pytest.approx(0.1)

    @pytest.mark.parametrize("loss", [Target.ABSTENTION, *ADMISSIBLE], ids=str)
    def test_matches_independent_summation(self, loss):
        rng = np.random.default_rng(11)
        d = random_dist(rng, 10, 3)
        s = rng.uniform(-3, 3, (10, 3))
        if isinstance(loss, LossSpec) and loss.inner is InnerLoss.CONSTRAINED_HINGE:
            s -= s.mean(axis=1, keepdims=True)
        r = rng.uniform(-2, 2, 10)
        total = 0.0
        for i in range(10):
            p, c = d.probs[i], d.costs[i]
            if loss is Target.ABSTENTION:
                risk = sum(p[y] * float(abstention_loss(s[i], r[i], y, c)) for y in range(3))
                best = enumerate_abstention(p, c)
            else:
                risk = sum(p[y] * float(single_stage_surrogate(loss, s[i], r[i], y, c)) for y in range(3))
                best = best_single_stage_risk_bruteforce(loss, p, c).value
            total += d.weights[i] * (risk - best)
        got = expected_calibration_gap(d, ScoreAssignment(s, r), loss)
        assert got == pytest.approx(total, abs=2e-3)

    def test_two_stage_target(self):
        d = FiniteDistribution([0.5, 0.5], [[0.9, 0.1], [0.5, 0.5]], 0.2)
        asg = ScoreAssignment([[1.0, 0.0], [1.0, 0.0]], [-1.0, 1.0])
        # point 1: rejects (0.2) vs best 0.1; point 2: accepts (0.5) vs best 0.2
        assert expected_calibration_gap(d, asg, Target.TWO_STAGE_ABSTENTION) == pytest.approx(0.5 * 0.1 + 0.5 * 0.3)

    @given(st.integers(0, 2**31))
    @settings(max_examples=40, deadline=None)
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        d = random_dist(rng, 5, 3)
        asg = ScoreAssignment(rng.normal(size=(5, 3)), rng.normal(size=5))
        for loss in (Target.ABSTENTION, Target.TWO_STAGE_ABSTENTION, LossSpec.admissible("mae")):
            assert expected_calibration_gap(d, asg, loss) >= -1e-12


class TestMinimizabilityGap:
    def test_unrestricted(self):
        d = random_dist(np.random.default_rng(1), 6, 3)
        for loss in (Target.ABSTENTION, LossSpec.admissible("mae")):
            out = minimizability_gap(d, loss, HypothesisClass.UNRESTRICTED)
            assert out.value == 0.0 and not out.is_estimate

    def test_constant_rejector_conflict(self):
        # point 1 wants to accept (error 0), point 2 wants to reject (error 0.5 > c)
        d = FiniteDistribution([0.5, 0.5], [[1.0, 0.0], [0.5, 0.5]], 0.2)
        out = minimizability_gap(d, Target.ABSTENTION, HypothesisClass.CONSTANT_REJECTOR)
        # exhaustive: accept-all 0.25, reject-all 0.2; pointwise 0.1
        assert out.value == pytest.approx(0.1)
        assert out.is_estimate
        sur = minimizability_gap(d, LossSpec.admissible("mae"), HypothesisClass.CONSTANT_REJECTOR)
        # pointwise 0.5 * 2 sqrt(0.2 * 0.5); constant r: 2 sqrt(0.25 * 0.2)
        assert sur.value == pytest.approx(2 * math.sqrt(0.05) - math.sqrt(0.1), abs=1e-4)

    def test_single_point_constant_rejector(self):
        d = FiniteDistribution([1.0], [[0.7, 0.3]], 0.2)
        out = minimizability_gap(d, Target.ABSTENTION, HypothesisClass.CONSTANT_REJECTOR)
        assert out.value == pytest.approx(0.0, abs=1e-15)
        out = minimizability_gap(d, LossSpec.admissible("mae"), HypothesisClass.CONSTANT_REJECTOR)
        assert out.value == pytest.approx(0.0, abs=1e-4)

    def test_linear_class(self):
        rng = np.random.default_rng(2)
        d = FiniteDistribution.random(rng, 4, 2, cost=0.3, n_features=2)
        out = minimizability_gap(d, Target.ABSTENTION, HypothesisClass.LINEAR_OVER_FEATURES, n_candidates=500)
        assert out.value >= 0 and out.is_estimate
        with pytest.raises(ValueError):
            minimizability_gap(random_dist(rng, 3, 2), Target.ABSTENTION, HypothesisClass.LINEAR_OVER_FEATURES)
