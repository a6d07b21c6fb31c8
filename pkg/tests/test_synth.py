import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abstain_lab.synth import (
    CounterexampleParams,
    CsvFormatError,
    Dataset,
    gen_counterexample,
    gen_noisy_mixture,
    gen_realizable,
    load_csv,
    noisy_mixture_bayes_loss,
    noisy_mixture_posterior,
    write_csv,
)


class TestDataset:
    def test_validation(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 2)), [0, 1], 2)
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2)), [0, 2], 2)
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2)), [0, 1], 2, costs=[0.1, 1.2])

    def test_split_deterministic_and_disjoint(self):
        ds = gen_realizable(3, 4, 500, 0.2, seed=0)
        a1, b1 = ds.split(0.8, seed=3)
        a2, b2 = ds.split(0.8, seed=3)
        np.testing.assert_array_equal(a1.features, a2.features)
        assert a1.m == 400 and b1.m == 100
        rows = {tuple(r) for r in a1.features} | {tuple(r) for r in b1.features}
        assert len(rows) == 500


class TestCounterexample:
    def test_support_and_region_mass(self):
        ds = gen_counterexample(CounterexampleParams(sample_count=20_000, seed=1))
        assert np.all(np.linalg.norm(ds.features, axis=1) <= 1.0)
        frac = np.mean(ds.features[:, 1] <= 0)
        sigma = math.sqrt(0.25 / ds.m)
        assert abs(frac - 0.5) <= 3 * sigma

    def test_label_rule(self):
        ds = gen_counterexample(CounterexampleParams(sample_count=20_000, seed=2))
        x, y = ds.features, ds.labels
        clean = x[:, 1] > 0
        np.testing.assert_array_equal(y[clean], np.where(x[clean, 0] > 0, 0, 1))
        coin = y[~clean]
        assert abs(coin.mean() - 0.5) <= 3 * math.sqrt(0.25 / coin.size)

    @pytest.mark.parametrize("m", [10_000, 100_000])
    def test_monte_carlo_rate(self, m):
        # quadrant x1 > 0, x2 > 0 has mass 1/4 of the disk
        ds = gen_counterexample(CounterexampleParams(sample_count=m, seed=7))
        q = np.mean((ds.features[:, 0] > 0) & (ds.features[:, 1] > 0))
        assert abs(q - 0.25) <= 4 * math.sqrt(0.25 * 0.75 / m)

    def test_deterministic(self):
        p = CounterexampleParams(sample_count=100, seed=9)
        np.testing.assert_array_equal(gen_counterexample(p).labels, gen_counterexample(p).labels)


class TestRealizable:
    def test_margin_and_witness(self):
        ds = gen_realizable(3, 6, 800, 0.3, seed=5)
        w, b = np.array(ds.meta["hidden_weights"]), np.array(ds.meta["hidden_bias"])
        s = np.sort(ds.features @ w.T + b, axis=1)
        assert np.all(s[:, -1] - s[:, -2] >= 0.3)
        np.testing.assert_array_equal(np.argmax(ds.features @ w.T + b, axis=1), ds.labels)

    def test_all_classes(self):
        ds = gen_realizable(5, 3, 250, 0.2, seed=0)
        assert np.bincount(ds.labels, minlength=5).min() >= 1

    def test_bad_margin(self):
        with pytest.raises(ValueError):
            gen_realizable(3, 3, 10, 0.0)


class TestNoisyMixture:
    def test_noise_free_separable_blobs(self):
        ds = gen_noisy_mixture(3, 5, 3000, 0.4, 0.0, seed=0)
        p = noisy_mixture_posterior(ds.features, 3, 0.4, 0.0)
        # blob posteriors are near-deterministic; Bayes error is tiny
        assert np.mean(np.argmax(p, axis=1) != ds.labels) < 0.02

    def test_posterior_matches_frequencies(self):
        ds = gen_noisy_mixture(3, 5, 60_000, 0.5, 0.9, seed=1)
        inside = ds.features[:, 0] < 0.5
        p = noisy_mixture_posterior(ds.features, 3, 0.5, 0.9)
        # within the region the label agrees with the blob argmax with prob 0.1 + 0.9 / 3
        agree = np.argmax(p[inside], axis=1) == ds.labels[inside]
        assert abs(agree.mean() - p[inside].max(axis=1).mean()) < 0.01

    def test_region_zero_no_rejection(self):
        # Gaussian tails overlap at any separation; at 8 the overlap is below 1e-6
        out = noisy_mixture_bayes_loss(3, 5, 0.0, 0.9, c=0.1, separation=8.0, samples=20_000)
        assert out["bayes_rejection_ratio"] == 0.0
        with_region = noisy_mixture_bayes_loss(3, 5, 0.2, 0.9, c=0.1, separation=8.0, samples=20_000)
        assert with_region["bayes_rejection_ratio"] == pytest.approx(0.2, abs=0.01)

    def test_bayes_reference(self):
        out = noisy_mixture_bayes_loss(3, 5, 0.3, 0.9, c=0.2, samples=50_000)
        # region mass 0.3 rejected at cost 0.2, near-zero error elsewhere
        assert out["bayes_loss"] == pytest.approx(0.3 * 0.2, abs=0.005)
        assert out["bayes_rejection_ratio"] == pytest.approx(0.3, abs=0.01)

    def test_needs_enough_dims(self):
        with pytest.raises(ValueError):
            gen_noisy_mixture(3, 3, 10, 0.3, 0.5)


class TestCsv:
    def test_toy_round_trip(self, tmp_path):
        ds = Dataset(np.array([[0.1, -2.5], [1e-17, 3.0], [7.0, 1 / 3]]), [1, 0, 1], 2)
        path = tmp_path / "toy.csv"
        write_csv(ds, path)
        back = load_csv(path)
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.meta["cost_fallback"]

    @given(st.integers(0, 2**31), st.booleans())
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, seed, with_cost):
        import tempfile
        from pathlib import Path

        rng = np.random.default_rng(seed)
        m = int(rng.integers(3, 20))
        y = np.concatenate([np.arange(3), rng.integers(0, 3, m - 3)])
        costs = rng.uniform(0, 1, m) if with_cost else None
        ds = Dataset(rng.normal(size=(m, 3)) * 10.0 ** rng.integers(-5, 5), y, 3, costs)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "d.csv"
            write_csv(ds, path)
            back = load_csv(path)
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.labels, ds.labels)
        if with_cost:
            np.testing.assert_array_equal(back.costs, ds.costs)
        else:
            assert back.costs is None

    def test_string_labels(self, tmp_path):
        path = tmp_path / "pets.csv"
        path.write_text("w,h,label\n1,2,dog\n3,4,cat\n5,6,dog\n")
        ds = load_csv(path)
        assert ds.n_classes == 2 and ds.label_names == ["cat", "dog"]
        np.testing.assert_array_equal(ds.labels, [1, 0, 1])

    def test_numeric_labels_in_numeric_order(self, tmp_path):
        path = tmp_path / "n.csv"
        path.write_text("x,label\n1,10\n2,9\n3,2\n")
        assert load_csv(path).label_names == ["2", "9", "10"]

    def test_errors(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,label\n1,a\nfoo,b\n")
        with pytest.raises(CsvFormatError, match="row 3"):
            load_csv(path)
        path.write_text("x,y\n1,2\n")
        with pytest.raises(CsvFormatError):
            load_csv(path)
        path.write_text("x,label\n1,a\n2,z\n")
        with pytest.raises(CsvFormatError, match="not in the declared"):
            load_csv(path, label_names=["a", "b"])
        path.write_text("x,label\n1,a,3\n")
        with pytest.raises(CsvFormatError):
            load_csv(path)
        path.write_text("")
        with pytest.raises(CsvFormatError):
            load_csv(path)
