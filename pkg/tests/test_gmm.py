import math

import numpy as np
import pytest

from needleplan import gmm
from needleplan.errors import (
    DegenerateWeightsError, InsufficientDataError, InvalidArgumentError, ParseError,
)
from needleplan.gmm import (
    FitConfig, Gaussian, GmmModel, fit_em, fit_weighted_gaussian, fit_weighted_gmm,
    load_model, log_pdf, model_from_dict, model_to_dict, regularize, save_model,
)


def random_model(rng, d=2, k=3):
    comps = []
    for _ in range(k):
        a = rng.normal(size=(d, d))
        comps.append(Gaussian(rng.normal(size=d), a @ a.T + 0.5 * np.eye(d)))
    w = rng.uniform(0.2, 1.0, k)
    return GmmModel(comps, w / w.sum())


def naive_density(model, x):
    """Direct linear-space summation oracle (no log-sum-exp)."""
    total = 0.0
    for w, c in zip(model.weights, model.components):
        d = c.dim
        diff = x - c.mean
        inv = np.linalg.inv(c.cov)
        q = diff @ inv @ diff
        total += w * math.exp(-0.5 * q) / math.sqrt((2 * math.pi) ** d * np.linalg.det(c.cov))
    return total


class TestLogPdf:
    def test_standard_normal_at_mode(self):
        m = GmmModel([Gaussian([0.0], [[1.0]])], [1.0])
        assert log_pdf(m, [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_mixture_collapse(self, rng):
        g = Gaussian(rng.normal(size=3), np.eye(3) * 1.7)
        one = GmmModel([g], [1.0])
        two = GmmModel([g, Gaussian(g.mean, g.cov)], [0.5, 0.5])
        for _ in range(20):
            x = rng.normal(size=3) * 3
            assert two.log_pdf(x) == pytest.approx(one.log_pdf(x), abs=1e-12)

    def test_matches_direct_summation_oracle(self, rng):
        for _ in range(25):
            m = random_model(rng, d=2, k=3)
            x = rng.normal(size=2) * 2
            expected = math.log(naive_density(m, x))
            assert m.log_pdf(x) == pytest.approx(expected, abs=1e-9)

    def test_dimension_mismatch(self, rng):
        m = random_model(rng, d=2)
        with pytest.raises(InvalidArgumentError):
            m.log_pdf([1.0, 2.0, 3.0])

    def test_finite_far_from_mode(self):
        m = GmmModel([Gaussian([0.0, 0.0], np.eye(2) * 1e-4)], [1.0])
        assert np.isfinite(m.log_pdf([50.0, -80.0]))


class TestFitEm:
    def test_identical_samples_k1(self):
        X = np.tile([1.5, -2.0], (20, 1))
        m = fit_em(X, FitConfig(k=1, cov_floor=1e-6, seed=0))
        assert np.allclose(m.components[0].mean, [1.5, -2.0], atol=1e-12)
        assert np.allclose(m.components[0].cov, 1e-6 * np.eye(2), atol=1e-12)

    def test_two_separated_clusters(self, rng):
        a = rng.normal(-10.0, 0.5, 300)
        b = rng.normal(10.0, 0.5, 300)
        X = np.concatenate([a, b]).reshape(-1, 1)
        m = fit_em(X, FitConfig(k=2, seed=3))
        # per-cluster sample statistics oracle
        oracle = sorted([a.mean(), b.mean()])
        got = sorted(c.mean[0] for c in m.components)
        assert abs(got[0] - oracle[0]) < 0.1 and abs(got[1] - oracle[1]) < 0.1
        assert all(abs(w - 0.5) < 0.05 for w in m.weights)

    def test_loglik_trace_monotone_on_demo_features(self, demo_pairs):
        from needleplan.skills import clip_training_rows, segment

        rows = np.concatenate([
            clip_training_rows(c)
            for demo, level in demo_pairs[:3]
            for c in segment(demo, level)
            if c.states.shape[0] > 1 and c.label.kind == "APPROACH_GATE"])
        rows = (rows - rows.mean(0)) / np.where(rows.std(0) < 1e-12, 1.0, rows.std(0))
        m = fit_em(rows, FitConfig(k=3, seed=1))
        diffs = np.diff(m.loglik_trace)
        assert np.all(diffs >= -1e-9)

    def test_deterministic_given_seed(self, rng):
        X = rng.normal(size=(120, 3))
        m1 = fit_em(X, FitConfig(k=3, seed=9))
        m2 = fit_em(X, FitConfig(k=3, seed=9))
        for c1, c2 in zip(m1.components, m2.components):
            assert np.array_equal(c1.mean, c2.mean)
            assert np.array_equal(c1.cov, c2.cov)

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientDataError):
            fit_em(np.zeros((5, 2)), FitConfig(k=2))

    def test_degenerate_cluster_absorbed(self, rng):
        # one far outlier forces a near-empty cluster; must not crash
        X = np.concatenate([rng.normal(size=(50, 2)), [[100.0, 100.0]]])
        m = fit_em(X, FitConfig(k=3, seed=0, cov_floor=1e-6))
        assert np.isfinite(m.log_pdf_rows(X)).all()


class TestFitWeightedGaussian:
    def test_symmetric_pair(self):
        g = fit_weighted_gaussian([[0.0], [2.0]], [1.0, 1.0])
        assert g.mean[0] == pytest.approx(1.0, abs=1e-15)
        assert g.cov[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_point_mass(self, rng):
        X = rng.normal(size=(10, 2))
        w = np.zeros(10)
        w[4] = 2.5
        g = fit_weighted_gaussian(X, w)
        assert np.allclose(g.mean, X[4], atol=1e-15)
        assert np.allclose(g.cov, 0.0, atol=1e-15)

    def test_direct_summation_oracle(self, rng):
        X = rng.normal(size=(50, 3))
        w = rng.uniform(0.0, 2.0, 50)
        wbar = w / w.sum()
        mu = sum(wbar[j] * X[j] for j in range(50))
        cov = sum(wbar[j] * np.outer(mu - X[j], mu - X[j]) for j in range(50))
        g = fit_weighted_gaussian(X, w)
        assert np.allclose(g.mean, mu, atol=1e-12)
        assert np.allclose(g.cov, cov, atol=1e-12)

    def test_all_zero_weights(self):
        with pytest.raises(DegenerateWeightsError):
            fit_weighted_gaussian([[1.0], [2.0]], [0.0, 0.0])

    def test_uniform_rescaling_invariance(self, rng):
        X = rng.normal(size=(40, 2))
        w = rng.uniform(0.1, 1.0, 40)
        g1 = fit_weighted_gaussian(X, w)
        g2 = fit_weighted_gaussian(X, w * 1e6)
        assert np.allclose(g1.mean, g2.mean, atol=1e-12)
        assert np.allclose(g1.cov, g2.cov, atol=1e-12)

    def test_negative_weights_rejected(self):
        with pytest.raises(InvalidArgumentError):
            fit_weighted_gaussian([[1.0], [2.0]], [1.0, -0.5])


class TestFitWeightedGmm:
    def test_k1_reduces_to_weighted_gaussian(self, rng):
        X = rng.normal(size=(60, 2))
        w = rng.uniform(0.1, 1.0, 60)
        m = fit_weighted_gmm(X, w, FitConfig(k=1, cov_floor=1e-6, seed=0))
        g = fit_weighted_gaussian(X, w)
        assert np.allclose(m.components[0].mean, g.mean, atol=1e-10)
        assert np.allclose(m.components[0].cov, g.cov + 1e-6 * np.eye(2), atol=1e-10)

    def test_uniform_weights_equal_plain_em(self, rng):
        X = rng.normal(size=(90, 2))
        m1 = fit_em(X, FitConfig(k=2, seed=4))
        m2 = fit_weighted_gmm(X, np.full(90, 3.0), FitConfig(k=2, seed=4))
        for c1, c2 in zip(m1.components, m2.components):
            assert np.allclose(c1.mean, c2.mean, atol=1e-10)
            assert np.allclose(c1.cov, c2.cov, atol=1e-10)
        assert np.allclose(m1.weights, m2.weights, atol=1e-10)

    def test_bimodal_k2_beats_k1(self, rng):
        X = np.concatenate([rng.normal(-4, 0.5, 200), rng.normal(4, 0.5, 200)]).reshape(-1, 1)
        w = rng.uniform(0.5, 1.5, 400)
        m2 = fit_weighted_gmm(X, w, FitConfig(k=2, seed=0))
        m1 = fit_weighted_gmm(X, w, FitConfig(k=1, seed=0))
        ll2 = float(w @ m2.log_pdf_rows(X))
        ll1 = float(w @ m1.log_pdf_rows(X))
        assert ll2 >= ll1


class TestRegularize:
    def test_zero_is_identity(self, rng):
        m = random_model(rng)
        r = regularize(m, 0.0)
        assert r is m

    def test_floor_dominates_tiny_cov(self):
        m = GmmModel([Gaussian([0.0], [[1e-12]])], [1.0])
        r = regularize(m, 1e-3)
        assert r.components[0].cov[0, 0] == pytest.approx(1e-3, rel=1e-6)

    def test_eigenvalues_shift(self, rng):
        m = random_model(rng, d=3, k=2)
        r = regularize(m, 0.25)
        for before, after in zip(m.components, r.components):
            ev_b = np.linalg.eigvalsh(before.cov)
            ev_a = np.linalg.eigvalsh(after.cov)
            assert np.all(ev_a >= ev_b)
            assert np.min(ev_a) >= 0.25 - 1e-12
        assert np.array_equal(r.weights, m.weights)
        for before, after in zip(m.components, r.components):
            assert np.array_equal(before.mean, after.mean)


class TestProperties:
    def test_density_integrates_to_one_mc(self, rng):
        # stratified Monte Carlo over a bounding box, d = 2, 1e6 samples
        m = random_model(rng, d=2, k=2)
        lo = min(c.mean.min() for c in m.components) - 8.0
        hi = max(c.mean.max() for c in m.components) + 8.0
        n = 1000
        edges = np.linspace(lo, hi, n + 1)
        centers = (edges[:-1] + edges[1:]) / 2
        cell = (hi - lo) / n
        gx, gy = np.meshgrid(centers, centers, indexing="ij")
        pts = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
        pts = pts + rng.uniform(-cell / 2, cell / 2, pts.shape)  # jittered strata
        mass = float(np.exp(m.log_pdf_rows(pts)).sum() * cell * cell)
        assert mass == pytest.approx(1.0, rel=0.02)

    def test_loglik_finite_on_training_samples(self, rng):
        X = rng.normal(size=(100, 2)) * 5
        m = fit_em(X, FitConfig(k=3, seed=0))
        assert np.isfinite(m.log_pdf_rows(X)).all()


class TestSerialization:
    def test_round_trip_value_exact(self, rng, tmp_path):
        m = random_model(rng, d=3, k=2)
        path = tmp_path / "model.json"
        save_model(m, path)
        r = load_model(path)
        assert np.array_equal(r.weights, m.weights)
        for c1, c2 in zip(m.components, r.components):
            assert np.array_equal(c1.mean, c2.mean)
            assert np.array_equal(c1.cov, c2.cov)

    def test_missing_field_named(self, rng):
        obj = model_to_dict(random_model(rng))
        del obj["covariances"]
        with pytest.raises(ParseError) as e:
            model_from_dict(obj)
        assert "covariances" in str(e.value)

    def test_corrupt_float_named(self, rng):
        obj = model_to_dict(random_model(rng))
        obj["weights"][0] = "not-a-float"
        with pytest.raises(ParseError) as e:
            model_from_dict(obj)
        assert "weights" in str(e.value)

    def test_bad_version(self, rng):
        obj = model_to_dict(random_model(rng))
        obj["version"] = 99
        with pytest.raises(ParseError):
            model_from_dict(obj)
