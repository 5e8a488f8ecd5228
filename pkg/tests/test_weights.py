import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daptain.errors import DegenerateInputError, NumericalError
from daptain.weights import (BoundInputs, DiagonalGaussian, DomainBatch, DomainClassifier, MinimaxConfig,
                             WeightVector, domain_objective, dump_weights, generalization_bound,
                             importance_weights, minimax_weights, project_weights, renyi2_divergence,
                             robust_bias_aware_fit, train_classifier_c, train_classifier_c2,
                             weight_kld_term, weights_from_probs)


class FixedClassifier:
    """Classifier stub returning ``table[x[:, 0]]`` (or a constant)."""

    def __init__(self, table=None, constant=None):
        self.table, self.constant = table, constant

    def predict_proba(self, x):
        x = np.asarray(x)
        if self.constant is not None:
            return np.full(len(x), self.constant)
        return np.asarray(self.table)[x[:, 0].astype(int)]


def two_point(p, n):
    """Exact-frequency sample on support {0, 1} with P(point 0) = p."""
    k = int(round(p * n))
    return np.concatenate([np.zeros(k), np.ones(n - k)])[:, None]


def gaussian_domains(rng, n, shift, dim=41):
    xs = rng.normal(size=(n, dim))
    xt = rng.normal(size=(n, dim))
    xt[:, :2] += shift
    return DomainBatch.source(xs), DomainBatch.target(xt)


class TestImportanceWeights:
    def test_constant_classifier(self):
        w = weights_from_probs(np.full(7, 0.5))
        np.testing.assert_allclose(w.weights, 1.0)
        assert w.mode == "iw"

    def test_arithmetic(self):
        np.testing.assert_allclose(weights_from_probs([0.9, 0.1]).weights, [0.2, 1.8])

    def test_two_point_bayes(self):
        ps, pt = np.array([0.8, 0.2]), np.array([0.5, 0.5])
        bayes = ps / (ps + pt)
        w = importance_weights(FixedClassifier(bayes), DomainBatch.source(two_point(0.8, 1000)))
        assert w.weights[0] < w.weights[-1]
        assert abs(w.mean - 1) <= 1e-6

    def test_odds_is_density_ratio(self):
        ps, pt = np.array([0.8, 0.2]), np.array([0.5, 0.5])
        w = weights_from_probs((ps / (ps + pt))[[0, 0, 0, 0, 1]], ratio="odds")
        # (1 - C) / C = pt / ps; mean over an exact source sample of pt/ps is 1
        np.testing.assert_allclose(w.weights[[0, 4]], (pt / ps), rtol=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateInputError):
            weights_from_probs(np.ones(4))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=50).filter(lambda c: min(c) < 0.999))
    def test_normalized_and_monotone(self, c):
        w = weights_from_probs(c).weights
        assert abs(w.mean() - 1) <= 1e-6
        c = np.clip(c, 1e-7, 1 - 1e-7)
        order = np.argsort(c)
        assert np.all(np.diff(w[order]) <= 1e-12)


class TestClassifier:
    def test_separable(self, rng):
        s, t = gaussian_domains(rng, 600, 4.0)
        clf = train_classifier_c(s, t, 15, seed=0)
        s2, t2 = gaussian_domains(np.random.default_rng(99), 500, 4.0)
        acc = 0.5 * (np.mean(clf.predict_proba(s2.features) > 0.5) + np.mean(clf.predict_proba(t2.features) < 0.5))
        assert acc >= 0.95

    def test_identical_domains_chance(self, rng):
        s, t = gaussian_domains(rng, 600, 0.0)
        clf = train_classifier_c(s, t, 10, seed=0)
        held = np.random.default_rng(5).normal(size=(1000, 41))
        assert 0.45 <= clf.predict_proba(held).mean() <= 0.55

    def test_deterministic(self, rng):
        s, t = gaussian_domains(rng, 200, 1.0)
        a = train_classifier_c(s, t, 3, seed=4).predict_proba(s.features)
        b = train_classifier_c(s, t, 3, seed=4).predict_proba(s.features)
        np.testing.assert_array_equal(a, b)

    def test_outputs_in_open_interval(self, rng):
        clf = DomainClassifier(seed=1)
        p = clf.predict_proba(rng.normal(size=(10, 41)) * 1e4)
        assert np.all((p > 0) & (p < 1))

    def test_empty_batch(self, rng):
        with pytest.raises(DegenerateInputError):
            train_classifier_c(DomainBatch.source(np.zeros((0, 41))), DomainBatch.target(np.zeros((3, 41))))

    def test_save_load(self, tmp_path, rng):
        clf = DomainClassifier(seed=3, role="C2")
        clf.save(tmp_path / "c.vcae")
        back = DomainClassifier.load(tmp_path / "c.vcae")
        x = rng.normal(size=(5, 41))
        np.testing.assert_array_equal(back.predict_proba(x), clf.predict_proba(x))
        assert back.role == "C2" and back.head_parameter_count == 33


class TestKldTerm:
    def test_identical_domains(self, rng):
        s, t = gaussian_domains(rng, 50, 0.0)
        assert weight_kld_term(FixedClassifier(constant=0.5), t, s) == pytest.approx(0.0, abs=1e-12)

    def test_two_point_closed_form(self):
        ps, pt = np.array([0.8, 0.2]), np.array([0.5, 0.5])
        bayes = ps / (ps + pt)
        src, tgt = DomainBatch.source(two_point(0.8, 1000)), DomainBatch.target(two_point(0.5, 1000))
        norm = 0.8 * (1 - bayes[0]) + 0.2 * (1 - bayes[1])
        w = (1 - bayes) / norm
        expected = 0.5 * math.log(w[0]) + 0.5 * math.log(w[1])
        assert weight_kld_term(FixedClassifier(bayes), tgt, src) == pytest.approx(expected, abs=1e-12)

    def test_floor_counter(self):
        src, tgt = DomainBatch.source(two_point(0.5, 10)), DomainBatch.target(two_point(0.5, 10))
        value, n = weight_kld_term(FixedClassifier([0.5, 1.0]), tgt, src, return_floored=True)
        assert n == 5 and np.isfinite(value)

    def test_rises_during_training(self, rng):
        s, t = gaussian_domains(rng, 800, 1.5)
        clf, terms = None, []
        for epoch in range(20):
            clf = train_classifier_c(s, t, 1, seed=epoch, classifier=clf)
            terms.append(weight_kld_term(clf, t, s))
        assert all(terms[e] > terms[e - 5] for e in range(5, 20))


class TestC2:
    def test_identical_domains_uniform(self, rng):
        # low-dimensional features keep the in-sample overfitting bias of the objective negligible
        s, t = DomainBatch.source(rng.normal(size=(5000, 2))), DomainBatch.target(rng.normal(size=(5000, 2)))
        c2, js = train_classifier_c2(s, t, WeightVector.uniform(len(s)), adversarial=False, epochs=10, seed=0)
        assert domain_objective(c2, s, t) == pytest.approx(-math.log(4), abs=0.02)
        assert abs(js) <= 0.01

    def test_two_point_trained(self):
        ps, pt = np.array([0.8, 0.2]), np.array([0.5, 0.5])
        src, tgt = DomainBatch.source(two_point(0.8, 2000)), DomainBatch.target(two_point(0.5, 2000))
        m = (ps + pt) / 2
        js_true = 0.5 * np.sum(ps * np.log(ps / m)) + 0.5 * np.sum(pt * np.log(pt / m))
        _, js_u = train_classifier_c2(src, tgt, WeightVector.uniform(len(src)), adversarial=False,
                                      epochs=60, seed=0, lr=1e-2)
        assert abs(js_u - js_true) <= 0.02
        ratio = (pt / ps)[src.features[:, 0].astype(int)]
        _, js_w = train_classifier_c2(src, tgt, WeightVector(ratio, "iw"), adversarial=False,
                                      epochs=60, seed=0, lr=1e-2)
        assert abs(js_w) <= 0.01

    def test_adversarial_updates_shared_embedding(self, rng):
        s, t = gaussian_domains(rng, 200, 1.0)
        c = train_classifier_c(s, t, 2, seed=0)
        before = c.embedding["emb.W0"].data.copy()
        w = importance_weights(c, s)
        train_classifier_c2(s, t, w, adversarial=True, epochs=2, seed=0, base=c)
        assert not np.array_equal(before, c.embedding["emb.W0"].data)
        c_frozen = train_classifier_c(s, t, 2, seed=0)
        before = c_frozen.embedding["emb.W0"].data.copy()
        train_classifier_c2(s, t, w, adversarial=False, epochs=2, seed=0, base=c_frozen)
        np.testing.assert_array_equal(before, c_frozen.embedding["emb.W0"].data)

    def test_rejects_unnormalized(self, rng):
        s, t = gaussian_domains(rng, 10, 0.0)
        with pytest.raises(ValueError):
            train_classifier_c2(s, t, WeightVector(np.full(10, 2.0), "iw"))


class TestRenyi:
    def test_identity(self):
        assert renyi2_divergence([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0
        g = DiagonalGaussian(np.zeros(3), np.ones(3))
        assert renyi2_divergence(g, g) == pytest.approx(0.0, abs=1e-15)

    def test_unit_gaussians(self):
        assert renyi2_divergence(DiagonalGaussian(0.0, 1.0), DiagonalGaussian(1.0, 1.0)) == pytest.approx(1.0)

    def test_discrete_arithmetic(self):
        assert renyi2_divergence([0.5, 0.5], [0.8, 0.2]) == pytest.approx(math.log(1.5625))

    def test_infinite(self):
        with pytest.raises(NumericalError):
            renyi2_divergence([0.5, 0.5], [1.0, 0.0])
        with pytest.raises(NumericalError):
            renyi2_divergence(DiagonalGaussian(0.0, 3.0), DiagonalGaussian(0.0, 1.0))


class TestBound:
    def test_zero_divergence(self):
        assert generalization_bound(BoundInputs(0.0, 100, 10)) == 0.0

    def test_decreasing_in_n(self):
        vals = [generalization_bound(BoundInputs(1.0, n, 10)) for n in (100, 200, 400, 800)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_high_precision(self):
        mp = pytest.importorskip("mpmath")
        mp.mp.dps = 50
        n, h, d, d2 = mp.mpf(1000), mp.mpf(100), mp.mpf("0.05"), mp.mpf(1)
        ref = d2 ** mp.mpf("0.8") * ((h / n) * mp.log(n * mp.e / h) + mp.log(4 / d) / n) ** (mp.mpf(8) / 3)
        val = generalization_bound(BoundInputs(1.0, 1000, 100, 0.05))
        assert abs(val - float(ref)) <= 1e-10 * float(ref)

    def test_guard(self):
        with pytest.raises(ValueError):
            generalization_bound(BoundInputs(1.0, 10, 30))

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            BoundInputs(-1.0, 10, 1)


class TestProjection:
    cfg = MinimaxConfig()

    def test_feasible_fixed_point(self):
        w = np.array([0.99, 1.0, 0.98, 1.0])
        np.testing.assert_array_equal(project_weights(w, self.cfg).weights, w)

    def test_example(self, rng):
        out = project_weights([1.5, 0.4], self.cfg).weights
        assert np.all((out >= 1e-3) & (out <= 1)) and abs(out.mean() - 1) <= 0.01 + 1e-12
        cand = rng.uniform(0.98 - 1e-9, 1.0, size=(100000, 2))
        cand = cand[np.abs(cand.mean(axis=1) - 1) <= 0.01]
        assert np.linalg.norm(out - [1.5, 0.4]) <= np.min(np.linalg.norm(cand - [1.5, 0.4], axis=1)) + 1e-12

    def test_all_above_one(self):
        out = project_weights(np.full(5, 3.0), self.cfg).weights
        assert np.all(out <= 1) and out.mean() >= 0.99

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.floats(0.001, 0.5))
    def test_invariants_and_optimality(self, raw, eps):
        cfg = MinimaxConfig(epsilon=eps)
        raw = np.asarray(raw)
        p = project_weights(raw, cfg).weights
        assert np.all(p >= cfg.weight_floor) and np.all(p <= 1)
        assert abs(p.mean() - 1) <= eps + 1e-9
        # variational inequality: <raw - p, c - p> <= 0 for feasible c
        r = np.random.default_rng(len(raw))
        for _ in range(20):
            c = np.clip(r.uniform(1 - eps, 1, size=raw.size), cfg.weight_floor, 1)
            assert np.dot(raw - p, c - p) <= 1e-7


class TestMinimax:
    cfg = MinimaxConfig()

    def test_constant_loss(self):
        w = WeightVector(np.array([1.0, 0.99, 0.98, 1.0]), "minimax")
        out = minimax_weights(np.full(4, 0.7), w, self.cfg)
        np.testing.assert_allclose(out.weights, w.weights)

    def test_two_sample_ordering(self):
        w = WeightVector.uniform(2)
        cfg = MinimaxConfig(inner_steps=200)
        out = minimax_weights([1.0, 0.0], w, cfg).weights
        np.testing.assert_allclose(out, [1.0, 0.98], atol=1e-9)
        # brute-force grid maximum of the weighted loss over the feasible set
        g = np.linspace(0.97, 1.0, 3001)
        a, b = np.meshgrid(g, g, indexing="ij")
        ok = np.abs((a + b) / 2 - 1) <= 0.01 + 1e-12
        best = np.unravel_index(np.argmax(np.where(ok, a / (a + b), -1)), a.shape)
        np.testing.assert_allclose(out, [g[best[0]], g[best[1]]], atol=1e-4)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 10), min_size=2, max_size=40))
    def test_invariants(self, losses):
        out = minimax_weights(losses, WeightVector.uniform(len(losses)), self.cfg)
        assert out.mode == "minimax" and out.check(self.cfg.epsilon)

    def test_penalty_recorded(self):
        out = minimax_weights([100.0, 0.0], WeightVector.uniform(2), MinimaxConfig(inner_step_size=1.0))
        assert out.penalty > 0

    def test_robust_identical_domains(self, rng):
        s, t = gaussian_domains(rng, 300, 0.0)
        clf, w = robust_bias_aware_fit(s, t, self.cfg, epochs=8, seed=0)
        assert np.all(w.weights >= 1 - self.cfg.epsilon - 0.05) and np.all(w.weights <= 1)
        h = clf.history
        assert all(r >= u - 1e-12 for r, u in zip(h["robust_loss"], h["uniform_loss"]))


class TestWeightVector:
    def test_modes(self):
        assert WeightVector.uniform(3).check()
        assert WeightVector(np.array([0.5, 1.5]), "iw").check()
        assert not WeightVector(np.array([0.5, 1.6]), "iw").check()
        assert not WeightVector(np.array([1.2, 0.8]), "minimax").check()

    def test_dump(self, tmp_path):
        dump_weights(tmp_path / "w.jsonl", ["a", "b"], WeightVector(np.array([0.5, 1.5]), "iw"))
        lines = [json.loads(x) for x in (tmp_path / "w.jsonl").read_text().splitlines()]
        assert lines == [{"sample_id": "a", "omega": 0.5, "mode": "iw"}, {"sample_id": "b", "omega": 1.5, "mode": "iw"}]
