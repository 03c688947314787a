"""Composite-likelihood EM tests.

The evaluation oracle below recomputes the objective record by record
with plain Python loops; the package's vectorized version must agree
to 1e-12. Hand-computed E/M expectations freeze the formulas.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tube.basis import BasisSpec, PreparedBases, linear_basis
from tube.data import Dataset
from tube.errors import DegenerateInputError
from tube.glm import expit, fit_fractional_logistic
from tube.pipeline import RunConfig, prepare_bases
from tube.stage1 import (
    Stage1Params,
    composite_loglik,
    fit_stage1,
    fit_stage1_accelerated,
    initial_stage1_params,
    stage1_e_step,
    stage1_m_step,
    update_label_probs,
)

from conftest import make_dataset


def linear_config():
    spec = BasisSpec(kind="linear", df=1)
    return RunConfig(seed=0, g_basis=(spec, spec), x_basis=(spec, spec))


@pytest.fixture
def fixture_pair(rng):
    data = make_dataset(rng, num_records=20, num_labeled=8, num_surrogates=2, num_risk_factors=2)
    return data, prepare_bases(data, linear_config())


def random_params(rng, data, bases):
    lam = rng.uniform(0.1, 1.0, size=(2, data.grades + 1))
    lam /= lam.sum(axis=1, keepdims=True)
    return Stage1Params(
        g_coef=rng.normal(scale=0.5, size=bases.g_design.shape[1]),
        x_coefs=[rng.normal(scale=0.5, size=d.shape[1]) for d in bases.x_designs],
        label_probs=lam,
        prevalence=float(rng.uniform(0.2, 0.8)),
    )


def loop_composite_loglik(params, data, bases):
    """Straightforward per-record, per-component re-evaluation."""
    total = 0.0
    for i in range(data.num_records):
        p1 = expit(float(bases.g_design[i] @ params.g_coef))
        if data.labeled[i]:
            k = data.label_index[i]
            mix = params.label_probs[1, k] * p1 + params.label_probs[0, k] * (1 - p1)
            total += np.log(max(mix, 1e-300))
        for j in range(data.num_surrogates):
            q1 = expit(float(bases.x_designs[j][i] @ params.x_coefs[j]))
            mix = q1 * p1 / params.prevalence + (1 - q1) * (1 - p1) / (1 - params.prevalence)
            total += np.log(max(mix, 1e-300))
    return total


class TestCompositeLoglik:
    def test_matches_loop_oracle(self, rng, fixture_pair):
        data, bases = fixture_pair
        for _ in range(5):
            params = random_params(rng, data, bases)
            fast = composite_loglik(params, data, bases)
            slow = loop_composite_loglik(params, data, bases)
            assert abs(fast - slow) < 1e-12 * max(1.0, abs(slow))

    def test_identical_label_rows_decouple(self, rng, fixture_pair):
        """With uninformative grade probabilities the labeled term is a
        constant in the remaining parameters."""
        data, bases = fixture_pair
        params = random_params(rng, data, bases)
        lam = np.tile(params.label_probs[0], (2, 1))
        lam /= lam.sum(axis=1, keepdims=True)
        k = data.label_index[data.labeled]
        labeled_term = float(np.sum(np.log(lam[0, k])))
        params_a = Stage1Params(params.g_coef, params.x_coefs, lam, params.prevalence)
        params_b = Stage1Params(params.g_coef + 0.7, params.x_coefs, lam, params.prevalence)
        for p in (params_a, params_b):
            surrogate_only = loop_composite_loglik(p, data, bases) - labeled_term
            reconstructed = composite_loglik(p, data, bases) - labeled_term
            assert abs(surrogate_only - reconstructed) < 1e-10

    def test_flat_surrogate_terms_vanish(self, rng, fixture_pair):
        """zeta_j = 0 with prevalence 1/2 cancels each surrogate term."""
        data, bases = fixture_pair
        params = random_params(rng, data, bases)
        flat = Stage1Params(
            g_coef=params.g_coef,
            x_coefs=[np.zeros(d.shape[1]) for d in bases.x_designs],
            label_probs=params.label_probs,
            prevalence=0.5,
        )
        k = data.label_index[data.labeled]
        p1 = expit(bases.g_design @ flat.g_coef)
        lam = flat.label_probs
        labeled_term = float(
            np.sum(np.log(lam[1, k] * p1[data.labeled] + lam[0, k] * (1 - p1[data.labeled])))
        )
        assert abs(composite_loglik(flat, data, bases) - labeled_term) < 1e-10

    def test_label_switch_symmetry(self, rng, fixture_pair):
        data, bases = fixture_pair
        params = random_params(rng, data, bases)
        swapped = Stage1Params(
            g_coef=-params.g_coef,
            x_coefs=[-c for c in params.x_coefs],
            label_probs=params.label_probs[::-1].copy(),
            prevalence=1.0 - params.prevalence,
        )
        a = composite_loglik(params, data, bases)
        b = composite_loglik(swapped, data, bases)
        assert abs(a - b) < 1e-12 * max(1.0, abs(a))


class TestInitialization:
    def test_informative_label_matrix(self, small_data):
        bases = prepare_bases(small_data, linear_config())
        params = initial_stage1_params(small_data, bases)
        np.testing.assert_allclose(params.label_probs[1], [0.075, 0.075, 0.85])
        np.testing.assert_allclose(params.label_probs[0], [0.85, 0.075, 0.075])

    def test_prevalence_is_proxy_mean(self, small_data):
        bases = prepare_bases(small_data, linear_config())
        params = initial_stage1_params(small_data, bases)
        lab = small_data.labeled
        proxy = (small_data.label_index[lab] == small_data.grades).astype(float)
        assert params.prevalence == pytest.approx(proxy.mean(), abs=1e-15)

    def test_surrogate_start_is_plain_proxy_fit(self, small_data):
        bases = prepare_bases(small_data, linear_config())
        params = initial_stage1_params(small_data, bases)
        lab = small_data.labeled
        proxy = (small_data.label_index[lab] == small_data.grades).astype(float)
        direct = fit_fractional_logistic(proxy, bases.x_designs[0][lab])
        np.testing.assert_allclose(params.x_coefs[0], direct.coefficients, atol=1e-12)

    def test_constant_proxy_rejected(self, rng):
        g = rng.normal(size=(12, 1))
        x = rng.normal(size=(12, 1))
        labels = np.full(12, np.nan)
        labels[:4] = 1.0
        labeled = ~np.isnan(labels)
        data = Dataset(labels, labeled, x, g, 2)
        bases = PreparedBases(
            g_design=linear_basis(g[:, 0]), x_designs=[linear_basis(x[:, 0])]
        )
        with pytest.raises(DegenerateInputError, match="proxy"):
            initial_stage1_params(data, bases)


class TestEStep:
    def test_neutral_score_top_grade_posterior(self, rng):
        """Grade at the top of the scale, even odds from the risk factors:
        the posterior is 0.85/(0.85+0.075)."""
        g = rng.normal(size=(6, 1))
        x = rng.normal(size=(6, 1))
        labels = np.array([1.0, 0.0, np.nan, np.nan, 1.0, 0.5])
        labeled = ~np.isnan(labels)
        data = Dataset(labels, labeled, x, g, 2)
        bases = PreparedBases(
            g_design=linear_basis(g[:, 0]), x_designs=[linear_basis(x[:, 0])]
        )
        lam = np.array([[0.85, 0.075, 0.075], [0.075, 0.075, 0.85]])
        params = Stage1Params(
            g_coef=np.zeros(2),
            x_coefs=[rng.normal(size=2)],
            label_probs=lam,
            prevalence=0.5,
        )
        imputations = stage1_e_step(params, data, bases)
        assert imputations.label_posterior[0] == pytest.approx(0.85 / 0.925, abs=1e-15)
        assert imputations.label_posterior[1] == pytest.approx(0.075 / 0.925, abs=1e-15)
        assert np.isnan(imputations.label_posterior[2])

    def test_uninformative_grades_return_prior(self, rng, fixture_pair):
        data, bases = fixture_pair
        params = random_params(rng, data, bases)
        lam = np.tile(params.label_probs[0], (2, 1))
        lam /= lam.sum(axis=1, keepdims=True)
        flat = Stage1Params(params.g_coef, params.x_coefs, lam, params.prevalence)
        imputations = stage1_e_step(flat, data, bases)
        p1 = expit(bases.g_design @ flat.g_coef)
        np.testing.assert_allclose(
            imputations.label_posterior[data.labeled], p1[data.labeled], atol=1e-12
        )

    def test_flat_surrogate_returns_prior(self, rng, fixture_pair):
        data, bases = fixture_pair
        params = random_params(rng, data, bases)
        flat = Stage1Params(
            params.g_coef,
            [np.zeros(d.shape[1]) for d in bases.x_designs],
            params.label_probs,
            0.5,
        )
        imputations = stage1_e_step(flat, data, bases)
        p1 = expit(bases.g_design @ flat.g_coef)
        np.testing.assert_allclose(imputations.surrogate_posterior[:, 0], p1, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_posteriors_stay_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        data = make_dataset(rng, num_records=15, num_labeled=6)
        bases = prepare_bases(data, linear_config())
        params = random_params(rng, data, bases)
        imputations = stage1_e_step(params, data, bases)
        lab = imputations.label_posterior[data.labeled]
        assert np.all((lab >= 0) & (lab <= 1))
        assert np.all((imputations.surrogate_posterior >= 0) & (imputations.surrogate_posterior <= 1))


class TestMStep:
    def test_hard_posteriors_give_empirical_label_rates(self):
        idx = np.array([2, 2, 1, 0, 0, 2, 1, 0])
        post = np.array([1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0])
        lam = update_label_probs(idx, post, 2)
        np.testing.assert_allclose(lam[1], [0.25, 0.25, 0.5], atol=1e-12)
        np.testing.assert_allclose(lam[0], [0.5, 0.25, 0.25], atol=1e-12)

    def test_two_record_hand_arithmetic(self):
        # weights: class1 mass (0.8, 0.3), class0 mass (0.2, 0.7)
        idx = np.array([2, 0])
        post = np.array([0.8, 0.3])
        lam = update_label_probs(idx, post, 2)
        np.testing.assert_allclose(lam[1], [0.3 / 1.1, 1e-6, 0.8 / 1.1], rtol=1e-6)
        np.testing.assert_allclose(lam[0], [0.7 / 0.9, 1e-6, 0.2 / 0.9], rtol=1e-6)
        np.testing.assert_allclose(lam.sum(axis=1), 1.0, atol=1e-12)

    def test_vanished_class_mass_rejected(self):
        with pytest.raises(DegenerateInputError):
            update_label_probs(np.array([0, 1]), np.array([0.0, 0.0]), 2)

    def test_constant_imputations_set_prevalence(self, rng, fixture_pair):
        data, bases = fixture_pair
        params = random_params(rng, data, bases)
        imputations = stage1_e_step(params, data, bases)
        imputations.label_posterior[data.labeled] = 0.37
        imputations.surrogate_posterior[:] = 0.37
        updated = stage1_m_step(imputations, data, bases, params)
        assert updated.prevalence == pytest.approx(0.37, abs=1e-12)

    def test_pooled_fit_equals_stacked_component_fit(self, rng, fixture_pair):
        """The weighted single fit must solve the same score equations as
        one row per (record, component) with unit weights."""
        data, bases = fixture_pair
        params = random_params(rng, data, bases)
        imputations = stage1_e_step(params, data, bases)
        updated = stage1_m_step(imputations, data, bases, params)

        rows = [bases.g_design]
        outs = [imputations.surrogate_posterior[:, 0]]
        for j in range(1, data.num_surrogates):
            rows.append(bases.g_design)
            outs.append(imputations.surrogate_posterior[:, j])
        rows.append(bases.g_design[data.labeled])
        outs.append(imputations.label_posterior[data.labeled])
        stacked = fit_fractional_logistic(np.concatenate(outs), np.vstack(rows))
        np.testing.assert_allclose(updated.g_coef, stacked.coefficients, atol=1e-8)

    def test_label_rows_sum_to_one(self, rng, fixture_pair):
        data, bases = fixture_pair
        params = random_params(rng, data, bases)
        updated = stage1_m_step(stage1_e_step(params, data, bases), data, bases, params)
        np.testing.assert_allclose(updated.label_probs.sum(axis=1), 1.0, atol=1e-12)
        assert 0.0 < updated.prevalence < 1.0


class TestFitStage1:
    def test_trace_nondecreasing(self, small_data):
        bases = prepare_bases(small_data, linear_config())
        _, trace = fit_stage1(small_data, bases)
        diffs = np.diff(trace.objectives)
        floor = -1e-8 * np.maximum(np.abs(trace.objectives[:-1]), 1.0)
        assert np.all(diffs >= floor)
        assert trace.converged

    def test_record_order_invariance(self, rng):
        """Permuting rows changes only floating-point summation order;
        at matched iteration counts the drift stays below 1e-8."""
        data = make_dataset(rng, num_records=40, num_labeled=16)
        perm = rng.permutation(data.num_records)
        shuffled = Dataset(
            data.labels[perm], data.labeled[perm], data.surrogates[perm],
            data.risk_factors[perm], data.grades,
        )
        params, trace = fit_stage1(data, prepare_bases(data, linear_config()))
        params_p, trace_p = fit_stage1(shuffled, prepare_bases(shuffled, linear_config()))
        assert trace.iterations == trace_p.iterations
        np.testing.assert_allclose(params.g_coef, params_p.g_coef, atol=1e-8)
        np.testing.assert_allclose(params.label_probs, params_p.label_probs, atol=1e-8)
        assert params.prevalence == pytest.approx(params_p.prevalence, abs=1e-8)

    def test_invariants_at_fit(self, small_data):
        bases = prepare_bases(small_data, linear_config())
        params, _ = fit_stage1(small_data, bases)
        params.validate()
        imputations = stage1_e_step(params, small_data, bases)
        lab = imputations.label_posterior[small_data.labeled]
        assert np.all((lab >= 0) & (lab <= 1))


class TestCompositeDescent:
    def test_small_cohort_descent_is_surfaced(self):
        """The composite update has no ascent guarantee: the prevalence
        enters through 1/mu factors outside any minorization. On this
        cohort the objective drifts downward from iteration ~34; the
        fit must report that as an internal-consistency error rather
        than return silently."""
        rng = np.random.default_rng(1)
        data = make_dataset(rng, num_records=80, num_labeled=30)
        bases = prepare_bases(data, linear_config())
        with pytest.raises(AscentViolationError, match="decreased"):
            fit_stage1(data, bases, rel_tol=1e-10, max_iter=3000)


class TestAcceleratedFit:
    def fixture_pair(self):
        rng = np.random.default_rng(0)
        data = make_dataset(rng, num_records=80, num_labeled=30)
        return data, prepare_bases(data, linear_config())

    def test_same_fixed_point_as_plain(self):
        data, bases = self.fixture_pair()
        plain, _ = fit_stage1(data, bases, rel_tol=1e-10, max_iter=3000)
        fast, _ = fit_stage1_accelerated(data, bases, rel_tol=1e-10, max_iter=3000)
        np.testing.assert_allclose(fast.g_coef, plain.g_coef, atol=2e-4)
        np.testing.assert_allclose(fast.label_probs, plain.label_probs, atol=2e-4)
        assert fast.prevalence == pytest.approx(plain.prevalence, abs=2e-4)

    def test_trace_nondecreasing(self):
        data, bases = self.fixture_pair()
        _, trace = fit_stage1_accelerated(data, bases)
        diffs = np.diff(trace.objectives)
        floor = -1e-8 * np.maximum(np.abs(trace.objectives[:-1]), 1.0)
        assert np.all(diffs >= floor)

    def test_objective_not_worse_than_plain(self):
        data, bases = self.fixture_pair()
        plain, _ = fit_stage1(data, bases)
        fast, _ = fit_stage1_accelerated(data, bases)
        gap = composite_loglik(fast, data, bases) - composite_loglik(plain, data, bases)
        assert gap > -1e-6 * abs(composite_loglik(plain, data, bases))
