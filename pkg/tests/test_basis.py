"""Basis expansions: sieve growth rule, splines, categorical designs."""

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tube.basis import (
    BasisSpec,
    combined_design,
    dummy_basis,
    evaluate_spec,
    linear_basis,
    natural_spline_basis,
    resolve_spec,
    sieve_dimension,
    snp_category_basis,
)
from tube.errors import ConfigError, DataError, DegenerateInputError


class TestSieveDimension:
    @pytest.mark.parametrize(
        "n, expected",
        [(10000, 22), (16, 3), (1_000_000, 100), (8, 2), (27, 3), (1, 1), (2, 2)],
    )
    def test_pinned_values(self, n, expected):
        assert sieve_dimension(n) == expected

    def test_rejects_nonpositive(self):
        with pytest.raises(DataError):
            sieve_dimension(0)

    @given(st.integers(min_value=1, max_value=10**7), st.integers(min_value=0, max_value=10**6))
    def test_monotone_nondecreasing(self, n, gap):
        assert sieve_dimension(n + gap) >= sieve_dimension(n)

    @given(st.integers(min_value=16, max_value=10**7))
    def test_rate_bounds(self, n):
        j = sieve_dimension(n)
        assert n ** 0.25 <= j <= n ** 0.5


class TestNaturalSpline:
    def grid_design(self, df=4, num=400, lo=-3.0, hi=3.0):
        x = np.linspace(lo, hi, num)
        spec = resolve_spec(BasisSpec(kind="natural_spline", df=df), x)
        return x, spec, natural_spline_basis(x, spec)

    def test_df4_yields_four_columns(self):
        _, spec, design = self.grid_design(df=4)
        assert design.shape[1] == 4
        assert len(spec.knots) == 4

    def test_reproduces_linear_functions_exactly(self, rng):
        x = rng.normal(size=200)
        spec = resolve_spec(BasisSpec(kind="natural_spline", df=5), x)
        design = natural_spline_basis(x, spec)
        target = 2.5 - 1.75 * x
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        np.testing.assert_allclose(design @ coef, target, atol=1e-10)

    def test_linear_beyond_boundary_knots(self):
        x, spec, _ = self.grid_design(df=5)
        outside = np.linspace(x.max() + 0.5, x.max() + 4.0, 50)
        design = natural_spline_basis(outside, spec)
        # every column restricted to the tail must have zero curvature
        second = np.diff(design, n=2, axis=0)
        np.testing.assert_allclose(second, 0.0, atol=1e-9)
        below = np.linspace(x.min() - 4.0, x.min() - 0.5, 50)
        second = np.diff(natural_spline_basis(below, spec), n=2, axis=0)
        np.testing.assert_allclose(second, 0.0, atol=1e-9)

    def test_second_derivative_continuous_at_knots(self):
        x = np.linspace(-2.0, 2.0, 50)
        spec = resolve_spec(BasisSpec(kind="natural_spline", df=4), x)
        h = 1e-5
        for knot in spec.knots[1:-1]:
            t = np.array([knot - 2 * h, knot - h, knot, knot + h, knot + 2 * h])
            cols = natural_spline_basis(t, spec)
            left = (cols[0] - 2 * cols[1] + cols[2]) / h**2
            right = (cols[2] - 2 * cols[3] + cols[4]) / h**2
            np.testing.assert_allclose(left, right, atol=1e-3)

    def test_deterministic_bit_identical(self, rng):
        x = rng.normal(size=80)
        spec = resolve_spec(BasisSpec(kind="natural_spline", df=4), x)
        a = natural_spline_basis(x, spec)
        b = natural_spline_basis(x, spec)
        assert np.array_equal(a, b)

    def test_tied_knots_collapse_with_warning(self, caplog):
        # mass point at zero forces duplicate interior quantiles
        x = np.concatenate([np.zeros(95), np.array([-1.0, 1.0, 2.0, 3.0, 4.0])])
        with caplog.at_level("WARNING"):
            spec = resolve_spec(BasisSpec(kind="natural_spline", df=6), x)
        assert len(spec.knots) < 6
        assert any("knots" in r.message for r in caplog.records)

    def test_constant_column_rejected(self):
        with pytest.raises(DegenerateInputError):
            resolve_spec(BasisSpec(kind="natural_spline", df=4), np.ones(30))

    def test_nonfinite_rejected(self):
        spec = BasisSpec(kind="natural_spline", knots=(0.0, 1.0, 2.0))
        with pytest.raises(DataError):
            natural_spline_basis(np.array([0.5, np.nan]), spec)

    def test_df_below_two_rejected(self):
        with pytest.raises(ConfigError):
            resolve_spec(BasisSpec(kind="natural_spline", df=1), np.linspace(0, 1, 20))


class TestDummyBasis:
    def test_three_level_rows(self):
        spec = BasisSpec(kind="dummy", levels=(0.0, 1.0, 2.0))
        design = dummy_basis(np.array([2.0, 0.0, 1.0]), spec)
        np.testing.assert_array_equal(
            design, [[1.0, 0.0, 1.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]
        )

    def test_two_level_rows(self):
        spec = BasisSpec(kind="dummy", levels=(0.0, 1.0))
        design = dummy_basis(np.array([0.0]), spec)
        np.testing.assert_array_equal(design, [[1.0, 0.0]])

    def test_reference_is_smallest_observed(self):
        spec = resolve_spec(BasisSpec(kind="dummy"), np.array([5.0, 3.0, 5.0, 7.0]))
        assert spec.levels == (3.0, 5.0, 7.0)

    def test_unseen_level_is_an_error(self):
        spec = BasisSpec(kind="dummy", levels=(0.0, 1.0))
        with pytest.raises(DataError):
            dummy_basis(np.array([0.0, 2.0]), spec)

    def test_single_level_rejected(self):
        with pytest.raises(DegenerateInputError):
            resolve_spec(BasisSpec(kind="dummy"), np.full(10, 3.0))


class TestSnpCategoryBasis:
    def test_all_nine_combinations(self, rng):
        combos = np.array([(a, b) for a in (0.0, 1.0, 2.0) for b in (0.0, 1.0, 2.0)])
        g = np.repeat(combos, 3, axis=0)
        design = snp_category_basis(g)
        assert design.shape == (27, 9)
        assert np.array_equal(design[:, 0], np.ones(27))
        # eight indicators, one per non-reference combination, 3 rows each
        np.testing.assert_array_equal(design[:, 1:].sum(axis=0), np.full(8, 3.0))
        # reference rows carry no indicator at all
        assert np.sum(design[:, 1:].sum(axis=1) == 0.0) == 3

    def test_reference_is_most_frequent(self):
        g = np.array([[1.0, 1.0]] * 5 + [[0.0, 0.0]] * 2 + [[2.0, 0.0]])
        spec = resolve_spec(BasisSpec(kind="snp_category"), g)
        assert spec.levels[0] == (1.0, 1.0)
        design = snp_category_basis(g, spec)
        np.testing.assert_array_equal(design[:5, 1:], 0.0)

    def test_single_snp_matches_dummy_when_reference_agrees(self):
        g = np.array([0.0, 0.0, 0.0, 1.0, 2.0, 1.0])
        joint = snp_category_basis(g)
        marginal = dummy_basis(g, resolve_spec(BasisSpec(kind="dummy"), g))
        np.testing.assert_array_equal(joint, marginal)

    def test_unseen_combination_is_an_error(self):
        spec = BasisSpec(kind="snp_category", levels=((0.0, 0.0), (1.0, 0.0)))
        with pytest.raises(DataError):
            snp_category_basis(np.array([[2.0, 2.0]]), spec)

    def test_combination_cap(self):
        g = np.zeros((4, 5))
        with pytest.raises(ConfigError):
            snp_category_basis(g)

    def test_fractional_dosage_rejected(self):
        with pytest.raises(DataError):
            snp_category_basis(np.array([[0.5, 1.0]]))


class TestCombinedDesign:
    def test_single_intercept(self, rng):
        cols = rng.normal(size=(40, 2))
        specs = [BasisSpec(kind="linear"), BasisSpec(kind="linear")]
        design = combined_design(cols, specs)
        assert design.shape == (40, 3)
        assert np.array_equal(design[:, 0], np.ones(40))
        # no other column is constant
        assert all(np.std(design[:, j]) > 0 for j in range(1, 3))

    def test_mixed_blocks(self, rng):
        x = rng.normal(size=60)
        g = rng.integers(0, 3, size=60).astype(float)
        specs = [
            resolve_spec(BasisSpec(kind="natural_spline", df=4), x),
            resolve_spec(BasisSpec(kind="dummy"), g),
        ]
        design = combined_design(np.column_stack([x, g]), specs)
        assert design.shape[1] == 4 + 2

    def test_spec_count_mismatch(self, rng):
        with pytest.raises(ConfigError):
            combined_design(rng.normal(size=(10, 2)), [BasisSpec(kind="linear")])


class TestSpecSerialization:
    @pytest.mark.parametrize(
        "spec, column",
        [
            (BasisSpec(kind="natural_spline", df=4), "normal"),
            (BasisSpec(kind="dummy"), "levels"),
            (BasisSpec(kind="linear"), "normal"),
        ],
    )
    def test_json_round_trip_preserves_evaluation(self, rng, spec, column):
        x = rng.normal(size=50) if column == "normal" else rng.integers(0, 3, 50).astype(float)
        resolved = resolve_spec(spec, x)
        revived = BasisSpec.from_dict(json.loads(json.dumps(resolved.to_dict())))
        assert np.array_equal(evaluate_spec(resolved, x), evaluate_spec(revived, x))

    def test_snp_round_trip(self, rng):
        g = rng.integers(0, 3, size=(30, 2)).astype(float)
        resolved = resolve_spec(BasisSpec(kind="snp_category"), g)
        revived = BasisSpec.from_dict(json.loads(json.dumps(resolved.to_dict())))
        assert np.array_equal(evaluate_spec(resolved, g), evaluate_spec(revived, g))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            BasisSpec.from_dict({"kind": "fourier"})


def test_linear_basis_shape(rng):
    x = rng.normal(size=15)
    design = linear_basis(x)
    assert design.shape == (15, 2)
    np.testing.assert_array_equal(design[:, 1], x)
