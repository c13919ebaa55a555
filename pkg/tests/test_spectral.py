import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blowup.grid import Field, GridSpec
from blowup.solver import apply_L
from blowup.spectral import (
    QuadratureOverflow,
    QuadratureRule,
    eigenvalue,
    gauss_hermite_rule,
    grid_rule,
    hermite_norm_sq,
    hermite_poly,
    rho,
    semigroup_apply,
    weighted_integral,
)


def power_sum_hermite(ell, xi):
    # the defining finite sum, evaluated independently of the recurrence
    return sum((-1) ** j * math.factorial(ell) / (math.factorial(j) * math.factorial(ell - 2 * j))
               * xi ** (ell - 2 * j) for j in range(ell // 2 + 1))


def trapezoid_oracle(f, y_max=40.0, n=400001):
    y = np.linspace(-y_max, y_max, n)
    return float(np.trapezoid(f(y) * rho(y), y))


class TestHermitePoly:
    def test_h0_is_one(self):
        assert hermite_poly(0, 5.0) == 1.0

    def test_h2_at_three(self):
        assert hermite_poly(2, 3.0) == 7.0

    def test_h3_at_two(self):
        assert hermite_poly(3, 2.0) == -4.0

    def test_scalar_in_scalar_out(self):
        assert isinstance(hermite_poly(4, 1.5), float)

    def test_vectorized(self):
        xs = np.array([-1.0, 0.0, 2.5])
        np.testing.assert_allclose(hermite_poly(2, xs), xs**2 - 2)

    def test_negative_index_rejected(self):
        with pytest.raises(ValueError):
            hermite_poly(-1, 0.0)

    @given(st.integers(0, 12), st.floats(-6, 6))
    def test_matches_power_sum(self, ell, xi):
        expected = power_sum_hermite(ell, xi)
        assert hermite_poly(ell, xi) == pytest.approx(expected, rel=1e-9, abs=1e-9 * 6.0**ell)


class TestEigenvalue:
    @pytest.mark.parametrize("m, lam", [(0, 1.0), (1, 0.5), (2, 0.0), (3, -0.5)])
    def test_values(self, m, lam):
        assert eigenvalue(m) == lam

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            eigenvalue(-2)


class TestGaussHermiteRule:
    def test_weights_sum_to_one(self):
        rule = gauss_hermite_rule()
        assert abs(float(np.sum(rule.weights)) - 1.0) < 1e-12

    def test_weights_positive_and_degree(self):
        rule = gauss_hermite_rule(64)
        assert np.all(rule.weights > 0)
        assert rule.degree == 127
        assert len(rule.nodes) == 64

    def test_rejects_nonpositive_weights(self):
        with pytest.raises(ValueError):
            QuadratureRule(np.array([0.0, 1.0]), np.array([1.0, 0.0]), 1)

    @pytest.mark.parametrize("k", [0, 2, 4, 6, 10, 20])
    def test_even_moments(self, k):
        # E[y^k] for y ~ N(0, 2) is k!/(k/2)!
        exact = math.factorial(k) / math.factorial(k // 2)
        assert weighted_integral(lambda y: y**k) == pytest.approx(exact, rel=1e-12)

    def test_orthogonality_up_to_ten(self):
        worst = 0.0
        for m in range(11):
            for n in range(11):
                val = weighted_integral(lambda y: hermite_poly(m, y) * hermite_poly(n, y))
                if m != n:
                    worst = max(worst, abs(val))
                else:
                    assert val == pytest.approx(hermite_norm_sq(m), rel=1e-12)
        assert worst < 1e-10


class TestWeightedIntegral:
    def test_constant(self):
        assert weighted_integral(lambda y: np.ones_like(y)) == pytest.approx(1.0, abs=1e-14)

    def test_second_moment_against_oracle(self):
        oracle = trapezoid_oracle(lambda y: y**2)
        assert oracle == pytest.approx(2.0, rel=1e-10)
        assert weighted_integral(lambda y: y**2) == pytest.approx(2.0, rel=1e-13)

    def test_h2_has_zero_mean(self):
        oracle = trapezoid_oracle(lambda y: y**2 - 2)
        assert abs(oracle) < 1e-10
        assert abs(weighted_integral(lambda y: hermite_poly(2, y))) < 1e-13

    def test_field_uses_grid_rule(self):
        grid = GridSpec.from_spacing(40.0, 0.05)
        f = Field.from_function(lambda y: y**2, grid)
        assert weighted_integral(f) == pytest.approx(2.0, rel=1e-12)

    def test_array_needs_rule(self):
        with pytest.raises(ValueError):
            weighted_integral(np.ones(5))

    def test_array_with_rule(self):
        rule = gauss_hermite_rule(16)
        assert weighted_integral(np.asarray(rule.nodes, dtype=float) ** 2, rule) == pytest.approx(2.0)

    def test_overflow_reported(self):
        with pytest.raises(QuadratureOverflow):
            weighted_integral(lambda y: np.exp(np.asarray(y, dtype=float) ** 4))

    def test_physical_field_rejected(self):
        grid = GridSpec(1.0, 11)
        with pytest.raises(ValueError):
            weighted_integral(Field(np.zeros(11), grid, "x"))

    def test_grid_rule_degree_measured(self):
        rule = grid_rule(GridSpec.from_spacing(40.0, 0.1))
        assert rule.degree >= 21


class TestNormSquared:
    @pytest.mark.parametrize("ell, value", [(0, 1.0), (1, 2.0), (2, 8.0)])
    def test_small(self, ell, value):
        assert hermite_norm_sq(ell) == value

    @pytest.mark.parametrize("ell", range(13))
    def test_closed_form_against_quadrature(self, ell):
        quad = weighted_integral(lambda y: hermite_poly(ell, y) ** 2)
        assert hermite_norm_sq(ell) == pytest.approx(quad, rel=1e-12)


class TestDiscreteEigenRelation:
    @pytest.mark.parametrize("m", range(7))
    def test_eigen_relation_inside_ten(self, m):
        grid = GridSpec.from_spacing(12.0, 0.01)
        f = Field.from_function(lambda y: hermite_poly(m, y), grid)
        Lf = apply_L(f).values
        inside = np.abs(grid.nodes) <= 10.0
        err = np.max(np.abs(Lf - eigenvalue(m) * f.values)[inside])
        assert err <= 1e-6 * np.max(np.abs(f.values[inside]))


GRID = GridSpec.from_spacing(40.0, 0.02)


class TestSemigroup:
    def test_constant_grows_by_exp(self):
        one = Field(np.ones(GRID.n_points), GRID, "y", 0.0)
        out = semigroup_apply(0.7, one)
        np.testing.assert_allclose(out.values, 2.0137527074704766, rtol=1e-12)
        assert out.time == pytest.approx(0.7)

    def test_h2_unchanged(self):
        f = Field.from_function(lambda y: hermite_poly(2, y), GRID)
        out = semigroup_apply(1.3, f)
        inner = np.abs(GRID.nodes) <= 10
        np.testing.assert_allclose(out.values[inner], f.values[inner], atol=1e-9)

    def test_h1_scaled(self):
        f = Field.from_function(lambda y: hermite_poly(1, y), GRID)
        out = semigroup_apply(0.5, f)
        inner = np.abs(GRID.nodes) <= 10
        np.testing.assert_allclose(out.values[inner], math.exp(0.25) * f.values[inner], atol=1e-9)

    @pytest.mark.parametrize("theta", [0.0, -0.1])
    def test_rejects_nonpositive_theta(self, theta):
        f = Field(np.ones(GRID.n_points), GRID)
        with pytest.raises(ValueError):
            semigroup_apply(theta, f)

    @pytest.mark.parametrize("m", range(5))
    def test_eigenfunctions(self, m):
        f = Field.from_function(lambda y: hermite_poly(m, y), GRID)
        theta = 0.4
        out = semigroup_apply(theta, f)
        inner = np.abs(GRID.nodes) <= 8
        expected = math.exp(eigenvalue(m) * theta) * f.values[inner]
        np.testing.assert_allclose(out.values[inner], expected, atol=1e-8 * 8.0**m)

    def test_chain_rule(self):
        rng = np.random.default_rng(1)
        y = GRID.nodes
        f = Field(sum(rng.normal() * np.cos(k * y + rng.uniform(0, 6)) for k in (0.3, 0.7, 1.1)),
                  GRID)
        once = semigroup_apply(0.5, f)
        twice = semigroup_apply(0.2, semigroup_apply(0.3, f))
        inner = np.abs(y) <= GRID.y_max / 2
        assert np.max(np.abs(once.values - twice.values)[inner]) < 1e-8


def random_bounded_field(rng, grid):
    kind = rng.integers(3)
    y = grid.nodes
    if kind == 0:  # piecewise constant: the extremal case for the gradient bound
        jumps = np.sort(rng.uniform(-5, 5, size=rng.integers(1, 6)))
        levels = rng.uniform(-1, 1, size=len(jumps) + 1)
        return levels[np.searchsorted(jumps, y)]
    if kind == 1:
        return np.tanh(rng.uniform(0.5, 20) * (y - rng.uniform(-3, 3)))
    freqs = rng.uniform(0.1, 4, size=4)
    return sum(rng.normal() * np.sin(f * y + rng.uniform(0, 6)) for f in freqs)


def test_semigroup_gradient_bound_constant():
    # sharp constant of the bound is 1/sqrt(pi), attained by a sign function
    grid = GridSpec.from_spacing(12.0, 0.02)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        f = Field(random_bounded_field(rng, grid), grid)
        for theta in (0.05, 0.2, 1.0):
            g = semigroup_apply(theta, f)
            grad = np.gradient(g.values, grid.h)
            scale = math.exp(theta / 2) / math.sqrt(1 - math.exp(-theta)) * f.sup()
            worst = max(worst, np.max(np.abs(grad)) / scale)
    assert worst <= 1.1
    assert worst <= 1 / math.sqrt(math.pi) + 0.01


@settings(max_examples=10, deadline=None)
@given(st.floats(0.05, 2.0), st.floats(-2, 2), st.floats(-2, 2))
def test_semigroup_is_linear(theta, a, b):
    y = GRID.nodes
    f = Field(np.cos(y), GRID)
    g = Field(np.exp(-y * y / 9), GRID)
    lhs = semigroup_apply(theta, f.with_values(a * f.values + b * g.values)).values
    rhs = a * semigroup_apply(theta, f).values + b * semigroup_apply(theta, g).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + abs(a) + abs(b)) * math.exp(theta))
