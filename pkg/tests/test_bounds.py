import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embedcert.bounds import (
    ConfidenceInterval,
    IdenticalCentroidsError,
    clopper_pearson_lower,
    distance_ci,
    distance_cis,
    hoeffding_halfwidth,
    hoeffding_interval,
    paired_products,
    phi_lower_bound,
    procedure_error_probability,
    std_normal_quantile,
    xi_values,
)
import oracles

# frozen mpmath evaluations
T_N1000_A05 = 0.04294694083467376
PHI_SLACK_A1E3_N50000 = 0.006164779987778186
QUANTILE_09 = 1.2815515655446004
CP_100_OF_100_A1E3 = 0.933254300796991
CP_50_OF_100_A05 = 0.41362171463091176


class TestHoeffding:
    def test_example(self):
        assert hoeffding_halfwidth(1000, 1.0, 0.05) == pytest.approx(T_N1000_A05, abs=1e-15)

    def test_alpha_one_limit(self):
        assert hoeffding_halfwidth(1000, 1.0, 1.0) == pytest.approx(math.sqrt(math.log(2) / 2000), rel=1e-15)

    @given(st.integers(1, 10 ** 7), st.floats(1e-6, 0.99))
    def test_doubling_n_divides_by_sqrt2(self, n, alpha):
        a, b = hoeffding_halfwidth(n, 1.0, alpha), hoeffding_halfwidth(2 * n, 1.0, alpha)
        assert a / b == pytest.approx(math.sqrt(2), rel=1e-13)

    @given(st.floats(1e-3, 1e3), st.floats(1e-6, 0.99))
    def test_linear_in_range(self, width, alpha):
        assert hoeffding_halfwidth(50, width, alpha) == pytest.approx(width * hoeffding_halfwidth(50, 1.0, alpha),
                                                                      rel=1e-13)

    def test_interval_is_centered(self):
        ci = hoeffding_interval([0.0, 1.0, 1.0, 0.0], 1.0, 0.1)
        assert ci.lower + ci.upper == pytest.approx(1.0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            hoeffding_halfwidth(0, 1.0, 0.05)
        with pytest.raises(ValueError):
            ConfidenceInterval(1.0, 0.0, 0.05)


class TestDistanceCI:
    def test_paired_products_match_definition(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 3))
        b = rng.standard_normal((5, 3))
        c = rng.standard_normal((2, 3))
        direct = np.array([[np.dot(a[j] - ck, b[j] - ck) for ck in c] for j in range(5)])
        np.testing.assert_allclose(paired_products(a, b, c), direct, atol=1e-12)

    def test_zero_distance(self):
        c = np.array([1.0, 0.0])
        f = np.tile(c, (100, 1))
        ci = distance_ci(f, f, c, 0.01)
        assert ci.lower == 0.0 and not ci.degenerate
        assert ci.upper == pytest.approx(math.sqrt(hoeffding_halfwidth(100, 8.0, 0.01)))

    def test_orthogonal_constant(self):
        e, c = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        n, alpha = 400, 1e-3
        f = np.tile(e, (n, 1))
        t = 8 * math.sqrt(math.log(2 / alpha) / (2 * n))
        ci = distance_ci(f, f, c, alpha)
        assert ci.lower == pytest.approx(math.sqrt(2 - t), abs=1e-14)
        assert ci.upper == pytest.approx(math.sqrt(2 + t), abs=1e-14)
        assert math.sqrt(2) in ci

    def test_degenerate_when_upper_negative(self):
        c = np.array([1.0, 0.0])
        a = np.tile(np.array([1.0, 1.0]) / math.sqrt(2), (10 ** 6, 1))
        b = np.tile(np.array([1.0, -1.0]) / math.sqrt(2), (10 ** 6, 1))
        # every paired product is (1/sqrt2 - 1)^2 - 1/2 < 0
        ci = distance_ci(a, b, c, 0.5)
        assert ci.degenerate and ci.lower == ci.upper == 0.0

    @settings(max_examples=50)
    @given(st.integers(0, 10 ** 6), st.integers(2, 200))
    def test_contains_point_estimate(self, seed, n):
        rng = np.random.default_rng(seed)
        f = rng.standard_normal((2 * n, 4))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        c = np.array([0.0, 1.0, 0.0, 0.0])
        ci = distance_ci(f[:n], f[n:], c, 0.05)
        est = math.sqrt(max(0.0, paired_products(f[:n], f[n:], c).mean()))
        assert ci.lower <= est <= ci.upper

    def test_vectorized_matches_single(self):
        rng = np.random.default_rng(1)
        f = rng.standard_normal((60, 3))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        cents = np.eye(3)
        many = distance_cis(f[:30], f[30:], cents, 0.01)
        for k in range(3):
            one = distance_ci(f[:30], f[30:], cents[k], 0.01)
            assert one.lower == pytest.approx(many[k].lower, abs=1e-14)
            assert one.upper == pytest.approx(many[k].upper, abs=1e-14)

    def test_mismatched_halves(self):
        with pytest.raises(ValueError):
            distance_ci(np.ones((3, 2)), np.ones((4, 2)), np.array([1.0, 0.0]), 0.1)


class TestPhi:
    def test_slack_example(self):
        c1, c2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        f = np.tile(c1, (10 ** 5, 1))
        phi = phi_lower_bound(f, c1, c2, 1e-3)
        assert 0.5 + 1 / (2 * math.sqrt(2)) - phi == pytest.approx(PHI_SLACK_A1E3_N50000, abs=1e-12)

    def test_xi_constant(self):
        c1, c2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        xi = xi_values(np.tile(c1, (4, 1)), c1, c2)
        np.testing.assert_allclose(xi, 1 / (2 * math.sqrt(2)), rtol=1e-15)

    def test_negative_phi_allowed(self):
        c1, c2 = np.array([1.0, 0.0]), np.array([-1.0, 0.0])
        assert phi_lower_bound(np.tile(c2, (10, 1)), c1, c2, 0.1) < 0

    def test_identical_centroids(self):
        c = np.array([1.0, 0.0])
        with pytest.raises(IdenticalCentroidsError):
            phi_lower_bound(np.tile(c, (4, 1)), c, c, 0.1)

    def test_non_unit_samples_trip_assertion(self):
        c1, c2 = np.array([1.0, 0.0]), np.array([-1.0, 0.0])
        with pytest.raises(AssertionError):
            xi_values(np.array([[3.0, 0.0]]), c1, c2)

    @settings(max_examples=100)
    @given(st.integers(0, 10 ** 6))
    def test_xi_in_range(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.standard_normal((50, 5))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        assert np.all(np.abs(xi_values(v[2:], v[0], v[1])) <= 0.5 + 1e-12)


class TestClopperPearson:
    def test_no_successes(self):
        assert clopper_pearson_lower(0, 100, 0.05) == 0.0

    def test_all_successes(self):
        assert clopper_pearson_lower(100, 100, 1e-3) == pytest.approx(CP_100_OF_100_A1E3, abs=1e-15)

    def test_half(self):
        assert clopper_pearson_lower(50, 100, 0.05) == pytest.approx(CP_50_OF_100_A05, abs=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 400), st.data())
    def test_matches_mpmath(self, n, data):
        k = data.draw(st.integers(1, n))
        alpha = data.draw(st.sampled_from([1e-3, 0.01, 0.05, 0.2]))
        assert clopper_pearson_lower(k, n, alpha) == pytest.approx(
            oracles.clopper_pearson_lower(k, n, alpha), abs=1e-11)

    @given(st.integers(2, 300), st.data())
    def test_monotone(self, n, data):
        k = data.draw(st.integers(0, n - 1))
        a1 = data.draw(st.floats(1e-4, 0.5))
        a2 = data.draw(st.floats(a1, 0.9))
        assert clopper_pearson_lower(k, n, a1) <= clopper_pearson_lower(k + 1, n, a1)
        assert clopper_pearson_lower(k, n, a2) >= clopper_pearson_lower(k, n, a1) - 1e-13

    def test_invalid(self):
        with pytest.raises(ValueError):
            clopper_pearson_lower(5, 4, 0.05)


class TestQuantile:
    def test_examples(self):
        assert std_normal_quantile(0.5) == 0.0
        assert std_normal_quantile(0.9) == pytest.approx(QUANTILE_09, abs=1e-12)

    @settings(max_examples=300)
    @given(st.floats(1e-15, 1 - 1e-15))
    def test_against_mpmath(self, p):
        assert abs(std_normal_quantile(p) - oracles.normal_quantile(p)) < 1e-9

    @pytest.mark.parametrize("p", [1e-15, 1e-10, 1e-5, 0.02425, 0.3, 0.97575, 1 - 1e-10, 1 - 1e-15])
    def test_region_edges(self, p):
        assert abs(std_normal_quantile(p) - oracles.normal_quantile(p)) < 1e-9

    @given(st.floats(0.5, 1 - 1e-12))
    def test_symmetry(self, p):
        # 1 - p is exact for p >= 1/2
        assert std_normal_quantile(p) == pytest.approx(-std_normal_quantile(1 - p), abs=1e-12)

    def test_clamped(self):
        assert std_normal_quantile(0.0) == std_normal_quantile(1e-15)
        assert std_normal_quantile(1.0) == std_normal_quantile(1 - 1e-15)


class TestErrorProbability:
    def test_zero_alpha(self):
        assert procedure_error_probability(0.0, 5) == 0.0

    @pytest.mark.parametrize("K", [2, 118, 1118])
    def test_oracle(self, K):
        assert procedure_error_probability(1e-3, K) == pytest.approx(oracles.error_probability(1e-3, K), abs=1e-15)

    def test_small_k_rejected(self):
        with pytest.raises(ValueError):
            procedure_error_probability(0.1, 1)
