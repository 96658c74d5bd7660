import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volbound import special_functions as sf
from volbound.special_functions import AccuracySpec, bessel_k, norm_cdf, norm_pdf

from conftest import bessel_k_oracle, norm_cdf_oracle

# Oracle values frozen from quadrature (see conftest for the oracle routes).
PHI_TABLE = {
    -2.0: 0.022750131948179205,
    -1.0: 0.15865525393145707,
    0.5: 0.6914624612740131,
    1.0: 0.8413447460685431,
    2.5: 0.9937903346742238,
}
K_TABLE = {
    (0, 0.1): 2.4270690247020164,
    (0, 1.0): 0.4210244382407083,
    (0, 20.0): 5.741237815336524e-10,
    (1, 0.1): 9.853844780870604,
    (1, 1.0): 0.6019072301972345,
    (1, 20.0): 5.883057969557038e-10,
}


class TestNormCdf:
    def test_at_zero(self):
        assert norm_cdf(0.0) == 0.5

    def test_frozen_quadrature_values(self):
        for x, ref in PHI_TABLE.items():
            assert abs(norm_cdf(x) - ref) <= 1e-12

    def test_reflection(self):
        for x in (0.5, 1.0, 2.0, 7.3):
            assert abs(norm_cdf(x) + norm_cdf(-x) - 1.0) <= 1e-14

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            norm_cdf(float("nan"))
        with pytest.raises(ValueError):
            norm_cdf(float("inf"))

    def test_array_input(self):
        xs = np.array([-1.0, 0.0, 1.0])
        out = norm_cdf(xs)
        assert out.shape == xs.shape
        assert out[1] == 0.5

    @given(st.floats(-8.0, 8.0), st.floats(-8.0, 8.0))
    @settings(max_examples=200, deadline=None)
    def test_monotone_and_bounded(self, a, b):
        fa, fb = norm_cdf(a), norm_cdf(b)
        assert 0.0 <= fa <= 1.0
        if a <= b:
            assert fa <= fb


def test_norm_pdf_matches_derivative_of_cdf():
    for x in (-1.5, 0.0, 0.7, 2.2):
        h = 1e-6
        fd = (norm_cdf(x + h) - norm_cdf(x - h)) / (2.0 * h)
        assert abs(fd - norm_pdf(x)) < 1e-9


class TestBesselK:
    def test_frozen_oracle_values(self):
        for (order, x), ref in K_TABLE.items():
            assert bessel_k(order, x) == pytest.approx(ref, rel=1e-12)

    def test_oracle_sweep(self):
        # the acceptance suite runs the full 50-point sweep; spot-check here
        for x in (0.1, 0.9, 3.3, 8.0, 12.0, 18.0):
            for order in (0, 1):
                ref = bessel_k_oracle(order, x)
                assert bessel_k(order, x) == pytest.approx(ref, rel=1e-11)

    def test_small_x_limit_of_x_k1(self):
        # x*K1(x) -> 1 as x -> 0
        assert abs(1e-6 * bessel_k(1, 1e-6) - 1.0) < 1e-10
        assert abs(1e-4 * bessel_k(1, 1e-4) - 1.0) < 1e-6

    def test_recurrence_k0_from_k1(self):
        # K0(x) = -K1'(x) - K1(x)/x, K1' by central differences
        for x in (0.5, 1.7, 4.2, 10.0, 18.0):
            h = x * 1e-6
            d = (bessel_k(1, x + h) - bessel_k(1, x - h)) / (2.0 * h)
            lhs = bessel_k(0, x)
            rhs = -d - bessel_k(1, x) / x
            assert abs(lhs - rhs) < 1e-8 * max(1.0, abs(lhs))

    def test_ordering_and_positivity(self):
        xs = np.geomspace(0.05, 40.0, 60)
        k0 = bessel_k(0, xs)
        k1 = bessel_k(1, xs)
        assert np.all(k0 > 0.0) and np.all(k1 > 0.0)
        assert np.all(k1 > k0)
        assert np.all(np.diff(k0) < 0.0) and np.all(np.diff(k1) < 0.0)
        assert np.all(np.isfinite(k0)) and np.all(np.isfinite(k1))

    def test_crossover_consistency(self):
        # adjacent regimes evaluated at the same x must agree
        for x in (sf.SERIES_MAX, 1.5):
            xa = np.array([x])
            assert sf._k_series(0, xa)[0] == pytest.approx(sf._k_steed(xa)[0][0], rel=1e-11)
            assert sf._k_series(1, xa)[0] == pytest.approx(sf._k_steed(xa)[1][0], rel=1e-11)
        for x in (sf.ASYMPTOTIC_MIN, 18.0):
            xa = np.array([x])
            assert sf._k_steed(xa)[0][0] == pytest.approx(
                sf._k_asymptotic(0, xa, 1e-14)[0], rel=1e-12
            )
            assert sf._k_steed(xa)[1][0] == pytest.approx(
                sf._k_asymptotic(1, xa, 1e-14)[0], rel=1e-12
            )

    def test_scalar_array_agree_bitwise(self):
        for x in (0.3, 2.7, 17.0):
            assert bessel_k(1, x) == bessel_k(1, np.array([x, x]))[0]

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            bessel_k(0, 0.0)
        with pytest.raises(ValueError):
            bessel_k(1, -1.0)
        with pytest.raises(ValueError):
            bessel_k(2, 1.0)
        with pytest.raises(ValueError):
            bessel_k(0, float("nan"))

    @given(st.floats(0.01, 30.0), st.floats(0.01, 30.0))
    @settings(max_examples=150, deadline=None)
    def test_strictly_decreasing_property(self, a, b):
        lo, hi = min(a, b), max(a, b)
        if hi - lo < 1e-9 * hi:
            return
        assert bessel_k(0, lo) > bessel_k(0, hi)
        assert bessel_k(1, lo) > bessel_k(1, hi)


def test_accuracy_spec_validation():
    with pytest.raises(ValueError):
        AccuracySpec(rel_tol=0.0)
    with pytest.raises(ValueError):
        AccuracySpec(abs_tol=-1.0)
    spec = AccuracySpec(rel_tol=1e-10)
    assert bessel_k(0, 5.0, acc=spec) == pytest.approx(bessel_k(0, 5.0), rel=1e-9)
