"""Shared test oracles.

Every oracle here is computed by a route independent of the implementation it
checks (quadrature of integral representations, closed forms, or brute-force
refinement).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.integrate import quad


def bessel_k_oracle(order: int, x: float) -> float:
    """K_order(x) by adaptive quadrature of int_0^inf exp(-x cosh t) cosh(order t) dt.

    The integrand is evaluated in log space so cosh never overflows.
    """

    def f(t):
        if order == 0:
            logcosh = 0.0
        else:
            a = abs(order * t)
            logcosh = a + math.log1p(math.exp(-2.0 * a)) - math.log(2.0)
        e = -x * math.cosh(t) + logcosh
        return math.exp(e) if e > -745.0 else 0.0

    upper = math.acosh(760.0 / x) + 1.0 if x < 760.0 else 1.0
    val, _ = quad(f, 0.0, upper, epsabs=1e-300, epsrel=1e-13, limit=400)
    return val


def norm_cdf_oracle(x: float) -> float:
    """Phi(x) by adaptive quadrature of the density."""
    val, _ = quad(
        lambda u: math.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi),
        -60.0,
        x,
        epsabs=1e-15,
        limit=400,
    )
    return val


def lognormal_call_oracle(z: float, k: float, v: float) -> float:
    """E[(Z_T - k)^+] with Z_T = z*exp(-v/2 + sqrt(v) W), W standard normal.

    Quadrature of the payoff against the standard normal density; independent
    of both the closed-form pricer and the package quadrature pricer.
    """
    if v == 0.0:
        return max(z - k, 0.0)
    if k == 0.0:
        return z
    s = math.sqrt(v)
    w_k = (math.log(k / z) + 0.5 * v) / s

    def f(w):
        return (z * math.exp(-0.5 * v + s * w) - k) * math.exp(-0.5 * w * w) / math.sqrt(2.0 * math.pi)

    hi = max(w_k, s) + 40.0
    val, _ = quad(f, w_k, hi, epsabs=1e-16, epsrel=1e-13, limit=400)
    return val


def lognormal_phi_hat_oracle(z: float, k_m: float, v: float, phi) -> float:
    """E[(phi(Z_T) - phi(k_m)) 1{Z_T > k_m}] under the same lognormal law."""
    if v == 0.0:
        return max(phi(z) - phi(k_m), 0.0) if z > k_m else 0.0
    s = math.sqrt(v)
    w_k = (math.log(k_m / z) + 0.5 * v) / s

    def f(w):
        x = z * math.exp(-0.5 * v + s * w)
        return (phi(x) - phi(k_m)) * math.exp(-0.5 * w * w) / math.sqrt(2.0 * math.pi)

    hi = max(w_k, 2.0 * s) + 40.0
    val, _ = quad(f, w_k, hi, epsabs=1e-16, epsrel=1e-12, limit=400)
    return val
