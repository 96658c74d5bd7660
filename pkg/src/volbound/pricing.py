"""Call-option pricing and implied-volatility inversion.

Three pricing routes with different noise profiles: the lognormal closed
form (exact, gbm only), deterministic quadrature against the lognormal
transition density (noise-free, gbm only), and Monte Carlo over simulated
paths (any reference model, carries a standard error). Implied volatility
inverts whichever forward map the model supports and records which one
was used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .errors import ConfigurationError, DomainError, SearchError
from .models import ReferenceModel, SimConfig, simulate
from .special_functions import norm_cdf, norm_pdf

__all__ = [
    "PriceQuote",
    "ImpliedVolResult",
    "bs_call_price",
    "mc_call_price",
    "quad_call_price",
    "implied_vol",
]

#: default integration half-width, in standard-normal units, for the
#: quadrature pricer; the integrand is below 1e-40 beyond it
DEFAULT_WINDOW = 14.0


@dataclass(frozen=True)
class PriceQuote:
    """A priced expectation with its sampling error (zero when deterministic).

    Call prices are nonnegative, but the type is shared with signed
    expectations (eigenfunction tail terms), so only finiteness and a
    nonnegative error are enforced here.
    """

    value: float
    se: float
    n_paths: int

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.se >= 0.0):
            raise DomainError(
                f"quote must be finite with se >= 0, got value={self.value} se={self.se}"
            )


@dataclass(frozen=True)
class ImpliedVolResult:
    sigma: float
    iterations: int
    bracket: tuple[float, float]
    residual: float
    forward_map: str

    def __post_init__(self):
        lo, hi = self.bracket
        if not lo < self.sigma < hi:
            raise DomainError(
                f"implied vol {self.sigma} escaped its bracket [{lo}, {hi}]"
            )


def _bs_call_core(z, strike, variance):
    """Lognormal call value, vectorized; degenerate cells fall back to intrinsic.

    ``variance`` is the total log variance accumulated between evaluation
    and expiry. Cells with zero variance, zero strike, or an absorbed
    (zero) start take their exact limit values.
    """
    scalar = np.ndim(z) == 0 and np.ndim(strike) == 0 and np.ndim(variance) == 0
    z, strike, variance = np.broadcast_arrays(
        np.atleast_1d(np.asarray(z, dtype=np.float64)),
        np.atleast_1d(np.asarray(strike, dtype=np.float64)),
        np.atleast_1d(np.asarray(variance, dtype=np.float64)),
    )
    out = np.maximum(z - strike, 0.0)
    live = (strike > 0.0) & (variance > 0.0) & (z > 0.0)
    if np.any(live):
        s = np.sqrt(variance[live])
        d1 = (np.log(z[live] / strike[live]) + variance[live] / 2.0) / s
        vals = z[live] * norm_cdf(d1) - strike[live] * norm_cdf(d1 - s)
        out[live] = np.maximum(vals, 0.0)
    return float(out[0]) if scalar else out


def _validate_quote_args(t, T, strike, sigma, z):
    if not (math.isfinite(t) and math.isfinite(T) and T >= t):
        raise DomainError(f"need finite T >= t, got t={t} T={T}")
    if not (math.isfinite(strike) and strike >= 0.0):
        raise DomainError(f"strike must be nonnegative, got {strike}")
    if not (math.isfinite(z) and z >= 0.0):
        raise DomainError(f"start value must be nonnegative, got {z}")
    if not (math.isfinite(sigma) and sigma >= 0.0):
        raise DomainError(f"sigma must be nonnegative, got {sigma}")


def bs_call_price(t: float, T: float, strike: float, sigma: float, z: float) -> PriceQuote:
    """Closed-form lognormal call price with unit time weight.

    The zero-strike and zero-variance cases return their limits (the
    start value and the intrinsic value) rather than evaluating the
    formula, whose log-moneyness term is undefined there.
    """
    _validate_quote_args(t, T, strike, sigma, z)
    value = _bs_call_core(z, strike, sigma * sigma * (T - t))
    return PriceQuote(value=float(value), se=0.0, n_paths=0)


def mc_call_price(
    model: ReferenceModel,
    sigma: float,
    t: float,
    T: float,
    strike: float,
    z: float,
    cfg: SimConfig,
) -> PriceQuote:
    """Monte-Carlo call price; absorbed paths pay their frozen boundary value."""
    _validate_quote_args(t, T, strike, sigma, z)
    if T == t:
        return PriceQuote(value=max(z - strike, 0.0), se=0.0, n_paths=0)
    ens = simulate(model, sigma, z, t, [t, T], cfg)
    payoff = np.maximum(ens.states[:, -1] - strike, 0.0)
    n = payoff.size
    if np.all(payoff == payoff[0]):
        # degenerate sample (sigma=0 or an unreachable strike): exact, no noise
        return PriceQuote(value=float(payoff[0]), se=0.0, n_paths=n)
    value = float(payoff.mean())
    se = float(payoff.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return PriceQuote(value=value, se=se, n_paths=n)


def quad_call_price(
    model: ReferenceModel,
    sigma: float,
    t: float,
    T: float,
    strike: float,
    z: float,
    window: float = DEFAULT_WINDOW,
) -> PriceQuote:
    """Deterministic quadrature of the payoff against the transition density.

    Only models with a known transition density are supported; that means
    gbm, where log Z_T is normal with variance sigma^2 * int h^2. The
    integral runs over a finite window in standard-normal units so that a
    self-check can widen it and confirm the truncation is immaterial.
    """
    if model.name != "gbm":
        raise ConfigurationError(
            f"quadrature pricing needs a known transition density; "
            f"model {model.name!r} has none wired up"
        )
    _validate_quote_args(t, T, strike, sigma, z)
    if window <= 0.0:
        raise DomainError(f"integration window must be positive, got {window}")
    v = sigma * sigma * model.h.sq_integral(t, T)
    if v == 0.0 or z == 0.0:
        return PriceQuote(value=max(z - strike, 0.0), se=0.0, n_paths=0)
    s = math.sqrt(v)
    w_hi = s + window
    if strike == 0.0:
        w_lo = -window
    else:
        w_lo = (math.log(strike / z) + v / 2.0) / s
        if w_lo >= w_hi:
            return PriceQuote(value=0.0, se=0.0, n_paths=0)

    def integrand(w):
        x = z * math.exp(-v / 2.0 + s * w)
        return max(x - strike, 0.0) * norm_pdf(w)

    value, _ = quad(integrand, w_lo, w_hi, epsabs=1e-13, epsrel=1e-12, limit=200)
    return PriceQuote(value=max(value, 0.0), se=0.0, n_paths=0)


def _forward_map(model, t, T, strike, z):
    """Return (price_fn, slope_fn or None, label) for the model's pricer."""
    if model.name == "gbm":
        weight = model.h.sq_integral(t, T)

        def price(sig):
            return _bs_call_core(z, strike, sig * sig * weight)

        def slope(sig):
            v = sig * sig * weight
            if v == 0.0 or strike == 0.0:
                return 0.0
            d1 = (math.log(z / strike) + v / 2.0) / math.sqrt(v)
            return z * norm_pdf(d1) * math.sqrt(weight)

        return price, slope, "gbm-closed-form"

    def price(sig):
        return quad_call_price(model, sig, t, T, strike, z).value

    return price, None, f"{model.name}-quadrature"


def implied_vol(
    model: ReferenceModel,
    price: float,
    t: float,
    T: float,
    strike: float,
    z: float,
    tol: float = 1e-10,
) -> ImpliedVolResult:
    """Invert the model's forward map for the volatility matching ``price``.

    Bracketing plus bisection-safeguarded Newton. The loop runs to
    sigma-space bracket collapse, not just to the price tolerance: near
    degenerate cells the price curve is so flat that a price residual
    alone pins sigma to far fewer digits than the bracket does.
    """
    if not (math.isfinite(price) and math.isfinite(strike) and strike >= 0.0):
        raise DomainError(f"need finite price and nonnegative strike, got {price}, {strike}")
    if not (math.isfinite(z) and z > 0.0):
        raise DomainError(f"start value must be positive, got {z}")
    if T <= t:
        raise DomainError(f"no volatility is recoverable at zero maturity (t={t}, T={T})")
    if tol <= 0.0:
        raise DomainError(f"tolerance must be positive, got {tol}")
    intrinsic = max(z - strike, 0.0)
    if not intrinsic < price < z:
        raise DomainError(
            f"price {price} violates the arbitrage interior ({intrinsic}, {z})"
        )

    price_fn, slope_fn, label = _forward_map(model, t, T, strike, z)

    lo, hi = 1e-4, 5.0
    evals = 0
    f_lo = price_fn(lo) - price
    f_hi = price_fn(hi) - price
    evals += 2
    while f_lo > 0.0:
        lo /= 4.0
        if lo < 1e-12:
            raise SearchError(f"no bracket: price {price} below the sigma->0 limit")
        f_lo = price_fn(lo) - price
        evals += 1
    while f_hi < 0.0:
        hi *= 2.0
        if hi > 1024.0:
            raise SearchError(f"no bracket: price {price} above the large-sigma limit")
        f_hi = price_fn(hi) - price
        evals += 1
    if not f_lo <= 0.0 <= f_hi:
        raise SearchError("forward map is not monotone on the bracket")

    bracket = (lo, hi)
    sig = 0.5 * (lo + hi)
    width_mark = hi - lo
    for it in range(200):
        if hi - lo <= 1e-12 * max(1.0, lo):
            break
        f = price_fn(sig) - price
        evals += 1
        if f == 0.0:
            lo = hi = sig
            break
        if f > 0.0:
            hi = sig
        else:
            lo = sig
        # Newton is allowed only while the bracket keeps halving; otherwise
        # it can creep for hundreds of steps on exponentially flat tails
        force_bisect = it % 2 == 1 and (hi - lo) > 0.5 * width_mark
        if it % 2 == 1:
            width_mark = hi - lo
        step_ok = False
        if slope_fn is not None and not force_bisect:
            dv = slope_fn(sig)
            if dv > 0.0:
                cand = sig - f / dv
                if lo < cand < hi:
                    sig = cand
                    step_ok = True
        if not step_ok:
            sig = 0.5 * (lo + hi)

    sig = min(max(sig, lo), hi)
    b_lo, b_hi = bracket
    if sig <= b_lo:
        b_lo /= 2.0  # root sat exactly on the initial endpoint
    if sig >= b_hi:
        b_hi *= 2.0
    bracket = (b_lo, b_hi)
    residual = abs(price_fn(sig) - price)
    evals += 1
    if residual > tol:
        raise SearchError(
            f"implied-vol iteration stalled: residual {residual:.3e} above tol {tol:.3e}"
        )
    return ImpliedVolResult(
        sigma=float(sig),
        iterations=evals,
        bracket=bracket,
        residual=float(residual),
        forward_map=label,
    )
