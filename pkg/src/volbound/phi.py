"""Eigenfunction validation, construction, and martingale diagnostics.

The eigenfunction condition is the state-space ODE
(1/2) beta(z)^2 phi''(z) = phi(z) with phi positive and convex.
`verify_phi` checks a candidate pointwise, `solve_phi` builds one
numerically when no closed form is at hand, and the martingale checks
test the dynamic consequences on simulated ensembles: the discounted
process, its compensated form, and payoff-style stochastic integrals
all have to be flat in expectation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (
    ConfigurationError,
    DivergenceError,
    DomainError,
    InfeasibleError,
)
from .models import PhiFunction, ReferenceModel, SimConfig, StateDiffusion, simulate

__all__ = [
    "OdeResidualReport",
    "MartingaleTestReport",
    "verify_phi",
    "solve_phi",
    "martingale_check_U",
    "martingale_check_V",
    "martingale_check_integral",
    "semigroup_check",
]


@dataclass(frozen=True)
class OdeResidualReport:
    """Pointwise residuals of the eigenfunction ODE on a state grid."""

    grid: np.ndarray
    residuals: np.ndarray
    max_abs: float
    rel_scale: float
    positive: bool
    convex: bool
    passed: bool

    def __post_init__(self):
        if np.any(np.diff(self.grid) <= 0.0):
            raise DomainError("residual grid must be strictly increasing")


@dataclass(frozen=True)
class MartingaleTestReport:
    """Sample means of a tested process against its no-drift reference."""

    times: tuple
    means: tuple
    ses: tuple
    references: tuple
    z_scores: tuple
    verdict: bool

    def __post_init__(self):
        if any(se < 0.0 for se in self.ses):
            raise DomainError("standard errors cannot be negative")


def verify_phi(model: ReferenceModel, grid, tol: float) -> OdeResidualReport:
    """Evaluate (1/2) beta^2 phi'' - phi on a grid and judge it against tol.

    Pass requires the worst residual below tol relative to the larger of 1
    and the grid's phi scale, together with positivity and convexity of
    phi at every grid point.
    """
    if not tol > 0.0:
        raise DomainError(f"tolerance must be positive, got {tol}")
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise DomainError("grid must be a nonempty 1-d array")
    for z in grid:
        if not model.beta.contains(float(z)):
            raise DomainError(
                f"grid point {z} outside the open domain "
                f"({model.beta.lower}, {model.beta.upper})"
            )
    beta = np.asarray(model.beta(grid), dtype=np.float64)
    vals = np.asarray(model.phi(grid), dtype=np.float64)
    d2 = np.asarray(model.phi.deriv2(grid), dtype=np.float64)
    residuals = 0.5 * beta * beta * d2 - vals
    max_abs = float(np.max(np.abs(residuals)))
    rel_scale = float(np.max(np.abs(vals)))
    positive = bool(np.all(vals > 0.0))
    convex = bool(np.all(d2 >= 0.0))
    passed = max_abs <= tol * max(1.0, rel_scale) and positive and convex
    return OdeResidualReport(
        grid=grid,
        residuals=residuals,
        max_abs=max_abs,
        rel_scale=rel_scale,
        positive=positive,
        convex=convex,
        passed=passed,
    )


# ===== numeric construction =====


class _TwoSidedSolution:
    """Dense ODE solution glued from a left and a right integration leg."""

    def __init__(self, z_ref, left, right, component):
        self._z_ref = z_ref
        self._left = left
        self._right = right
        self._component = component

    def __call__(self, z):
        z_arr = np.atleast_1d(np.asarray(z, dtype=np.float64))
        out = np.empty_like(z_arr)
        right = z_arr >= self._z_ref
        if np.any(right):
            out[right] = self._right.sol(z_arr[right])[self._component]
        if np.any(~right):
            out[~right] = self._left.sol(z_arr[~right])[self._component]
        return float(out[0]) if np.ndim(z) == 0 else out


def _integrate_both(beta, z_ref, value, slope, z_lo, z_hi):
    def rhs(z, y):
        b = float(beta(z))
        return (y[1], 2.0 * y[0] / (b * b))

    legs = []
    for target in (z_hi, z_lo):
        sol = solve_ivp(
            rhs,
            (z_ref, target),
            (value, slope),
            method="DOP853",
            dense_output=True,
            rtol=1e-12,
            atol=1e-14 * max(1.0, value),
        )
        if not sol.success:
            raise DivergenceError(f"ODE integration failed toward {target}: {sol.message}")
        legs.append(sol)
    return legs


def solve_phi(
    beta: StateDiffusion,
    anchor: tuple,
    window: tuple,
    mesh: int = 512,
    slope: float | None = None,
) -> PhiFunction:
    """Construct a positive eigenfunction numerically on a window.

    With ``slope`` given, the solution is pinned by value and slope at the
    anchor (the ODE has a two-dimensional solution space, so both are
    needed to single one out). Without it, a shooting search picks the
    smallest anchor slope whose solution stays positive across the whole
    window, which is the minimal-growth choice.
    """
    z_ref, value = anchor
    z_lo, z_hi = window
    if not value > 0.0:
        raise DomainError(f"anchor value must be positive, got {value}")
    if not z_lo < z_hi:
        raise DomainError(f"window must be increasing, got ({z_lo}, {z_hi})")
    if not (beta.contains(z_lo) and beta.contains(z_hi)):
        raise DomainError(
            f"window ({z_lo}, {z_hi}) must sit strictly inside "
            f"({beta.lower}, {beta.upper})"
        )
    if not z_lo <= z_ref <= z_hi:
        raise DomainError(f"anchor state {z_ref} outside the window ({z_lo}, {z_hi})")
    if mesh < 8:
        raise ConfigurationError(f"mesh must have at least 8 points, got {mesh}")
    zs = np.linspace(z_lo, z_hi, mesh)
    bvals = np.asarray(beta(zs), dtype=np.float64)
    if not np.all(np.isfinite(bvals)) or np.any(bvals == 0.0):
        raise DomainError("beta is singular or vanishes on the window")

    if slope is not None:
        legs = _integrate_both(beta, z_ref, value, slope, z_lo, z_hi)
        chosen_slope = slope
    else:
        legs, chosen_slope = _shoot_positive(beta, z_ref, value, z_lo, z_hi, zs)

    right, left = legs
    val_fn = _TwoSidedSolution(z_ref, left, right, 0)
    d1_fn = _TwoSidedSolution(z_ref, left, right, 1)
    fd_h = max(1e-7, 1e-5 * (z_hi - z_lo))

    def d2_fn(z, _d1=d1_fn, _h=fd_h):
        # the dense legs extrapolate smoothly for the half-stencil that
        # pokes past a window edge, so no clamping is needed
        z_arr = np.atleast_1d(np.asarray(z, dtype=np.float64))
        out = (_d1(z_arr + _h) - _d1(z_arr - _h)) / (2.0 * _h)
        return float(out[0]) if np.ndim(z) == 0 else out

    vals = val_fn(zs)
    if not np.all(vals > 0.0):
        raise InfeasibleError(
            "no positive solution: the integrated eigenfunction crosses zero "
            f"on ({z_lo}, {z_hi}) with anchor slope {chosen_slope}"
        )
    resid = 0.5 * bvals * bvals * d2_fn(zs) - vals
    worst = float(np.max(np.abs(resid)))
    if worst > 1e-8 * max(1.0, float(np.max(np.abs(vals)))):
        raise DivergenceError(f"solved eigenfunction misses its residual target: {worst:.3e}")
    return PhiFunction(value=val_fn, deriv1=d1_fn, deriv2=d2_fn, provenance="ode-solver")


def _shoot_positive(beta, z_ref, value, z_lo, z_hi, zs):
    """Bisect the anchor slope down to the smallest positive-solution one."""

    def attempt(s):
        legs = _integrate_both(beta, z_ref, value, s, z_lo, z_hi)
        right, left = legs
        probe = _TwoSidedSolution(z_ref, left, right, 0)
        return legs, bool(np.all(probe(zs) > 0.0))

    s_good = 0.0
    legs_good, ok = attempt(s_good)
    step = max(1.0, abs(value))
    tries = 0
    while not ok:
        s_good += step
        step *= 2.0
        tries += 1
        if tries > 60:
            raise InfeasibleError("no positive solution found on the window")
        legs_good, ok = attempt(s_good)

    s_bad = s_good - max(1.0, abs(value))
    _, bad_ok = attempt(s_bad)
    tries = 0
    step = max(1.0, abs(value))
    while bad_ok:
        s_bad -= step
        step *= 2.0
        tries += 1
        if tries > 60:
            raise InfeasibleError(
                "every anchor slope keeps the solution positive; "
                "no minimal-growth boundary to shoot for"
            )
        _, bad_ok = attempt(s_bad)

    for _ in range(80):
        mid = 0.5 * (s_bad + s_good)
        legs_mid, ok = attempt(mid)
        if ok:
            s_good, legs_good = mid, legs_mid
        else:
            s_bad = mid
        if s_good - s_bad <= 1e-13 * max(1.0, abs(s_good)):
            break
    return legs_good, s_good


# ===== martingale diagnostics =====


def _check_times(times):
    times = [float(t) for t in times]
    if not times:
        raise DomainError("need at least one test time")
    if any(t < 0.0 for t in times) or any(b <= a for a, b in zip(times, times[1:])):
        raise DomainError(f"times must be strictly increasing and nonnegative: {times}")
    return times


def _summarize(times, samples, references):
    """Fold per-time sample vectors into a MartingaleTestReport."""
    means, ses, zs = [], [], []
    for x, ref in zip(samples, references):
        if np.all(x == x[0]):
            # degenerate sample: exact value, no noise
            mean, se = float(x[0]), 0.0
        else:
            mean = float(x.mean())
            se = float(x.std(ddof=1) / math.sqrt(x.size))
        diff = mean - ref
        if se > 0.0:
            z = diff / se
        else:
            z = 0.0 if diff == 0.0 else math.inf
        means.append(mean)
        ses.append(se)
        zs.append(z)
    verdict = all(abs(z) <= 3.0 for z in zs)
    return MartingaleTestReport(
        times=tuple(times),
        means=tuple(means),
        ses=tuple(ses),
        references=tuple(references),
        z_scores=tuple(zs),
        verdict=verdict,
    )


def _simulation_grid(times, extra=None):
    pts = {0.0, *times}
    if extra is not None:
        pts.update(float(x) for x in extra)
    return sorted(pts)


def _stopped_sq_integral(h, t, absorbed_at):
    """Per-path value of int_0^{min(t, tau)} h(s)^2 ds."""
    tau_eff = np.fmin(absorbed_at, t)  # fmin: NaN means never absorbed
    if h.is_unit:
        return tau_eff
    out = np.full(tau_eff.shape, h.sq_integral(0.0, t))
    stopped = tau_eff < t
    if np.any(stopped):
        out[stopped] = [h.sq_integral(0.0, float(x)) for x in tau_eff[stopped]]
    return out


def martingale_check_U(
    model: ReferenceModel, sigma: float, times, cfg: SimConfig
) -> MartingaleTestReport:
    """Test that the discounted eigenfunction process has constant mean.

    The tested object is exp(-sigma^2 int_0^{t ^ tau} h^2) phi(Z_{t ^ tau}):
    on paths absorbed at tau both the discount and the state freeze there,
    which is exactly the stopped process whose mean is phi(z0) at every t.
    """
    times = _check_times(times)
    grid = _simulation_grid(times)
    ens = simulate(model, sigma, model.z0, 0.0, grid, cfg)
    ref = float(model.phi(model.z0))
    idx = {t: i for i, t in enumerate(grid)}
    samples = []
    for t in times:
        states = ens.states[:, idx[t]]
        weight = np.exp(-sigma * sigma * _stopped_sq_integral(model.h, t, ens.absorbed_at))
        samples.append(weight * np.asarray(model.phi(states), dtype=np.float64))
    return _summarize(times, samples, [ref] * len(times))


def martingale_check_V(
    model: ReferenceModel,
    sigma: float,
    times,
    cfg: SimConfig,
    integration_points: int = 65,
) -> MartingaleTestReport:
    """Test the compensated form: phi(Z_t) minus its accumulated drift.

    The compensator sigma^2 int_0^{t ^ tau} h^2 phi(Z_s) ds is accumulated
    by the trapezoid rule on a refined grid; the integrand stops at the
    absorption time like the state does.
    """
    times = _check_times(times)
    if integration_points < 2:
        raise ConfigurationError("need at least 2 integration points")
    fine = np.linspace(0.0, times[-1], integration_points)
    grid = _simulation_grid(times, extra=np.union1d(fine, model.h.breakpoints))
    grid = [t for t in grid if t <= times[-1]]
    ens = simulate(model, sigma, model.z0, 0.0, grid, cfg)
    ref = float(model.phi(model.z0))
    garr = np.asarray(grid)
    phis = np.asarray(model.phi(ens.states), dtype=np.float64)
    tau = ens.absorbed_at[:, None]
    # per-segment overlap with [0, tau); h is constant on each segment
    seg_lo, seg_hi = garr[:-1][None, :], garr[1:][None, :]
    overlap = np.clip(np.fmin(tau, seg_hi) - seg_lo, 0.0, None)
    hsq = np.asarray([float(model.h(x)) ** 2 for x in garr[:-1]])
    increments = overlap * hsq[None, :] * 0.5 * (phis[:, :-1] + phis[:, 1:])
    cum = np.concatenate(
        [np.zeros((increments.shape[0], 1)), np.cumsum(increments, axis=1)], axis=1
    )
    idx = {t: i for i, t in enumerate(grid)}
    samples = []
    for t in times:
        i = idx[t]
        samples.append(phis[:, i] - sigma * sigma * cum[:, i])
    return _summarize(times, samples, [ref] * len(times))


def martingale_check_integral(
    model: ReferenceModel,
    g,
    sigma: float,
    times,
    cfg: SimConfig,
    g_left_deriv=None,
    integration_points: int = 65,
) -> MartingaleTestReport:
    """Test E[int_0^t g'_-(Z_s) dZ_s] = 0 for a convex integrand g.

    The integral uses the left-point rule, which makes the discrete sum an
    exact martingale transform of the simulated increments. Without an
    explicit left derivative a backward difference stands in; for the
    piecewise-linear g of interest it is exact away from the kink.
    """
    times = _check_times(times)
    fine = np.linspace(0.0, times[-1], integration_points)
    grid = _simulation_grid(times, extra=fine)
    ens = simulate(model, sigma, model.z0, 0.0, grid, cfg)
    states = ens.states
    if g_left_deriv is None:
        def g_left_deriv(z, _g=g):
            step = 1e-7 * np.maximum(1.0, np.abs(z))
            return (np.asarray(_g(z)) - np.asarray(_g(z - step))) / step

    slopes = np.asarray(g_left_deriv(states[:, :-1]), dtype=np.float64)
    increments = slopes * np.diff(states, axis=1)
    cum = np.concatenate(
        [np.zeros((states.shape[0], 1)), np.cumsum(increments, axis=1)], axis=1
    )
    idx = {t: i for i, t in enumerate(grid)}
    samples = [cum[:, idx[t]] for t in times]
    return _summarize(times, samples, [0.0] * len(times))


def semigroup_check(
    model: ReferenceModel, sigma: float, t: float, cfg: SimConfig
) -> MartingaleTestReport:
    """Test the eigenvalue identity E[phi(Z_t)] = exp(sigma^2 t) phi(z0).

    Only meaningful under a unit time weight, where the exponential tilt
    is the semigroup's action on its eigenfunction.
    """
    if not model.h.is_unit:
        raise ConfigurationError(
            "semigroup identity requires the unit time weight; "
            f"model {model.name!r} carries kind {model.h.kind!r}"
        )
    if not t > 0.0:
        raise DomainError(f"test time must be positive, got {t}")
    ens = simulate(model, sigma, model.z0, 0.0, [0.0, t], cfg)
    ref = math.exp(sigma * sigma * t) * float(model.phi(model.z0))
    sample = np.asarray(model.phi(ens.states[:, -1]), dtype=np.float64)
    return _summarize([t], [sample], [ref])
