"""Reference diffusion families dZ = sigma h(t) beta(Z) dB and their
convex eigenfunctions phi solving (1/2) beta^2 phi'' = phi.

Simulation is organized in fixed-size path blocks, each with its own RNG
substream, so ensembles are bit-identical for a given seed no matter how many
workers process the blocks.
"""

from __future__ import annotations

import bisect
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DomainError
from .special_functions import bessel_k

__all__ = [
    "TimeWeight",
    "StateDiffusion",
    "PhiFunction",
    "ReferenceModel",
    "SimConfig",
    "PathEnsemble",
    "builtin_model",
    "h_sq_integral",
    "simulate",
    "rng_substream",
    "worker_count",
    "WORKERS_ENV_VAR",
]

WORKERS_ENV_VAR = "VOLBOUND_WORKERS"


# ===== deterministic time weight =====


@dataclass(frozen=True)
class TimeWeight:
    """Deterministic weight h(t), constant or piecewise constant.

    values[i] applies on [breakpoints[i-1], breakpoints[i]); the first piece
    extends to -inf and the last to +inf. All values must be positive, so h
    never vanishes.
    """

    values: tuple[float, ...]
    breakpoints: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        values = tuple(float(v) for v in self.values)
        breakpoints = tuple(float(b) for b in self.breakpoints)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "breakpoints", breakpoints)
        if len(values) != len(breakpoints) + 1:
            raise ConfigurationError(
                f"need len(values) == len(breakpoints) + 1, got {len(values)} and {len(breakpoints)}"
            )
        if not all(v > 0.0 and math.isfinite(v) for v in values):
            raise ConfigurationError("time weight values must be positive and finite")
        if any(b1 >= b2 for b1, b2 in zip(breakpoints, breakpoints[1:])):
            raise ConfigurationError("breakpoints must be strictly increasing")

    @property
    def kind(self) -> str:
        return "constant" if len(self.values) == 1 else "piecewise-constant"

    @property
    def is_unit(self) -> bool:
        return len(self.values) == 1 and self.values[0] == 1.0

    def __call__(self, t: float) -> float:
        return self.values[bisect.bisect_right(self.breakpoints, t)]

    def sq_integral(self, a: float, b: float) -> float:
        """Integral of h(s)^2 over [a, b] in closed form."""
        if b < a:
            raise DomainError(f"integration bounds reversed: [{a}, {b}]")
        if b == a:
            return 0.0
        edges = [a] + [t for t in self.breakpoints if a < t < b] + [b]
        total = 0.0
        for lo, hi in zip(edges, edges[1:]):
            v = self(lo)
            total += v * v * (hi - lo)
        return total


def h_sq_integral(h: TimeWeight, a: float, b: float) -> float:
    """Closed-form integral of h^2 over [a, b]."""
    return h.sq_integral(a, b)


# ===== state diffusion and eigenfunction =====


@dataclass(frozen=True)
class StateDiffusion:
    """State-dependent diffusion coefficient beta on an open interval domain."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    lower: float
    upper: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.lower < self.upper):
            raise DomainError(f"domain ({self.lower}, {self.upper}) must satisfy 0 <= lower < upper")

    def __call__(self, z):
        return self.evaluator(z)

    def contains(self, z: float) -> bool:
        return self.lower < z < self.upper

    def in_closure(self, z: float) -> bool:
        return self.lower <= z <= self.upper


@dataclass(frozen=True)
class PhiFunction:
    """Positive convex solution of (1/2) beta^2 phi'' = phi with derivatives.

    All three callables accept floats or numpy arrays.
    """

    value: Callable
    deriv1: Callable
    deriv2: Callable
    provenance: str = "closed-form"

    def __call__(self, z):
        return self.value(z)

    def scaled(self, c: float) -> "PhiFunction":
        """The eigenfunction c*phi (any c > 0 solves the same ODE)."""
        if not c > 0.0:
            raise DomainError("scale factor must be positive")
        return PhiFunction(
            value=lambda z: c * self.value(z),
            deriv1=lambda z: c * self.deriv1(z),
            deriv2=lambda z: c * self.deriv2(z),
            provenance=self.provenance,
        )


@dataclass(frozen=True)
class ReferenceModel:
    """A reference diffusion dZ = sigma h(t) beta(Z) dB with eigenfunction phi."""

    name: str
    h: TimeWeight
    beta: StateDiffusion
    phi: PhiFunction
    z0: float

    def __post_init__(self) -> None:
        if not self.beta.contains(self.z0):
            raise DomainError(
                f"initial state {self.z0} outside open domain ({self.beta.lower}, {self.beta.upper})"
            )


# ===== builtin models =====


def _phi_bessel0_value(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.ones_like(z)
    pos = z > 0.0
    if np.any(pos):
        u = 2.0 * np.sqrt(2.0 * z[pos])
        out[pos] = u * bessel_k(1, u)
    return float(out) if out.ndim == 0 else out


def _phi_bessel0_deriv1(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.full_like(z, -np.inf)
    pos = z > 0.0
    if np.any(pos):
        u = 2.0 * np.sqrt(2.0 * z[pos])
        out[pos] = -4.0 * bessel_k(0, u)
    return float(out) if out.ndim == 0 else out


def _phi_bessel0_deriv2(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.full_like(z, np.inf)
    pos = z > 0.0
    if np.any(pos):
        u = 2.0 * np.sqrt(2.0 * z[pos])
        out[pos] = 4.0 * math.sqrt(2.0) * bessel_k(1, u) / np.sqrt(z[pos])
    return float(out) if out.ndim == 0 else out


def _phi_logdiff_value(z):
    z = np.asarray(z, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = -np.log(z)
    return float(out) if out.ndim == 0 else out


def builtin_model(name: str, z0: float | None = None) -> ReferenceModel:
    """Construct one of the builtin reference models: gbm, bessel0, logdiff.

    gbm:     beta(z) = z on (0, inf), phi(z) = z^2.
    bessel0: beta(z) = sqrt(z) on (0, inf), phi(z) = 2 sqrt(2z) K1(2 sqrt(2z)),
             which decreases from 1 at 0+ to 0 at infinity; paths absorb at 0.
    logdiff: beta(z) = z sqrt(-2 ln z) on (0, 1), phi(z) = -ln z; paths absorb
             at both endpoints, and phi vanishes at 1 (positivity holds only in
             the open interval).
    """
    if name == "gbm":
        return ReferenceModel(
            name="gbm",
            h=TimeWeight(values=(1.0,)),
            beta=StateDiffusion(lambda z: np.asarray(z, dtype=np.float64), 0.0, math.inf),
            phi=PhiFunction(
                value=lambda z: np.square(np.asarray(z, dtype=np.float64)),
                deriv1=lambda z: 2.0 * np.asarray(z, dtype=np.float64),
                deriv2=lambda z: np.full_like(np.asarray(z, dtype=np.float64), 2.0),
            ),
            z0=1.0 if z0 is None else float(z0),
        )
    if name == "bessel0":
        return ReferenceModel(
            name="bessel0",
            h=TimeWeight(values=(1.0,)),
            beta=StateDiffusion(
                lambda z: np.sqrt(np.maximum(np.asarray(z, dtype=np.float64), 0.0)),
                0.0,
                math.inf,
            ),
            phi=PhiFunction(_phi_bessel0_value, _phi_bessel0_deriv1, _phi_bessel0_deriv2),
            z0=1.0 if z0 is None else float(z0),
        )
    if name == "logdiff":

        def beta_logdiff(z):
            z = np.asarray(z, dtype=np.float64)
            with np.errstate(divide="ignore", invalid="ignore"):
                val = z * np.sqrt(np.maximum(-2.0 * np.log(z), 0.0))
            return np.where(z > 0.0, val, 0.0)

        def d1(z):
            z = np.asarray(z, dtype=np.float64)
            with np.errstate(divide="ignore"):
                out = -1.0 / z
            return float(out) if out.ndim == 0 else out

        def d2(z):
            z = np.asarray(z, dtype=np.float64)
            with np.errstate(divide="ignore"):
                out = 1.0 / np.square(z)
            return float(out) if out.ndim == 0 else out

        return ReferenceModel(
            name="logdiff",
            h=TimeWeight(values=(1.0,)),
            beta=StateDiffusion(beta_logdiff, 0.0, 1.0),
            phi=PhiFunction(_phi_logdiff_value, d1, d2),
            z0=0.5 if z0 is None else float(z0),
        )
    raise ConfigurationError(f"unknown builtin model {name!r}; expected gbm, bessel0 or logdiff")


# ===== simulation =====


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo controls.

    block_size fixes the path-to-substream assignment: path p lives in block
    p // block_size, and block b always draws from rng_substream(seed, b).
    Worker count therefore never changes results, only wall time.
    """

    n_paths: int
    dt: float
    seed: int
    scheme: str = "euler-maruyama"
    block_size: int = 16384
    n_workers: int | None = None

    def __post_init__(self) -> None:
        if self.n_paths < 1:
            raise ConfigurationError("n_paths must be >= 1")
        if not (self.dt > 0.0 and math.isfinite(self.dt)):
            raise ConfigurationError("dt must be positive and finite")
        if self.scheme not in ("euler-maruyama", "exact-gbm"):
            raise ConfigurationError(f"unknown scheme {self.scheme!r}")
        if self.block_size < 1:
            raise ConfigurationError("block_size must be >= 1")


@dataclass(frozen=True)
class PathEnsemble:
    """Simulated paths sampled on time_grid.

    states[p, j] is path p at time_grid[j]; absorbed paths are frozen at the
    boundary value from their absorption time onward. absorbed_at[p] is nan
    for paths that never left the open domain.
    """

    time_grid: np.ndarray
    states: np.ndarray
    absorbed_at: np.ndarray
    sigma: float

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]


def rng_substream(seed: int, worker: int) -> np.random.Generator:
    """Dedicated RNG stream for (seed, worker), stable across runs and platforms."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(worker),))
    return np.random.Generator(np.random.Philox(ss))


def child_rng(seed: int, *key: int) -> np.random.Generator:
    """Nested substream, e.g. per-path inner Monte Carlo."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def worker_count(cfg: SimConfig) -> int:
    if cfg.n_workers is not None:
        return max(1, int(cfg.n_workers))
    env = os.environ.get(WORKERS_ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigurationError(f"{WORKERS_ENV_VAR} must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def _refine_grid(
    time_grid: np.ndarray, dt: float, breakpoints: tuple[float, ...]
) -> tuple[np.ndarray, np.ndarray]:
    """Union of user grid, h breakpoints and dt substeps.

    Returns (fine_grid, store_idx) with fine_grid[store_idx] == time_grid
    exactly; every step of fine_grid is <= dt.
    """
    t0, t1 = time_grid[0], time_grid[-1]
    anchors = np.array(sorted(set(time_grid.tolist()) | {b for b in breakpoints if t0 < b < t1}))
    fine = []
    for a, b in zip(anchors, anchors[1:]):
        n_sub = max(1, math.ceil((b - a) / dt - 1e-12))
        seg = a + (b - a) * np.arange(n_sub) / n_sub
        fine.append(seg)
    fine.append(np.array([t1]))
    fine_grid = np.concatenate(fine) if fine else np.array([t0])
    store_idx = np.searchsorted(fine_grid, time_grid)
    if not np.array_equal(fine_grid[store_idx], time_grid):
        raise AssertionError("internal grid refinement lost a user point")
    return fine_grid, store_idx


def _euler_block(
    model: ReferenceModel,
    sigma: float,
    z_start: float,
    fine_grid: np.ndarray,
    store_idx: np.ndarray,
    rng: np.random.Generator,
    n: int,
) -> tuple[np.ndarray, np.ndarray]:
    lower, upper = model.beta.lower, model.beta.upper
    z = np.full(n, float(z_start))
    absorbed_at = np.full(n, np.nan)
    if z_start == lower or z_start == upper:
        absorbed_at[:] = fine_grid[0]
    out = np.empty((n, len(store_idx)))
    store_pos = {int(j): col for col, j in enumerate(store_idx)}
    if 0 in store_pos:
        out[:, store_pos[0]] = z
    alive = np.isnan(absorbed_at)
    for j in range(len(fine_grid) - 1):
        t_lo = fine_grid[j]
        step_dt = fine_grid[j + 1] - t_lo
        # one draw per path per step regardless of absorption, so the stream
        # position never depends on path history
        xi = rng.standard_normal(n)
        if sigma != 0.0:
            vol = sigma * model.h(float(t_lo)) * math.sqrt(step_dt)
            z_new = z + vol * model.beta(z) * xi
            z = np.where(alive, z_new, z)
            hit_lo = alive & (z <= lower)
            z[hit_lo] = lower
            absorbed_at[hit_lo] = fine_grid[j + 1]
            if math.isfinite(upper):
                hit_hi = alive & (z >= upper)
                z[hit_hi] = upper
                absorbed_at[hit_hi] = fine_grid[j + 1]
            alive = np.isnan(absorbed_at)
        col = store_pos.get(j + 1)
        if col is not None:
            out[:, col] = z
    return out, absorbed_at


def _exact_gbm_block(
    model: ReferenceModel,
    sigma: float,
    z_start: float,
    time_grid: np.ndarray,
    rng: np.random.Generator,
    n: int,
) -> tuple[np.ndarray, np.ndarray]:
    z = np.full(n, float(z_start))
    out = np.empty((n, len(time_grid)))
    out[:, 0] = z
    for j in range(len(time_grid) - 1):
        v = sigma * sigma * model.h.sq_integral(float(time_grid[j]), float(time_grid[j + 1]))
        if v > 0.0:
            xi = rng.standard_normal(n)
            z = z * np.exp(-0.5 * v + math.sqrt(v) * xi)
        out[:, j + 1] = z
    return out, np.full(n, np.nan)


def _block_sizes(n_paths: int, block_size: int) -> list[int]:
    full, rem = divmod(n_paths, block_size)
    return [block_size] * full + ([rem] if rem else [])


def simulate(
    model: ReferenceModel,
    sigma: float,
    z_start: float,
    t_start: float,
    time_grid,
    cfg: SimConfig,
) -> PathEnsemble:
    """Simulate the reference diffusion from (t_start, z_start) on time_grid.

    States are stored exactly at the requested grid times; integration between
    them uses steps of size at most cfg.dt (euler-maruyama) or the exact
    lognormal transition (exact-gbm, gbm only). A path whose proposed step
    leaves the open domain is set to the nearest boundary and frozen there.
    """
    if sigma < 0.0 or not math.isfinite(sigma):
        raise DomainError(f"sigma must be a finite nonnegative real, got {sigma}")
    grid = np.asarray(time_grid, dtype=np.float64)
    if grid.ndim != 1 or len(grid) < 1:
        raise DomainError("time_grid must be a nonempty 1-d sequence")
    if grid[0] != t_start:
        raise DomainError(f"time_grid must start at t_start ({t_start}), got {grid[0]}")
    if np.any(np.diff(grid) <= 0.0):
        raise DomainError("time_grid must be strictly increasing")
    if not model.beta.in_closure(z_start):
        raise DomainError(
            f"z_start {z_start} outside domain closure [{model.beta.lower}, {model.beta.upper}]"
        )
    if cfg.scheme == "exact-gbm" and model.name != "gbm":
        raise ConfigurationError("exact-gbm sampling requires the gbm model")

    sizes = _block_sizes(cfg.n_paths, cfg.block_size)
    if cfg.scheme == "exact-gbm":
        def run_block(args):
            b, nb = args
            return _exact_gbm_block(model, sigma, z_start, grid, rng_substream(cfg.seed, b), nb)
    else:
        fine_grid, store_idx = _refine_grid(grid, cfg.dt, model.h.breakpoints)

        def run_block(args):
            b, nb = args
            return _euler_block(
                model, sigma, z_start, fine_grid, store_idx, rng_substream(cfg.seed, b), nb
            )

    jobs = list(enumerate(sizes))
    n_workers = worker_count(cfg)
    if n_workers == 1 or len(jobs) == 1:
        results = [run_block(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run_block, jobs))
    states = np.concatenate([r[0] for r in results], axis=0)
    absorbed = np.concatenate([r[1] for r in results], axis=0)
    return PathEnsemble(time_grid=grid, states=states, absorbed_at=absorbed, sigma=float(sigma))
