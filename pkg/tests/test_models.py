import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volbound.errors import ConfigurationError, DomainError
from volbound.models import (
    PathEnsemble,
    SimConfig,
    TimeWeight,
    builtin_model,
    h_sq_integral,
    rng_substream,
    simulate,
)


# ===== time weight =====


class TestTimeWeight:
    def test_constant(self):
        h = TimeWeight(values=(2.0,))
        assert h.kind == "constant"
        assert h(0.0) == 2.0 and h(100.0) == 2.0
        assert h_sq_integral(h, 0.0, 3.0) == pytest.approx(12.0)

    def test_piecewise(self):
        h = TimeWeight(values=(1.0, 2.0), breakpoints=(1.0,))
        assert h.kind == "piecewise-constant"
        assert h(0.5) == 1.0
        assert h(1.0) == 2.0  # right-continuous at the breakpoint
        assert h_sq_integral(h, 0.0, 2.0) == pytest.approx(5.0)
        assert h_sq_integral(h, 0.5, 1.5) == pytest.approx(0.5 + 2.0)

    def test_degenerate_interval(self):
        h = TimeWeight(values=(1.5,))
        assert h_sq_integral(h, 1.0, 1.0) == 0.0

    def test_reversed_bounds_rejected(self):
        h = TimeWeight(values=(1.0,))
        with pytest.raises(DomainError):
            h_sq_integral(h, 2.0, 1.0)

    def test_invalid_construction(self):
        with pytest.raises(ConfigurationError):
            TimeWeight(values=(1.0, 2.0))  # missing breakpoint
        with pytest.raises(ConfigurationError):
            TimeWeight(values=(0.0,))  # h must not vanish
        with pytest.raises(ConfigurationError):
            TimeWeight(values=(1.0, 2.0, 3.0), breakpoints=(2.0, 1.0))

    @given(
        st.floats(0.0, 5.0),
        st.floats(0.0, 5.0),
        st.floats(0.0, 5.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_additivity(self, a, b, c):
        ts = sorted((a, b, c))
        h = TimeWeight(values=(1.0, 0.5, 2.0), breakpoints=(1.0, 3.0))
        whole = h_sq_integral(h, ts[0], ts[2])
        split = h_sq_integral(h, ts[0], ts[1]) + h_sq_integral(h, ts[1], ts[2])
        assert whole == pytest.approx(split, abs=1e-12)


# ===== builtin models =====


class TestBuiltins:
    def test_gbm(self):
        m = builtin_model("gbm")
        assert m.z0 == 1.0
        assert m.phi(2.0) == 4.0
        assert m.phi.deriv1(2.0) == 4.0
        assert m.phi.deriv2(7.0) == 2.0
        assert float(m.beta(3.0)) == 3.0

    def test_bessel0_phi_limits(self):
        m = builtin_model("bessel0")
        assert m.phi(0.0) == 1.0
        zs = np.geomspace(1e-6, 50.0, 80)
        vals = m.phi(zs)
        assert np.all(np.diff(vals) < 0.0)
        assert vals[0] > 0.999
        assert vals[-1] < 1e-6

    def test_bessel0_derivatives_match_finite_differences(self):
        m = builtin_model("bessel0")
        for z in (0.1, 0.7, 2.0, 5.0):
            h = z * 1e-6
            fd1 = (m.phi(z + h) - m.phi(z - h)) / (2 * h)
            assert m.phi.deriv1(z) == pytest.approx(fd1, rel=1e-6)
            h = z * 2e-4  # wider step: the second difference loses eps/h^2
            fd2 = (m.phi(z + h) - 2 * m.phi(z) + m.phi(z - h)) / (h * h)
            assert m.phi.deriv2(z) == pytest.approx(fd2, rel=1e-5)

    def test_bessel0_deriv1_unbounded_at_zero(self):
        m = builtin_model("bessel0")
        assert m.phi.deriv1(0.0) == -math.inf

    def test_logdiff(self):
        m = builtin_model("logdiff")
        assert m.z0 == 0.5
        assert m.beta.lower == 0.0 and m.beta.upper == 1.0
        assert m.phi(0.5) == pytest.approx(math.log(2.0))
        assert float(m.beta(1.0)) == 0.0  # diffusion vanishes at the boundary
        assert float(m.beta(0.0)) == 0.0
        # phi is positive only inside (0, 1)
        assert m.phi(1.0) == 0.0

    def test_z0_override_and_validation(self):
        m = builtin_model("gbm", z0=2.5)
        assert m.z0 == 2.5
        with pytest.raises(DomainError):
            builtin_model("logdiff", z0=1.5)

    def test_unknown_name(self):
        with pytest.raises(ConfigurationError):
            builtin_model("heston")

    def test_phi_scaling(self):
        m = builtin_model("gbm")
        p2 = m.phi.scaled(2.0)
        assert p2(3.0) == 2.0 * m.phi(3.0)
        assert p2.deriv1(3.0) == 2.0 * m.phi.deriv1(3.0)
        with pytest.raises(DomainError):
            m.phi.scaled(-1.0)


# ===== rng substreams =====


class TestSubstreams:
    def test_reproducible(self):
        a = rng_substream(123, 0).standard_normal(8)
        b = rng_substream(123, 0).standard_normal(8)
        assert np.array_equal(a, b)

    def test_workers_independent(self):
        a = rng_substream(123, 0).standard_normal(8)
        b = rng_substream(123, 1).standard_normal(8)
        assert not np.array_equal(a, b)

    def test_seed_sensitivity(self):
        a = rng_substream(123, 0).standard_normal(8)
        b = rng_substream(124, 0).standard_normal(8)
        assert not np.array_equal(a, b)


# ===== simulation =====


class TestSimulate:
    def test_worker_count_never_changes_results(self):
        m = builtin_model("gbm")
        grids = [0.0, 0.3, 1.0]
        ens = [
            simulate(m, 0.4, 1.0, 0.0, grids, SimConfig(n_paths=3000, dt=0.02, seed=5, n_workers=w))
            for w in (1, 2, 8)
        ]
        for e in ens[1:]:
            assert np.array_equal(ens[0].states, e.states)
            assert np.array_equal(ens[0].absorbed_at, e.absorbed_at, equal_nan=True)

    def test_sigma_zero_paths_constant(self):
        m = builtin_model("gbm")
        e = simulate(m, 0.0, 1.3, 0.0, [0.0, 1.0], SimConfig(n_paths=64, dt=0.1, seed=1))
        assert np.all(e.states == 1.3)

    def test_gbm_mean_preserved(self):
        m = builtin_model("gbm")
        e = simulate(m, 0.5, 1.0, 0.0, [0.0, 1.0], SimConfig(n_paths=40000, dt=0.01, seed=17))
        zt = e.states[:, -1]
        z = (zt.mean() - 1.0) / (zt.std(ddof=1) / math.sqrt(len(zt)))
        assert abs(z) < 3.0

    @pytest.mark.parametrize("name", ["gbm", "bessel0", "logdiff"])
    @pytest.mark.parametrize("sigma", [0.2, 0.5])
    def test_martingale_preserved_across_models(self, name, sigma):
        m = builtin_model(name)
        for i, horizon in enumerate((0.5, 1.0, 2.0)):
            seed = 1000 * len(name) + 10 * i + round(10 * sigma)
            e = simulate(
                m, sigma, m.z0, 0.0, [0.0, horizon],
                SimConfig(n_paths=20000, dt=0.01, seed=seed),
            )
            zt = e.states[:, -1]
            se = zt.std(ddof=1) / math.sqrt(len(zt))
            assert abs(zt.mean() - m.z0) < 3.0 * se

    def test_exact_gbm_marginals(self):
        m = builtin_model("gbm")
        e = simulate(m, 0.3, 1.0, 0.0, [0.0, 1.0], SimConfig(n_paths=60000, dt=1.0, seed=2, scheme="exact-gbm"))
        lz = np.log(e.states[:, -1])
        n = len(lz)
        assert abs(lz.mean() + 0.045) < 3.0 * lz.std(ddof=1) / math.sqrt(n)
        assert abs(lz.var(ddof=1) - 0.09) < 4.0 * 0.09 * math.sqrt(2.0 / n)

    def test_scheme_consistency_error_decreases_with_dt(self):
        # Matched seeds couple the two schemes step by step: both draw one
        # normal per grid step, so the pathwise log difference isolates the
        # euler discretization error.
        m = builtin_model("gbm")
        errs = []
        for dt in (0.1, 0.01, 0.001):
            grid = np.linspace(0.0, 1.0, round(1.0 / dt) + 1)
            cfg_e = SimConfig(n_paths=100_000, dt=dt, seed=31, scheme="euler-maruyama")
            cfg_x = SimConfig(n_paths=100_000, dt=dt, seed=31, scheme="exact-gbm")
            ze = simulate(m, 0.5, 1.0, 0.0, grid, cfg_e).states[:, -1]
            zx = simulate(m, 0.5, 1.0, 0.0, grid, cfg_x).states[:, -1]
            errs.append(abs(np.mean(np.log(ze) - np.log(zx))))
        assert errs[0] > errs[1] > errs[2]

    def test_absorption_fraction_matches_refined_oracle(self):
        # oracle: the same scheme at dt/100 treated as ground truth
        m = builtin_model("bessel0")
        coarse = simulate(m, 1.2, 0.5, 0.0, [0.0, 1.0], SimConfig(n_paths=20000, dt=0.005, seed=21))
        fine = simulate(m, 1.2, 0.5, 0.0, [0.0, 1.0], SimConfig(n_paths=20000, dt=0.00005, seed=22))
        f1 = np.isfinite(coarse.absorbed_at).mean()
        f2 = np.isfinite(fine.absorbed_at).mean()
        se = math.sqrt(f1 * (1 - f1) / 20000 + f2 * (1 - f2) / 20000)
        assert abs(f1 - f2) < 3.0 * se

    def test_absorbed_paths_frozen_at_boundary(self):
        m = builtin_model("bessel0")
        e = simulate(m, 1.2, 0.5, 0.0, [0.0, 0.5, 1.0], SimConfig(n_paths=5000, dt=0.01, seed=3))
        hit = np.isfinite(e.absorbed_at)
        assert hit.any()
        early = hit & (e.absorbed_at <= 0.5)
        assert np.all(e.states[early, 1] == 0.0)
        assert np.all(e.states[early, 2] == 0.0)

    def test_logdiff_stays_in_domain_closure(self):
        m = builtin_model("logdiff")
        e = simulate(m, 0.6, 0.5, 0.0, [0.0, 1.0], SimConfig(n_paths=10000, dt=0.005, seed=4))
        assert e.states.min() >= 0.0 and e.states.max() <= 1.0

    def test_grid_points_hit_exactly(self):
        m = builtin_model("gbm")
        grid = [0.25, 0.4, 1.0, 2.5]
        e = simulate(m, 0.2, 1.0, 0.25, grid, SimConfig(n_paths=8, dt=0.3, seed=6))
        assert np.array_equal(e.time_grid, np.asarray(grid))
        assert e.states.shape == (8, 4)

    def test_errors(self):
        m = builtin_model("bessel0")
        cfg = SimConfig(n_paths=4, dt=0.1, seed=0)
        with pytest.raises(ConfigurationError):
            simulate(m, 0.2, 1.0, 0.0, [0.0, 1.0], SimConfig(n_paths=4, dt=0.1, seed=0, scheme="exact-gbm"))
        with pytest.raises(DomainError):
            simulate(m, 0.2, -1.0, 0.0, [0.0, 1.0], cfg)
        with pytest.raises(DomainError):
            simulate(m, 0.2, 1.0, 0.0, [0.5, 1.0], cfg)  # grid must start at t_start
        with pytest.raises(DomainError):
            simulate(m, 0.2, 1.0, 0.0, [0.0, 1.0, 1.0], cfg)
        with pytest.raises(DomainError):
            simulate(m, -0.5, 1.0, 0.0, [0.0, 1.0], cfg)

    def test_sim_config_validation(self):
        with pytest.raises(ConfigurationError):
            SimConfig(n_paths=0, dt=0.1, seed=1)
        with pytest.raises(ConfigurationError):
            SimConfig(n_paths=10, dt=0.0, seed=1)
        with pytest.raises(ConfigurationError):
            SimConfig(n_paths=10, dt=0.1, seed=1, scheme="milstein")


def test_piecewise_h_enters_dynamics():
    # with h doubled after t=0.5 the second half contributes 4x the variance
    h = TimeWeight(values=(1.0, 2.0), breakpoints=(0.5,))
    m = dataclasses.replace(builtin_model("gbm"), h=h)
    e = simulate(m, 0.3, 1.0, 0.0, [0.0, 1.0], SimConfig(n_paths=60000, dt=0.002, seed=8))
    lz = np.log(e.states[:, -1])
    want = 0.09 * h.sq_integral(0.0, 1.0)  # sigma^2 * int h^2 = 0.09 * 2.5
    assert abs(lz.var(ddof=1) - want) < 4.0 * want * math.sqrt(2.0 / len(lz))
