"""Command line front end.

One experiment per invocation. Exit codes: 0 when the command's verdict
passes, 1 when a statistical verdict fails or the computation diverges,
2 on configuration problems (bad file, bad flags, bad values), 3 on I/O
failures. The report is written whenever the computation completes,
whatever the verdict.

Worker count comes from the VOLBOUND_WORKERS environment variable and
defaults to the machine's logical CPU count; by the substream contract
it never changes any reported number.
"""

from __future__ import annotations

import argparse
import copy
import itertools
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bound import (
    StrikeGrid,
    build_q,
    check_bound,
    compute_alphas,
    densification_study,
    pin_point,
    pricing_residuals,
)
from .config import ResolvedConfig, load_document, parse_override, resolve, set_path
from .errors import (
    ConfigParseError,
    ConfigurationError,
    DivergenceError,
    DomainError,
    InfeasibleError,
    SearchError,
)
from .models import builtin_model
from .phi import (
    martingale_check_U,
    martingale_check_V,
    semigroup_check,
    verify_phi,
)
from .pricing import bs_call_price, implied_vol, mc_call_price, quad_call_price
from .report import build_report, render_csv, render_json

# state grids and tolerances for the eigenfunction ODE check, chosen to
# stay inside each model's open domain
_PHI_GRIDS = {
    "gbm": (0.05, 10.0, 1e-10),
    "bessel0": (0.05, 10.0, 1e-8),
    "logdiff": (0.005, 0.995, 1e-10),
}

_TABULAR = ("scan", "densify")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volbound",
        description=(
            "Scenario experiments on driftless diffusions: eigenfunction "
            "validation, option pricing, implied vol, and universal bounds "
            "on implied-volatility variation."
        ),
        epilog=(
            "VOLBOUND_WORKERS sets the worker count (default: logical CPUs); "
            "results never depend on it."
        ),
    )
    parser.add_argument("--version", action="version", version=f"volbound {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("validate-phi", "check the eigenfunction ODE for builtin models"),
        ("price", "price the configured call by every available route"),
        ("implied-vol", "invert the configured option price for its vol"),
        ("check-bound", "evaluate both sides of the variation bound"),
        ("scan", "sweep scenario parameters and map the feasible region"),
        ("densify", "run the strike-grid densification study"),
        ("martingale-check", "test the discounted eigenfunction processes"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", help="scenario config file (YAML)")
        p.add_argument("--seed", type=int, help="override simulation.seed")
        p.add_argument("--paths", type=int, help="override simulation.paths")
        p.add_argument("--dt", type=float, help="override simulation.dt")
        p.add_argument("--out", metavar="PATH", help="write the report here instead of stdout")
        p.add_argument(
            "--format",
            choices=("json", "csv"),
            default="json",
            help="csv is available for scan and densify",
        )
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="config override, repeatable (dotted keys, YAML scalar values)",
        )
    return parser


def _mart_payload(rep) -> dict:
    return {
        "means": rep.means,
        "ses": rep.ses,
        "references": rep.references,
        "z_scores": rep.z_scores,
        "verdict": rep.verdict,
    }


def _cmd_validate_phi(rc: ResolvedConfig | None, args):
    names = (rc.model.name,) if rc is not None else ("gbm", "bessel0", "logdiff")
    per = {}
    ok = True
    for name in names:
        model = rc.model if rc is not None else builtin_model(name)
        lo, hi, tol = _PHI_GRIDS[name]
        rep = verify_phi(model, np.linspace(lo, hi, 200), tol)
        per[name] = {
            "grid": [lo, hi, 200],
            "tolerance": tol,
            "max_abs_residual": rep.max_abs,
            "relative_scale": rep.rel_scale,
            "positive": rep.positive,
            "convex": rep.convex,
            "passed": rep.passed,
        }
        ok = ok and rep.passed
    return {"models": per}, ok, None


def _need_pricing(rc: ResolvedConfig):
    if rc.pricing is None:
        raise ConfigParseError(
            "this command needs a pricing section (maturity, strike)", key="pricing"
        )
    return rc.pricing


def _cmd_price(rc: ResolvedConfig, args):
    spec = _need_pricing(rc)
    model, sigma = rc.model, rc.scenario.sigma0
    T, strike = spec["maturity"], spec["strike"]
    mc = mc_call_price(model, sigma, 0.0, T, strike, model.z0, rc.sim)
    results = {
        "maturity": T,
        "strike": strike,
        "monte_carlo": {"value": mc.value, "se": mc.se, "n_paths": mc.n_paths},
    }
    verdict = True
    if model.name == "gbm":
        quad = quad_call_price(model, sigma, 0.0, T, strike, model.z0)
        closed = bs_call_price(0.0, T, strike, sigma, model.z0)
        gap = abs(mc.value - closed.value)
        gate = 3.5 * mc.se
        results["quadrature"] = {"value": quad.value}
        results["closed_form"] = {"value": closed.value}
        results["mc_vs_closed_form"] = {"gap": gap, "gate": gate}
        verdict = gap <= gate
    return results, verdict, None


def _cmd_implied_vol(rc: ResolvedConfig, args):
    spec = _need_pricing(rc)
    if "price" not in spec:
        raise ConfigParseError(
            "implied-vol inverts an observed price; add it to the pricing section",
            key="pricing.price",
        )
    model = rc.model
    T, strike, price = spec["maturity"], spec["strike"], spec["price"]
    res = implied_vol(model, price, 0.0, T, strike, model.z0)
    results = {
        "maturity": T,
        "strike": strike,
        "price": price,
        "implied_vol": res.sigma,
        "iterations": res.iterations,
        "price_residual": res.residual,
        "forward_map": res.forward_map,
    }
    return results, True, None


def _bound_payload(rc: ResolvedConfig, rep) -> dict:
    alphas = compute_alphas(rc.mats, rc.model.h)
    x0 = pin_point(rc.scenario.sigma0, rc.model.h.sq_integral(*rc.mats.times[:2]))
    qp = build_q(rc.weights, alphas, x0)
    return {
        "t": rep.t,
        "lhs": rep.lhs,
        "lhs_se": rep.lhs_se,
        "rhs": rep.rhs,
        "satisfied": rep.satisfied,
        "gap_term_mean": rep.nq_mean,
        "gap_term_se": rep.nq_se,
        "tail_correction_mean": rep.g_corr_mean,
        "tail_correction_se": rep.g_corr_se,
        "n_stable": rep.n_stable,
        "n_stability_z": rep.n_stability_z,
        "phi_prime_convention": rep.phi_prime_convention,
        "n_paths": rep.n_paths,
        "band_diagnostics": list(rep.l_diagnostics),
        # enough to recompute the right side offline
        "rhs_inputs": {
            "alphas": alphas,
            "coefficients": qp.coeffs,
            "pin_point": x0,
            "strikes": rc.strikes.strikes,
            "weights": rc.weights.p,
        },
    }


def _residual_payload(res) -> dict:
    return {
        "maturities": res.maturities,
        "strikes": res.strikes,
        "residuals": res.residuals,
        "ses": res.ses,
        "z_scores": res.z_scores,
        "tail_counts": res.tail_counts,
        "calibrated": res.calibrated,
        "min_tail_count": res.min_tail_count,
        "max_abs_z": res.max_abs_z,
        "n_paths": res.n_paths,
    }


def _cmd_check_bound(rc: ResolvedConfig, args):
    rep = check_bound(rc.scenario, rc.mats, rc.strikes, rc.weights, rc.eval_time, rc.sim)
    results = {"bound": _bound_payload(rc, rep)}
    if rc.model.name == "gbm":
        res = pricing_residuals(rc.scenario, rc.mats, rc.strikes, rc.eval_time, rc.sim)
        results["repricing"] = _residual_payload(res)
    verdict = rep.satisfied and rep.n_stable
    return results, verdict, None


def _uniform_grid(n: int) -> StrikeGrid:
    # the canonical vanishing-diagnostic family: cutoff n^(1/4), spacing
    # cutoff/n; custom schedules go through the library API
    k_max = n**0.25
    return StrikeGrid(strikes=tuple(k_max * i / n for i in range(n + 1)))


def _cmd_densify(rc: ResolvedConfig, args):
    if rc.densify_sizes is None:
        raise ConfigParseError(
            "the densify command needs a densify section (grid_sizes)", key="densify"
        )
    schedule = [_uniform_grid(n) for n in rc.densify_sizes]
    t = rc.eval_time if rc.eval_time > 0.0 else None
    rep = densification_study(
        rc.model, rc.scenario.sigma0, rc.mats, rc.weights, schedule, rc.sim, t=t
    )
    header = ["n_strikes", "k_max", "diagnostic", "rhs", "lhs", "lhs_se", "satisfied"]
    rows = [
        [s.n_strikes, s.k_max, s.diagnostic, s.rhs, s.lhs, s.lhs_se, s.satisfied]
        for s in rep.steps
    ]
    results = {
        "schedule_ok": rep.schedule_ok,
        "phi_prime_convention": rep.phi_prime_convention,
        "steps": [dict(zip(header, row)) for row in rows],
    }
    verdict = rep.schedule_ok and all(s.satisfied for s in rep.steps)
    return results, verdict, (header, rows)


def _cmd_martingale_check(rc: ResolvedConfig, args):
    model, sigma = rc.model, rc.scenario.sigma0
    times = rc.martingale_times
    u = martingale_check_U(model, sigma, times, rc.sim)
    v = martingale_check_V(model, sigma, times, rc.sim)
    results = {
        "times": times,
        "discounted_eigenfunction": _mart_payload(u),
        "compensated_eigenfunction": _mart_payload(v),
    }
    verdict = u.verdict and v.verdict
    if model.h.is_unit:
        sg = semigroup_check(model, sigma, times[-1], rc.sim)
        results["semigroup"] = _mart_payload(sg)
        verdict = verdict and sg.verdict
    return results, verdict, None


def _cmd_scan(rc: ResolvedConfig, args, base_doc):
    if not rc.scan_axes:
        raise ConfigParseError(
            "the scan command needs a scan section (axes)", key="scan"
        )
    keys = [k for k, _ in rc.scan_axes]
    header = keys + [
        "lhs", "lhs_se", "rhs", "satisfied",
        "gap_term_mean", "tail_correction_mean",
        "max_resid_z", "feasible", "conjunction_ok",
    ]
    rows = []
    verdict = True
    for point in itertools.product(*(vals for _, vals in rc.scan_axes)):
        doc = copy.deepcopy(base_doc)
        for key, value in zip(keys, point):
            set_path(doc, key, value)
        prc = resolve(doc)
        rep = check_bound(
            prc.scenario, prc.mats, prc.strikes, prc.weights, prc.eval_time, prc.sim
        )
        max_z = None
        if prc.model.name == "gbm":
            res = pricing_residuals(
                prc.scenario, prc.mats, prc.strikes, prc.eval_time, prc.sim
            )
            max_z = res.max_abs_z
        # a scenario that reprices honestly cannot break the bound, so a
        # violated bound alongside quiet residuals marks an internal error
        conjunction_ok = True
        if max_z is not None:
            conjunction_ok = rep.satisfied or max_z > 3.0
        feasible = rep.satisfied and (max_z is None or max_z <= 3.0)
        rows.append(
            list(point)
            + [
                rep.lhs, rep.lhs_se, rep.rhs, rep.satisfied,
                rep.nq_mean, rep.g_corr_mean,
                max_z, feasible, conjunction_ok,
            ]
        )
        verdict = verdict and conjunction_ok
    results = {
        "axes": [{"key": k, "values": list(v)} for k, v in rc.scan_axes],
        "rows": [dict(zip(header, row)) for row in rows],
    }
    return results, verdict, (header, rows)


def _run(args) -> int:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(("simulation.seed", args.seed))
    if args.paths is not None:
        overrides.append(("simulation.paths", args.paths))
    if args.dt is not None:
        overrides.append(("simulation.dt", args.dt))

    if args.format == "csv" and args.command not in _TABULAR:
        raise ConfigParseError(
            f"--format csv is only available for {' and '.join(_TABULAR)}"
        )

    rc = None
    base_doc = None
    if args.config is not None:
        doc = load_document(Path(args.config).read_text())
        for item in overrides:
            key, value = parse_override(item) if isinstance(item, str) else item
            set_path(doc, key, value)
        base_doc = doc
        rc = resolve(doc)
    elif args.command != "validate-phi":
        raise ConfigParseError(f"--config is required for {args.command}")

    started = time.perf_counter()
    if args.command == "validate-phi":
        results, verdict, table = _cmd_validate_phi(rc, args)
    elif args.command == "price":
        results, verdict, table = _cmd_price(rc, args)
    elif args.command == "implied-vol":
        results, verdict, table = _cmd_implied_vol(rc, args)
    elif args.command == "check-bound":
        results, verdict, table = _cmd_check_bound(rc, args)
    elif args.command == "densify":
        results, verdict, table = _cmd_densify(rc, args)
    elif args.command == "martingale-check":
        results, verdict, table = _cmd_martingale_check(rc, args)
    else:
        results, verdict, table = _cmd_scan(rc, args, base_doc)
    elapsed = time.perf_counter() - started

    config_doc = rc.document if rc is not None else {}
    report = build_report(args.command, config_doc, results, verdict)
    report["timing"] = {"wall_seconds": elapsed}

    if args.format == "csv":
        header, rows = table
        text = render_csv(header, rows)
    else:
        text = render_json(report)

    if args.out is not None:
        Path(args.out).write_text(text)
        print(f"{args.command}: {'pass' if verdict else 'FAIL'} -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0 if verdict else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _run(args)
    except ConfigParseError as exc:
        print(f"volbound: config error: {exc}", file=sys.stderr)
        return 2
    except (ConfigurationError, DomainError) as exc:
        print(f"volbound: invalid input: {exc}", file=sys.stderr)
        return 2
    except (SearchError, InfeasibleError, DivergenceError) as exc:
        print(f"volbound: computation failed: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"volbound: i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
