"""Command-line harness: one subcommand per experiment, TSV outputs, pass/fail exit codes."""

from __future__ import annotations

import argparse
import datetime
import math
import os
import sys
import warnings

import numpy as np
from scipy import integrate as quadrature
from scipy import stats

from . import drift, rng
from .config import ExperimentConfig, build_config, read_file
from .env import approximation_report, export_path, holder_seminorm, import_path, ou_section, sample_path
from .errors import ConfigError, RenvError, TailDominated
from .integrate import EnsembleConfig, cocycle_check, make_environment, propagate, run_ensemble
from .measure import (
    EmpiricalMeasure,
    U,
    cauchy_distances,
    invariance_check,
    ks_distance,
    quenched_clt_check,
    rate_estimate,
    weighted_distance,
)
from .transform import PotentialSpec

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


# output --------------------------------------------------------------------------------


class Output:
    """Writes TSV files carrying the config hash and seed lineage in a comment header."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.directory = cfg.out
        self.files = []
        self.checks = []
        os.makedirs(self.directory, exist_ok=True)

    def header(self):
        cfg = self.cfg
        noise = ",".join(f"{s}:{self.noise_seed(s)}" for s in cfg.seeds)
        lines = [
            f"# renv {cfg.command} config_hash={cfg.hash} a={cfg.a!r} r={cfg.r!r} beta={cfg.beta!r}",
            f"# seeds master={cfg.master_seed} env={','.join(map(str, cfg.seeds))} noise={noise}",
        ]
        if not cfg.deterministic:
            lines.append(f"# generated {datetime.datetime.now(datetime.timezone.utc).isoformat()}")
        return lines

    def noise_seed(self, env_seed, *path):
        return rng.derive_seed(self.cfg.master_seed, env_seed, *path)

    def table(self, name, columns, rows):
        path = os.path.join(self.directory, name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        lines = self.header() + ["\t".join(columns)]
        lines += ["\t".join(_cell(v) for v in row) for row in rows]
        with open(path, "w") as handle:
            handle.write("\n".join(lines) + "\n")
        self.files.append(path)
        return path

    def text(self, name, body):
        path = os.path.join(self.directory, name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w") as handle:
            handle.write("\n".join(self.header()) + "\n" + body)
        self.files.append(path)
        return path

    def check(self, name, value, passed, asserted=True):
        self.checks.append((name, value, passed, asserted))

    def finish(self):
        self.table("summary.tsv", ("check", "value", "passed", "asserted"),
                   [(n, v, int(bool(p)), int(a)) for n, v, p, a in self.checks])
        return all(p for _, _, p, a in self.checks if a)


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _spec(cfg, env, r=None):
    return PotentialSpec(cfg.a, cfg.r if r is None else r, env)


# commands --------------------------------------------------------------------------------


def cmd_env_tools(cfg: ExperimentConfig, out: Output):
    p, tol = cfg.params, cfg.tolerances
    actions = p["actions"]
    if "export" in actions:
        rows = []
        for seed in cfg.seeds:
            path = sample_path(seed)
            target = os.path.join(out.directory, "paths", f"env_{seed}.tsv")
            os.makedirs(os.path.dirname(target), exist_ok=True)
            export_path(path, target)
            again = import_path(target)
            exact = bool(np.array_equal(path.base_grid()[1], again.base_grid()[1]))
            rows.append((seed, path.base_grid()[0].size, exact))
        out.table("export.tsv", ("env_seed", "base_points", "bit_exact"), rows)
        out.check("export_roundtrip_bit_exact", sum(r[2] for r in rows), all(r[2] for r in rows))
    if "approx-report" in actions:
        rows = []
        for seed in cfg.seeds:
            env = sample_path(seed)
            for gamma in p["gamma_list"]:
                for epsilon in p["epsilon_list"]:
                    rep = approximation_report(env, gamma, epsilon, p["n_max"])
                    rows.append((seed, gamma, epsilon, rep["hgamma"], rep["pieces"], rep["sup_error"],
                                 rep["weighted_slope"], rep["slope_bound"], rep["violations"]))
        out.table("approx_report.tsv", ("env_seed", "gamma", "epsilon", "hgamma", "pieces", "sup_error",
                                        "weighted_slope", "slope_bound", "violations"), rows)
        violations = sum(r[-1] for r in rows)
        out.check("approx_violations", violations, violations == 0)
    if "hgamma" in actions:
        start = cfg.seeds[0]
        rows = [(s, holder_seminorm(sample_path(s), p["gamma"], p["n_max"]))
                for s in range(start, start + p["hgamma_count"])]
        out.table("hgamma.tsv", ("env_seed", "hgamma"), rows)
        good = all(0.0 < h < math.inf for _, h in rows)
        out.check("hgamma_positive_finite", len(rows), good)
    if "ou-section" in actions:
        result = ou_autocovariance(p["ou_x"], p["ou_lags"], p["ou_count"], cfg.seeds[0])
        out.table("ou_section.tsv", ("x", "lag", "estimate", "standard_error", "expected", "z_score"), result)
        worst = max(abs(r[-1]) for r in result)
        out.check("ou_autocovariance_max_z", worst, worst <= tol["z_score"])


def ou_autocovariance(x_list, lags, count, first_seed=0):
    """Sample ``E[T_0 env(x) T_lag env(x)]`` over ``count`` environments against ``|x| exp(-lag/4)``."""
    lags = np.asarray(lags, dtype=float)
    grid = np.concatenate(([0.0], lags))
    products = {x: [] for x in x_list}
    for seed in range(first_seed, first_seed + count):
        env = sample_path(seed)
        for x in x_list:
            values = ou_section(env, x, grid)
            products[x].append(values[0] * values[1:])
    rows = []
    for x in x_list:
        block = np.array(products[x])
        mean = block.mean(axis=0)
        se = block.std(axis=0, ddof=1) / math.sqrt(count)
        for lag, m, s in zip(lags, mean, se):
            expected = abs(x) * math.exp(-lag / 4.0)
            rows.append((x, float(lag), float(m), float(s), expected, float((m - expected) / s)))
    return rows


def _target_histogram(cfg, edges):
    """Binned stationary law ``exp(-(x^2/2 + |x|^(1/2)))`` of the self-similar cusp potential."""
    weight = lambda x: math.exp(-(0.5 * cfg.a * x * x + math.sqrt(abs(x))))
    pieces = [quadrature.quad(weight, -np.inf, edges[0])[0]]
    pieces += [quadrature.quad(weight, lo, hi, points=[0.0] if lo < 0.0 < hi else None)[0]
               for lo, hi in zip(edges[:-1], edges[1:])]
    pieces.append(quadrature.quad(weight, edges[-1], np.inf)[0])
    norm = float(np.sum(pieces))
    masses = np.array(pieces[1:-1]) / norm
    masses[0] += pieces[0] / norm
    masses[-1] += pieces[-1] / norm
    return norm, EmpiricalMeasure(edges=edges, masses=masses / masses.sum())


def cmd_simulate(cfg: ExperimentConfig, out: Output):
    p = dict(cfg.params)
    bins = p.pop("bins")
    rows = []
    for seed in cfg.seeds:
        ens = EnsembleConfig(a=cfg.a, r=cfg.r, env_seed=seed, noise_seed=out.noise_seed(seed),
                             workers=cfg.workers, **p)
        result = run_ensemble(ens)
        out.text(f"ensemble_{seed}.tsv", result.dumps())
        samples = result.samples
        edges = np.linspace(-8.0, 8.0, bins + 1)
        empirical = EmpiricalMeasure(samples=samples)
        masses = empirical.binned(edges)
        columns = ["bin_lo", "bin_hi", "mass"]
        target = None
        if ens.env_kind == "deterministic-sqrt" and abs(cfg.r) < 1e-15 and ens.coordinate == "z":
            norm, target = _target_histogram(cfg, edges)
            columns.append("target_mass")
            tv = weighted_distance(empirical, target, lambda x: np.ones_like(x), edges=edges)
            out.check(f"stationary_tv_seed{seed}", tv, tv < cfg.tolerances["tv"])
            out.check("normaliser", norm, True, asserted=False)
        hist_rows = []
        for i in range(bins):
            row = [edges[i], edges[i + 1], masses[i]]
            if target is not None:
                row.append(target.masses[i])
            hist_rows.append(row)
        out.table(f"histogram_{seed}.tsv", columns, hist_rows)
        rows.append((seed, result.n_replicas, result.escaped_fraction, float(np.mean(samples)),
                     float(np.var(samples))))
    out.table("simulate.tsv", ("env_seed", "replicas", "escaped_fraction", "mean", "variance"), rows)
    out.check("completed", len(rows), True)


def cmd_phase_scan(cfg: ExperimentConfig, out: Output):
    p, tol = cfg.params, cfg.tolerances
    log_times = sorted(float(s) for s in p["log_times"])
    rows, series = [], []
    for beta in p["betas"]:
        r = float(beta) - 0.25
        exploratory = beta < 0.25
        for seed in cfg.seeds:
            env = make_environment(p["env_kind"], seed)
            spec = _spec(cfg, env, r)
            ids = np.arange(p["n_replicas"])
            z = np.full(ids.size, float(p["z0"]))
            alive = np.ones(ids.size, dtype=bool)
            previous = 0.0
            stats_ = []
            for s in log_times:
                step, gone, _ = propagate(spec, previous, z[alive], s, p["dt"], out.noise_seed(seed), ids[alive])
                z[alive] = step
                alive[np.flatnonzero(alive)[gone]] = False
                ks = ks_distance(z[alive], stats.norm.cdf)[0]
                stats_.append(ks)
                rows.append((beta, seed, s, math.exp(s), ks, int((~alive).sum()), exploratory))
                previous = s
            series.append((beta, seed, stats_))
            if exploratory:
                continue
            if abs(beta - 0.75) < 1e-12:
                ok = bool(np.all(np.diff(stats_) < 0) and stats_[-1] <= tol["ks"])
                out.check(f"beta0.75_seed{seed}_clt", stats_[-1], ok)
            elif abs(beta - 0.25) < 1e-12 and p["env_kind"] == "random-wiener":
                out.check(f"beta0.25_seed{seed}_non_gaussian", stats_[-1], stats_[-1] >= tol["separation"])
    out.table("phase_scan.tsv", ("beta", "env_seed", "log_time", "brox_time", "ks", "escaped", "exploratory"), rows)


def cmd_pullback(cfg: ExperimentConfig, out: Output):
    p = cfg.params
    rows = []
    for seed in cfg.seeds:
        spec = _spec(cfg, make_environment(p["env_kind"], seed))
        distances = cauchy_distances(spec, p["horizons"], p["gap"], 0.0, p["n_replicas"], p["dt"],
                                     out.noise_seed(seed), p["alpha"])
        for n, d in zip(p["horizons"], distances):
            rows.append((seed, n, d))
        decreasing = bool(np.all(np.diff(distances) < 0))
        out.check(f"seed{seed}_cauchy_decreasing", distances[-1], decreasing)
        slope, _ = rate_estimate(p["horizons"], distances)
        out.check(f"seed{seed}_rate_slope", slope, slope < 0)
    out.table("pullback.tsv", ("env_seed", "n", "cauchy_distance"), rows)


def cmd_invariance(cfg: ExperimentConfig, out: Output):
    p, tol = cfg.params, cfg.tolerances
    rows = []
    for seed in cfg.seeds:
        spec = _spec(cfg, make_environment(p["env_kind"], seed))
        res = invariance_check(spec, p["pullback_n"], p["n_replicas"], p["dt"], out.noise_seed(seed), p["alpha"])
        rows.append((seed, res["ks"], res["p_value"], res["weighted_tv"], res["noise_floor_tv"],
                     res["noise_floor_ks"], res["distance_to_start"], res["escaped"]))
    out.table("invariance.tsv", ("env_seed", "ks", "p_value", "weighted_tv", "noise_floor_tv", "noise_floor_ks",
                                 "distance_to_start", "escaped"), rows)
    share = float(np.mean([r[2] > tol["p_value"] for r in rows]))
    out.check("passing_share", share, share >= p["pass_fraction"])


def cmd_clt(cfg: ExperimentConfig, out: Output):
    p, tol = cfg.params, cfg.tolerances
    rows = []
    for seed in cfg.seeds:
        spec = _spec(cfg, make_environment(p["env_kind"], seed))
        res = quenched_clt_check(spec, p["t_list"], p["n_replicas"], p["z0"], p["dt"], out.noise_seed(seed),
                                 tol["ks"])
        rows += [(seed, t, ks, pv) for t, ks, pv in res["rows"]]
        out.check(f"seed{seed}_clt", res["final_ks"], res["passed"])
    out.table("clt.tsv", ("env_seed", "t", "ks", "p_value"), rows)


def cmd_drift(cfg: ExperimentConfig, out: Output):
    p, tol = cfg.params, cfg.tolerances

    def report(seed, fit=None):
        env = sample_path(seed)
        family = drift.LyapunovFamily(p["family"], p["alpha"], env, p["gamma"], p["epsilon"])
        rep = drift.lyapunov_generator_check(_spec(cfg, env), family, p["lam"], p["T"], p["extent"],
                                             p["t_points"], adaptive=True, max_extent=p["max_extent"])
        return rep.with_bound(fit) if fit is not None else rep

    if p["bound"]:
        fit = drift.BoundFit(p["bound"]["log_k"], p["bound"]["c"], p["bound"]["p"])
    else:
        calibration = [report(s) for s in p["calibration_seeds"]]
        fit = drift.fit_bound([r.hgamma for r in calibration], [r.log_B_realized for r in calibration],
                              seeds=tuple(p["calibration_seeds"]))
    out.table("bound_fit.tsv", ("log_k", "c", "p", "margin", "calibration_seeds"),
              [(fit.log_k, fit.c, fit.p, fit.margin, ",".join(map(str, fit.calibration_seeds)))])
    rows = []
    for seed in cfg.seeds:
        rep = report(seed, fit)
        out.text(f"drift_seed_{seed}.tsv", rep.dumps())
        rows.append((seed, rep.hgamma, rep.log_B_realized, rep.log_B_bound, rep.max_violation, rep.extent,
                     rep.within_bound))
    out.table("drift.tsv", ("env_seed", "hgamma", "log_B_realized", "log_B_bound", "max_violation", "extent",
                            "within_bound"), rows)
    violations = sum(1 for r in rows if r[4] > 0 or not r[6])
    out.check("generator_violations", violations, violations == 0)
    zero = _spec(cfg, make_environment("zero"))
    kernel = drift.kernel_drift_check(zero, p["alpha"], 0.4, 0.2, 0.5, p["kernel_T"], [0.0], p["kernel_replicas"],
                                      noise_seed=out.noise_seed(0, 1))
    exact = (1.0 - p["alpha"] * (1.0 - math.exp(-p["kernel_T"]))) ** -0.5
    z = abs(kernel.mean[0] - exact) / kernel.standard_error[0]
    out.text("kernel_drift.tsv", kernel.dumps())
    out.check("zero_env_exp_moment_z", float(z), z <= tol["se_multiple"])


def cmd_coupling(cfg: ExperimentConfig, out: Output):
    p, tol = cfg.params, cfg.tolerances
    zero = _spec(cfg, make_environment("zero"))
    rho, kappa = p["rho"], p["kappa"]
    states = np.linspace(-p["state_reach"], p["state_reach"], p["state_count"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TailDominated)
        drift_report = drift.kernel_drift_check(zero, p["alpha"], p["eta"], kappa, p["tau"], 1.0, states,
                                                p["drift_replicas"], noise_seed=out.noise_seed(0, 1))
    kernel = drift.estimate_kernel(zero, states, p["n_per_state"], noise_seed=out.noise_seed(0, 2),
                                   workers=cfg.workers)
    out.text("kernel.tsv", kernel.dumps())
    reach = math.sqrt(2.0 * math.log(drift_report.set_level) / p["alpha"])
    estimate = drift.build_coupling(kernel, drift.coupling_set(kernel, (-reach, reach)))
    out.text("coupling.tsv", estimate.dumps())
    defect = drift.marginal_defect(kernel, estimate)
    out.check("marginal_defect", defect, defect <= tol["marginal"])
    B = drift.coupling_constant(drift_report.B, rho, kappa)
    weight = U(p["alpha"])
    start_a, start_b = p["starts"]
    norm_a, norm_b = float(weight(start_a)), float(weight(start_b))
    rows = []
    for n in range(1, p["n_steps"] + 1):
        ids = np.arange(p["replicas"])
        a, _, _ = propagate(zero, 0.0, start_a, float(n), p["dt"], out.noise_seed(0, 3), ids)
        b, _, _ = propagate(zero, 0.0, start_b, float(n), p["dt"], out.noise_seed(0, 4), ids)
        measured = weighted_distance(a, b, weight)
        bound, j = drift.best_dm_bound(n, rho, [estimate.epsilon_theta] * n, [B] * n, norm_a, norm_b)
        rows.append((n, measured, bound, j, measured <= bound))
        out.check(f"n{n}_measured_below_bound", measured, measured <= bound)
    out.table("dm_bound.tsv", ("n", "measured", "bound", "j", "holds"), rows)
    out.check("epsilon_theta", estimate.epsilon_theta, True, asserted=False)


def cmd_cocycle(cfg: ExperimentConfig, out: Output):
    p, tol = cfg.params, cfg.tolerances
    rows = []
    for seed in cfg.seeds:
        env = make_environment(p["env_kind"], seed)
        for r in p["r_list"]:
            for s, t in p["cells"]:
                ks, pv = cocycle_check(_spec(cfg, env, r), float(s), float(t), p["z0"], p["n_replicas"], p["dt"],
                                       out.noise_seed(seed))
                rows.append((seed, r, s, t, ks, pv, pv > tol["p_value"]))
    out.table("cocycle.tsv", ("env_seed", "r", "s", "t", "ks", "p_value", "passed"), rows)
    share = float(np.mean([r[-1] for r in rows]))
    out.check("passing_share", share, share >= p["pass_fraction"])


COMMANDS = {
    "env-tools": (cmd_env_tools, {
        "seeds": (0, 1, 2),
        "params": {"actions": ["export", "approx-report", "hgamma", "ou-section"],
                   "gamma_list": [0.3, 0.4, 0.45], "epsilon_list": [0.1, 0.5, 1.0], "n_max": 3, "gamma": 0.4,
                   "hgamma_count": 200, "ou_x": [0.5, 1.0], "ou_lags": [0.5, 1.0, 2.0, 4.0], "ou_count": 500},
        "tolerances": {"z_score": 3.0},
    }),
    "simulate": (cmd_simulate, {
        "seeds": (0,),
        "params": {"mode": "quenched", "env_kind": "random-wiener", "env_slope": 0.0, "n_replicas": 1000,
                   "z0": 0.0, "s": 0.0, "t_final": 1.0, "dt": 0.01, "route": "equivalent", "coordinate": "z",
                   "gamma": 0.4, "epsilon": 0.05, "escape_cap": 0.01, "bins": 64},
        "tolerances": {"tv": 0.05},
    }),
    "phase-scan": (cmd_phase_scan, {
        "seeds": (0, 1),
        "params": {"betas": [0.2, 0.25, 0.75], "log_times": [1.0, 2.0, 4.0, 8.0], "n_replicas": 5000,
                   "z0": 2.0, "dt": 0.01, "env_kind": "random-wiener"},
        "tolerances": {"ks": 0.05, "separation": 0.03},
    }),
    "pullback": (cmd_pullback, {
        "seeds": (0,),
        "params": {"horizons": [2, 4, 6, 8], "gap": 2, "n_replicas": 5000, "dt": 0.0025, "alpha": 0.5,
                   "env_kind": "random-wiener"},
    }),
    "invariance": (cmd_invariance, {
        "seeds": (0,),
        "params": {"pullback_n": 8, "n_replicas": 20000, "dt": 0.01, "alpha": 0.5, "pass_fraction": 0.8,
                   "env_kind": "random-wiener"},
        "tolerances": {"p_value": 0.01},
    }),
    "clt": (cmd_clt, {
        "seeds": (0,),
        "spec": {"r": 0.5},
        "params": {"t_list": [2, 4, 8], "n_replicas": 20000, "z0": 2.0, "dt": 0.01, "env_kind": "random-wiener"},
        "tolerances": {"ks": 0.05},
    }),
    "drift": (cmd_drift, {
        "seeds": (0,),
        "params": {"family": "F", "alpha": 0.5, "gamma": 0.4, "epsilon": 0.05, "lam": 0.1, "T": 1.0,
                   "extent": 180.0, "t_points": 5, "max_extent": 400.0, "calibration_seeds": list(range(1000, 1010)),
                   "bound": None, "kernel_T": 2.0, "kernel_replicas": 20000},
        "tolerances": {"se_multiple": 3.0},
    }),
    "coupling": (cmd_coupling, {
        "seeds": (0,),
        "params": {"alpha": 0.5, "rho": 0.8, "eta": 0.4, "kappa": 0.2, "tau": 0.5, "state_reach": 3.0,
                   "state_count": 31, "n_per_state": 4000, "drift_replicas": 4000, "starts": [0.0, 2.0],
                   "n_steps": 5, "replicas": 20000, "dt": 0.01},
        "tolerances": {"marginal": 1e-12},
    }),
    "cocycle": (cmd_cocycle, {
        "seeds": (0, 1, 2),
        "params": {"r_list": [0.0, 0.5], "cells": [[1, 1], [2, 1]], "z0": 0.0, "n_replicas": 10000,
                   "dt": 0.01, "pass_fraction": 10 / 12, "env_kind": "random-wiener"},
        "tolerances": {"p_value": 0.01},
    }),
}


def parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(prog="renv", description="Experiments on diffusions in dynamical Wiener environments.")
    commands = root.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = commands.add_parser(name)
        sub.add_argument("--config", metavar="PATH", help="YAML file with spec, seeds, tolerances and params")
        sub.add_argument("--workers", type=int, metavar="N")
        sub.add_argument("--seed", type=int, metavar="S", help="master seed (overrides RENV_SEED and the file)")
        sub.add_argument("--out", metavar="DIR")
        sub.add_argument("--deterministic", action="store_true", help="omit the timestamp header line")
    return root


def run(command, cfg: ExperimentConfig) -> bool:
    out = Output(cfg)
    COMMANDS[command][0](cfg, out)
    return out.finish()


def main(argv=None) -> int:
    try:
        args = parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_PASS
    try:
        data = read_file(args.config) if args.config else {}
        cfg = build_config(args.command, COMMANDS[args.command][1], data, args.seed, args.workers, args.out,
                           args.deterministic)
        passed = run(args.command, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TypeError, KeyError, ValueError) as exc:
        print(f"invalid parameters: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RenvError as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print("pass" if passed else "FAIL")
    return EXIT_PASS if passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
