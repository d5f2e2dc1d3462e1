"""Experiment drivers behind the command-line subcommands.

Every ``cmd_*`` function takes a validated :class:`ExperimentConfig` and an
output directory, writes its CSV tables, figures and ``manifest.json`` there,
and returns a result object whose ``passed`` flag decides the exit code.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import fitting
from ..cloud import DistributionSpec, ParticleCloud, sample_cloud
from ..dynamics import (CloudFlowOracle, CoupledSystem, GridFlowOracle, ROW_FIELDS, SimParams,
                        moment_bound, run_coupled)
from ..functionals import FAIL_THRESHOLD, default_probes, potential_gradient_error, validate_derivatives
from ..grid1d import (GridDensity, fixed_point_solve, free_energy_grid, run_grid_flow)
from ..metrics import (bregman_gap, concentration_rate, empirical_w2_rate, entropy_chain_sweep,
                       histogram_edges, leave_one_out_ratio, relative_entropy_1d)
from . import plotting
from .config import ExperimentConfig, config_from_dict
from .report import read_csv, write_csv, write_manifest

N_BOOT = 200


@dataclass
class CommandResult:
    """Tables written by a command plus its overall verdict."""

    passed: bool
    outputs: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)


def _out(out_dir, name, outputs):
    path = os.path.join(out_dir, name)
    outputs.append(name)
    return path


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def cmd_validate(cfg: ExperimentConfig, out_dir, functional=None) -> CommandResult:
    """Derivative identities for every configured family and the chain-entropy identity.

    ``functional`` overrides the configured one (used for fault injection
    from Python).
    """
    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    rows = []
    targets = [(fam, cfg.build_functional(fam)) for fam in cfg.validate_families]
    configured = functional if functional is not None else cfg.build_functional()
    targets.append(("configured", configured))
    for label, f in targets:
        rep = validate_derivatives(f, default_probes(f.dim, cfg.seed))
        for r in rep.rows:
            rows.append({"target": label, **r})
        for r in rep.failures:
            if r["check"] == "derivative_bound":
                rows.append({"target": label, **r})
    u = cfg.build_potential()
    pts = default_probes(cfg.dim, cfg.seed).points
    gerr = potential_gradient_error(u, pts)
    rows.append({"target": "potential", "functional": cfg.potential.family, "check": "potential_gradient",
                 "probe": "points", "rel_error": gerr, "passed": gerr <= FAIL_THRESHOLD})
    chain = entropy_chain_sweep(cfg.n_joints, cfg.seed)
    id_err = max(r["identity_error"] for r in chain)
    slack = min(r["slack"] for r in chain)
    rows.append({"target": "entropy_chain", "functional": "discrete", "check": "chain_identity",
                 "probe": f"{len(chain)} joints", "rel_error": id_err, "passed": id_err <= 1e-10})
    rows.append({"target": "entropy_chain", "functional": "discrete", "check": "chain_inequality",
                 "probe": f"{len(chain)} joints", "rel_error": max(0.0, -slack), "passed": slack >= -1e-10})
    write_csv(_out(out_dir, "validate.csv", outputs), rows,
              ["target", "functional", "check", "probe", "rel_error", "passed"])
    failed = [r for r in rows if not r["passed"]]
    write_manifest(out_dir, "validate", cfg, outputs, {"failed_checks": [
        f"{r['target']}:{r['check']}:{r['probe']}" for r in failed]})
    return CommandResult(not failed, outputs, {"failed": failed, "n_checks": len(rows)}, {"validate": rows})


# ---------------------------------------------------------------------------
# gibbs
# ---------------------------------------------------------------------------


def solve_star(cfg: ExperimentConfig, functional=None, damping=None):
    f = cfg.build_functional() if functional is None else functional
    g = cfg.grid
    return fixed_point_solve(f, cfg.build_potential(), cfg.sigma, damping or g.damping, g.tol,
                             g.max_iter, L=g.L, M=g.M)


def cmd_gibbs(cfg: ExperimentConfig, out_dir) -> CommandResult:
    """Solve for the minimiser on the grid and write it with its diagnostics."""
    if cfg.dim != 1:
        raise ValueError("gibbs needs dim = 1")
    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    f, u = cfg.build_functional(), cfg.build_potential()
    res = solve_star(cfg, f)
    star = res.density
    res.density.to_csv(_out(out_dir, "m_star.csv", outputs))
    fe = free_energy_grid(f, u, cfg.sigma, star)
    summary = {"residual": res.residual, "iterations": res.iterations, "converged": res.converged,
               "change": res.change, "free_energy": fe, "mean": star.mean(),
               "second_moment": star.moment(2)}
    write_csv(_out(out_dir, "gibbs.csv", outputs), [summary])
    mu = GridDensity.from_potential(u, cfg.grid.L, cfg.grid.M)
    plotting.density_plot(_out(out_dir, "m_star.png", outputs), star.centers,
                          {"m_*": star.values, "mu": mu.values}, "minimiser and reference measure")
    write_manifest(out_dir, "gibbs", cfg, outputs, {"summary": summary})
    return CommandResult(bool(res.converged), outputs, summary)


# ---------------------------------------------------------------------------
# grid flow and simulate
# ---------------------------------------------------------------------------


def grid_flow_table(cfg: ExperimentConfig, t_end=None, functional=None):
    """Free energy, gap to the minimiser and ``osc v`` along the grid flow from the initial law."""
    f = cfg.build_functional() if functional is None else functional
    u = cfg.build_potential()
    star = solve_star(cfg, f).density
    m0 = GridFlowOracle.from_spec(f, u, cfg.sigma, cfg.initial_spec(), cfg.grid.L, cfg.grid.M).m0
    traj = run_grid_flow(f, u, cfg.sigma, m0, cfg.dt * 10, t_end or cfg.t_end,
                         save_every=cfg.save_every / 5, track_oscillation=True)
    fe_star = free_energy_grid(f, u, cfg.sigma, star)
    stride = int(round(traj.save_times[1] / traj.step_times[1])) if len(traj.save_times) > 1 else 1
    rows = []
    for k, t in enumerate(traj.save_times):
        fe = traj.free_energy[k * stride]
        rows.append({"t": float(t), "free_energy": fe, "gap_to_star": fe - fe_star,
                     "oscillation": traj.oscillation[k]})
    return traj, rows, fe_star


def dissipation_stats(traj, fe_star, floor=1e-10):
    """Largest per-step increase of the free energy and ``R^2`` of the log-gap line."""
    incr = float(np.max(np.diff(traj.free_energy)))
    gap = traj.free_energy - fe_star
    t = traj.step_times
    keep = gap > max(floor, 1e-9 * gap[0])
    slope, icpt = np.polyfit(t[keep], np.log(gap[keep]), 1)
    r2 = fitting.r_squared(np.log(gap[keep]), slope * t[keep] + icpt)
    return {"max_step_increase": incr, "log_gap_slope": float(slope), "log_gap_r2": r2,
            "fit_t_end": float(t[keep][-1])}


def oscillation_ratio(rows, early=1.0, late=10.0):
    t = np.array([r["t"] for r in rows])
    osc = np.array([r["oscillation"] for r in rows])
    return float(np.max(osc[t <= late + 1e-12]) / np.max(osc[t <= early + 1e-12]))


def cmd_simulate(cfg: ExperimentConfig, out_dir) -> CommandResult:
    """Grid flow from the initial law and one coupled run at the first ``n`` of ``n_list``."""
    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    summary = {}
    passed = True
    if cfg.dim == 1:
        traj, rows, fe_star = grid_flow_table(cfg)
        write_csv(_out(out_dir, "grid_flow.csv", outputs), rows)
        summary.update(dissipation_stats(traj, fe_star))
        summary["oscillation_ratio"] = oscillation_ratio(rows)
        t = np.array([r["t"] for r in rows])
        gap = np.array([r["gap_to_star"] for r in rows])
        pos = gap > 0
        plotting.curves_vs_time(_out(out_dir, "free_energy_gap.png", outputs),
                                {"grid flow": (t[pos], gap[pos])}, "F(m_t) - F(m_*)")
        plotting.curves_vs_time(_out(out_dir, "oscillation.png", outputs),
                                {"osc v": (t, [r["oscillation"] for r in rows])}, "osc v", logy=False)
        passed &= summary["max_step_increase"] < 1e-10
    run = sweep_one(cfg.to_dict(), cfg.n_list[0], 0, keep=False)
    write_csv(_out(out_dir, "timeseries.csv", outputs), run.rows, list(ROW_FIELDS))
    write_csv(_out(out_dir, "diagnostics.csv", outputs), run.diagnostics)
    times, gap = run.table("gap_sq_per_particle")
    plotting.curves_vs_time(_out(out_dir, "gap_vs_time.png", outputs),
                            {f"n={cfg.n_list[0]}": (times[1:], gap[1:].mean(axis=1))}, "coupled gap")
    f, u = cfg.build_functional(), cfg.build_potential()
    m2_0 = float(np.mean(np.sum(sample_cloud(cfg.initial_spec(), 4096, cfg.seed).positions ** 2, axis=1)))
    try:
        bound = moment_bound(f, u, cfg.sigma, m2_0, cfg.dim)
    except ValueError:
        bound = np.nan
    summary.update({"complete": run.complete, "error": run.error,
                    "max_moment2": float(np.max(run.column("moment2"))), "moment_bound": bound})
    passed &= run.complete
    write_manifest(out_dir, "simulate", cfg, outputs, {"summary": summary})
    return CommandResult(bool(passed), outputs, summary, {"run": run})


# ---------------------------------------------------------------------------
# poc-sweep
# ---------------------------------------------------------------------------


def build_oracle(cfg: ExperimentConfig, functional, u):
    spec = cfg.initial_spec()
    if cfg.oracle == "grid":
        return GridFlowOracle.from_spec(functional, u, cfg.sigma, spec, cfg.grid.L, cfg.grid.M)
    return CloudFlowOracle(functional, u, cfg.sigma, spec, cfg.n_ref_factor * max(cfg.n_list), cfg.seed)


def sweep_one(cfg_dict, n, refine=0, keep=True):
    """Coupled run for one ``n``; takes a plain dict so it can cross process boundaries."""
    cfg = config_from_dict(cfg_dict)
    f, u = cfg.build_functional(), cfg.build_potential()
    star = solve_star(cfg, f).density if cfg.dim == 1 else None
    oracle = build_oracle(cfg, f, u)
    seeds = tuple(range(cfg.seed, cfg.seed + cfg.replicas))
    system = CoupledSystem.build(cfg.initial_spec(), n, seeds, oracle, cfg.init_coupling)
    params = SimParams(cfg.sigma, cfg.dt, cfg.t_end, cfg.save_times, cfg.seed, cfg.dt_max, refine)
    return run_coupled(system, f, u, params, star=star, keep_snapshots=keep)


def run_sweep(cfg: ExperimentConfig, refine=0, threads=1) -> dict:
    jobs = [(cfg.to_dict(), n, refine) for n in cfg.n_list]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(sweep_one, *zip(*jobs)))
    else:
        runs = [sweep_one(*j) for j in jobs]
    return dict(zip(cfg.n_list, runs))


def _boot_stat(stat, R, rng, n_boot=N_BOOT):
    """Point value and bootstrap draws of ``stat(replica_index_array)``."""
    point = stat(np.arange(R))
    draws = np.array([stat(rng.integers(0, R, R)) for _ in range(n_boot)])
    return point, draws


def _slope_with_ci(n_list, points, draws):
    """Log-log slope of ``points`` and its interval from per-``n`` bootstrap draws."""
    n = np.asarray(n_list, dtype=float)
    slope, icpt, _ = fitting.powerlaw(n, points)
    dslopes = []
    for b in range(draws.shape[1]):
        col = draws[:, b]
        if np.all(col > 0):
            dslopes.append(fitting.powerlaw(n, col)[0])
    lo, hi = np.quantile(dslopes, [0.025, 0.975]) if dslopes else (np.nan, np.nan)
    return slope, icpt, (float(min(lo, slope)), float(max(hi, slope)))


def _normal_ci(point, draws):
    sd = float(np.std(draws, ddof=1))
    return point - 1.96 * sd, point + 1.96 * sd


def analyse_sweep(cfg: ExperimentConfig, runs: dict, seed=None):
    """Acceptance statistics of a sweep with replica-bootstrap intervals.

    Returns ``(per_n_rows, stats, curves)`` where ``stats`` maps a statistic
    name to ``(value, ci_lo, ci_hi)``.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    f = cfg.build_functional()
    star = solve_star(cfg, f).density if cfg.dim == 1 else None
    w = cfg.windows
    s2 = 0.5 * cfg.sigma ** 2
    per_n, stats, curves = [], {}, {"gap": {}, "value": {}, "mismatch": {}}
    pts = {k: [] for k in ("gap", "value", "mismatch")}
    drw = {k: [] for k in ("gap", "value", "mismatch")}
    ent_means, ent_half = [], []
    for n, run in runs.items():
        if not run.complete:
            raise RuntimeError(f"sweep at n={n} incomplete: {run.error}")
        times, gap = run.table("gap_sq_per_particle")
        _, mism = run.table("drift_mismatch")
        R = gap.shape[1]
        sup_mask = times >= w.sup_from - 1e-12
        first = sup_mask & (times <= w.split + 1e-12)
        second = times > w.split + 1e-12
        plateau = (times >= w.plateau[0] - 1e-12) & (times <= w.plateau[1] + 1e-12)

        sup_pt, sup_dr = _boot_stat(lambda i: gap[sup_mask][:, i].mean(axis=1).max(), R, rng)
        ratio_pt, ratio_dr = _boot_stat(
            lambda i: gap[second][:, i].mean(axis=1).max() / gap[first][:, i].mean(axis=1).max(), R, rng)
        mm_r = mism[plateau].mean(axis=0)
        mm_pt, mm_dr = _boot_stat(lambda i: mm_r[i].mean(), R, rng)

        row = {"n": n, "replicas": R, "sup_gap": sup_pt, "secular_ratio": ratio_pt,
               "mismatch_plateau": mm_pt}
        row["sup_gap_lo"], row["sup_gap_hi"] = np.quantile(sup_dr, [0.025, 0.975])
        row["secular_ratio_lo"], row["secular_ratio_hi"] = np.quantile(ratio_dr, [0.025, 0.975])
        stats[f"secular_ratio[n={n}]"] = (ratio_pt, row["secular_ratio_lo"], row["secular_ratio_hi"])
        pts["gap"].append(sup_pt)
        drw["gap"].append(sup_dr)
        pts["mismatch"].append(mm_pt)
        drw["mismatch"].append(mm_dr)
        curves["gap"][n] = (times, gap.mean(axis=1))
        curves["mismatch"][n] = (times, mism.mean(axis=1))

        if star is not None:
            snap_t = [t for t in run.snapshots if w.plateau[0] - 1e-12 <= t <= w.plateau[1] + 1e-12]
            xs = np.stack([run.snapshots[t][0] for t in snap_t])          # (T, R, n, 1)
            breg_r = bregman_gap(xs, f, star).mean(axis=0)                 # (R,)
            pooled = xs[..., 0]
            edges = histogram_edges(pooled.reshape(-1))

            def ent(idx):
                return relative_entropy_1d(pooled[:, idx].reshape(-1), star, edges=edges)

            h_full = ent(np.arange(R))
            h_loo = np.array([ent(np.delete(np.arange(R), r)) for r in range(R)])
            pseudo = R * h_full - (R - 1) * h_loo
            val_r = breg_r + s2 * pseudo
            v_pt, v_dr = _boot_stat(lambda i: val_r[i].mean(), R, rng)
            row.update({"value_plateau": v_pt, "bregman_plateau": float(breg_r.mean()),
                        "entropy_term_jackknife": float(s2 * pseudo.mean()),
                        "entropy_term_plugin": float(s2 * h_full)})
            pts["value"].append(v_pt)
            drw["value"].append(v_dr)

            vt = np.array([d["t"] for d in run.diagnostics])
            vg = np.array([d["value_gap"] for d in run.diagnostics])
            curves["value"][n] = (vt, vg)
            early = (vt >= w.early[0] - 1e-12) & (vt <= w.early[1] + 1e-12)
            try:
                fit = fitting.fit_table(vt[early], vg[early], "exp_plus_floor", N_BOOT, cfg.seed)
                row.update({"early_rate": fit.params["rate"], "early_rate_lo": fit.ci["rate"][0],
                            "early_rate_hi": fit.ci["rate"][1], "early_floor": fit.params["floor"],
                            "early_r2": fit.r2})
                stats[f"early_rate[n={n}]"] = (fit.params["rate"], *fit.ci["rate"])
            except fitting.DegenerateDataError:
                row["early_rate"] = np.nan

            # one-particle marginal against the mean-field law, plug-in per save time
            ent_t = [run.snapshots[t][0][..., 0] for t in snap_t]
            refs = [_oracle_density_at(run, t, star) for t in snap_t]

            def marg(idx):
                return float(np.mean([relative_entropy_1d(x[idx].reshape(-1), m)
                                      for x, m in zip(ent_t, refs)]))

            me_pt, me_dr = _boot_stat(marg, R, rng, n_boot=50)
            lo, hi = _normal_ci(me_pt, me_dr)
            row.update({"marginal_entropy": me_pt, "marginal_entropy_lo": lo, "marginal_entropy_hi": hi})
            stats[f"marginal_entropy[n={n}]"] = (me_pt, lo, hi)
            ent_means.append(me_pt)
            ent_half.append(0.5 * (hi - lo))
        per_n.append(row)

    n_list = list(runs)
    for key, label in (("gap", "gap_slope"), ("value", "value_slope"), ("mismatch", "mismatch_slope")):
        if pts[key]:
            slope, icpt, ci = _slope_with_ci(n_list, np.array(pts[key]), np.array(drw[key]))
            stats[label] = (slope, *ci)
            stats[label + "_intercept"] = (icpt, np.nan, np.nan)
            for row, d in zip(per_n, drw[key]):
                row[f"{key}_stderr"] = float(np.std(d, ddof=1))
    if ent_means:
        em, eh = np.array(ent_means), np.array(ent_half)
        ok = bool(np.all(np.diff(em) <= eh[:-1] + eh[1:]))
        stats["marginal_entropy_monotone"] = (float(ok), np.nan, np.nan)
    return per_n, stats, curves


def _oracle_density_at(run, t, fallback):
    dens = run.snapshots[t][2]
    return fallback if dens is None else dens


def sweep_verdicts(stats, per_n):
    """Acceptance checks for the propagation-of-chaos sweep."""
    out = {}
    s = stats.get("gap_slope")
    if s:
        out["gap_slope_in_range"] = -1.35 <= s[0] <= -0.65
    out["no_secular_growth"] = all(r["secular_ratio"] <= 2.0 for r in per_n)
    if "value_slope" in stats:
        out["value_slope_in_range"] = -1.35 <= stats["value_slope"][0] <= -0.65
        out["early_decay_positive"] = all(r.get("early_rate", 0) > 0 and r.get("early_rate_lo", 0) > 0
                                          for r in per_n)
    if "mismatch_slope" in stats:
        out["mismatch_slope_in_range"] = -1.35 <= stats["mismatch_slope"][0] <= -0.65
    if "marginal_entropy_monotone" in stats:
        out["marginal_entropy_decreasing"] = bool(stats["marginal_entropy_monotone"][0])
    return out


def halving_table(stats_dt, stats_half):
    """Compare every statistic with an interval against the rerun at ``dt / 2``."""
    rows = []
    for name, (v, lo, hi) in stats_dt.items():
        if name not in stats_half or not np.isfinite(lo) or not np.isfinite(hi):
            continue
        half_width = 0.5 * (hi - lo)
        diff = abs(stats_half[name][0] - v)
        rows.append({"statistic": name, "value_dt": v, "value_half_dt": stats_half[name][0],
                     "abs_change": diff, "ci_half_width": half_width, "passed": diff < half_width})
    return rows


def cmd_poc_sweep(cfg: ExperimentConfig, out_dir, threads=1) -> CommandResult:
    """Coupled runs over ``n_list``, fitted rates, and the ``dt / 2`` rerun."""
    if cfg.replicas < 8:
        raise ValueError("poc-sweep needs at least 8 replicas")
    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    runs = run_sweep(cfg, 0, threads)
    bad = {n: r.error for n, r in runs.items() if not r.complete}
    rows = [r for run in runs.values() for r in run.rows]
    write_csv(_out(out_dir, "timeseries.csv", outputs), rows, list(ROW_FIELDS))
    write_csv(_out(out_dir, "diagnostics.csv", outputs),
              [d for run in runs.values() for d in run.diagnostics])
    if bad:
        write_manifest(out_dir, "poc-sweep", cfg, outputs, {"incomplete": bad})
        return CommandResult(False, outputs, {"incomplete": bad})
    per_n, stats, curves = analyse_sweep(cfg, runs)
    verdicts = sweep_verdicts(stats, per_n)
    write_csv(_out(out_dir, "sweep_per_n.csv", outputs), per_n)
    for key, col, ylabel in (("gap", "sup_gap", "sup_t coupled gap"),
                             ("value", "value_plateau", "value gap plateau"),
                             ("mismatch", "mismatch_plateau", "drift mismatch plateau")):
        if f"{key}_slope" not in stats:
            continue
        rate_rows = [{"n": r["n"], "mean_value": r[col], "stderr": r[f"{key}_stderr"],
                      "replicas": r["replicas"]} for r in per_n]
        write_csv(_out(out_dir, f"{key}_rate.csv", outputs), rate_rows,
                  ["n", "mean_value", "stderr", "replicas"])
        plotting.rate_plot(_out(out_dir, f"{key}_rate.png", outputs), [r["n"] for r in per_n],
                           [r[col] for r in per_n], [r[f"{key}_stderr"] for r in per_n],
                           stats[f"{key}_slope"][0], stats[f"{key}_slope_intercept"][0], ylabel)
        plotting.curves_vs_time(_out(out_dir, f"{key}_vs_time.png", outputs),
                                {f"n={n}": (t[t > 0], y[t > 0]) for n, (t, y) in curves[key].items()},
                                ylabel.replace(" plateau", ""))
    summary = {"verdicts": verdicts, "stats": {k: list(v) for k, v in stats.items()}}
    if cfg.halving_check:
        runs_half = run_sweep(cfg, 1, threads)
        _, stats_half, _ = analyse_sweep(cfg, runs_half)
        hrows = halving_table(stats, stats_half)
        write_csv(_out(out_dir, "halving.csv", outputs), hrows)
        verdicts["halving_within_ci"] = all(r["passed"] for r in hrows)
        summary["halving"] = hrows
    write_csv(_out(out_dir, "statistics.csv", outputs),
              [{"statistic": k, "value": v[0], "ci_lo": v[1], "ci_hi": v[2]} for k, v in stats.items()])
    write_manifest(out_dir, "poc-sweep", cfg, outputs, {"verdicts": verdicts})
    return CommandResult(all(verdicts.values()), outputs, summary,
                         {"per_n": per_n, "stats": stats, "runs": runs})


# ---------------------------------------------------------------------------
# rate-fit
# ---------------------------------------------------------------------------


def fit_report(path, model, x_col=None, y_col=None, seed=0):
    rows = read_csv(path)
    if not rows:
        raise fitting.DegenerateDataError(f"{path} is empty")
    cols = list(rows[0])
    x_col = x_col or ("n" if "n" in cols else cols[0])
    y_col = y_col or ("mean_value" if "mean_value" in cols else cols[1])
    x = np.array([float(r[x_col]) for r in rows])
    y = np.array([float(r[y_col]) for r in rows])
    return fitting.fit_table(x, y, model, N_BOOT, seed)


def sampling_rates(cfg: ExperimentConfig):
    """Empirical-measure W2 rate, concentration of ``F(m_X)`` and the leave-one-out bound."""
    rc = cfg.rate
    f = cfg.build_functional()
    law = DistributionSpec("gaussian", dim=1)
    w2 = empirical_w2_rate(law, rc.n_list, rc.replicas, cfg.seed)
    conc = concentration_rate(f, cfg.initial_spec(), rc.concentration_n_list, rc.concentration_replicas, cfg.seed)
    ratios = []
    for k in range(rc.loo_clouds):
        # every leave-one-out value is a fresh evaluation, so keep the clouds small
        n = min(int(rc.concentration_n_list[k % len(rc.concentration_n_list)]), 256)
        cloud = ParticleCloud(sample_cloud(cfg.initial_spec(), n, cfg.seed + k, "probe").positions)
        ratios.append(float(np.max(leave_one_out_ratio(f, cloud))))
    return w2, conc, ratios


def cmd_rate_fit(cfg: ExperimentConfig, out_dir, report_paths=(), model="powerlaw",
                 x_col=None, y_col=None) -> CommandResult:
    """Fit rate tables.

    With ``report_paths`` each CSV is fitted with ``model``.  Without, the
    sampling-rate experiments are run first and their tables fitted.
    """
    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    fits = []
    summary = {}
    passed = True
    if report_paths:
        for p in report_paths:
            fit = fit_report(p, model, x_col, y_col, cfg.seed)
            fits.append({"source": os.path.basename(p), **fit.row()})
    else:
        w2, conc, ratios = sampling_rates(cfg)
        for name, rep, ylabel in (("empirical_w2", w2, "E W2^2(m_X, m)"),
                                  ("concentration", conc, "E|F(m_X) - F(m)|^2")):
            write_csv(_out(out_dir, f"{name}_rate.csv", outputs), rep.rows(),
                      ["n", "mean_value", "stderr", "replicas"])
            plotting.rate_plot(_out(out_dir, f"{name}_rate.png", outputs), rep.n, rep.mean,
                               rep.stderr, rep.slope, rep.intercept, ylabel)
            fits.append({"source": name, "model": "powerlaw", "n_points": len(rep.n),
                         "slope": rep.slope, "slope_lo": rep.slope_ci[0], "slope_hi": rep.slope_ci[1],
                         "intercept": rep.intercept})
        write_csv(_out(out_dir, "leave_one_out.csv", outputs),
                  [{"cloud": k, "max_ratio": r} for k, r in enumerate(ratios)])
        summary = {"empirical_w2_slope": w2.slope, "empirical_w2_monotone": w2.monotone_decreasing(),
                   "concentration_slope": conc.slope, "leave_one_out_max_ratio": max(ratios)}
        verdict = {"empirical_w2_slope_in_range": abs(w2.slope + 0.5) <= 0.15,
                   "concentration_slope_in_range": abs(conc.slope + 1.0) <= 0.35,
                   "leave_one_out_bound": max(ratios) <= 1.0}
        summary["verdicts"] = verdict
        passed = all(verdict.values())
    write_csv(_out(out_dir, "rate_fit.csv", outputs), fits)
    write_manifest(out_dir, "rate-fit", cfg, outputs, {"summary": summary, "model": model,
                                                       "reports": list(report_paths)})
    return CommandResult(passed, outputs, summary, {"fits": fits})


# ---------------------------------------------------------------------------
# entropy-chain
# ---------------------------------------------------------------------------


def cmd_entropy_chain(cfg: ExperimentConfig, out_dir) -> CommandResult:
    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    rows = entropy_chain_sweep(cfg.n_joints, cfg.seed)
    write_csv(_out(out_dir, "entropy_chain.csv", outputs), rows)
    id_err = max(r["identity_error"] for r in rows)
    slack = min(r["slack"] for r in rows)
    summary = {"joints": len(rows), "max_identity_error": id_err, "min_slack": slack}
    write_manifest(out_dir, "entropy-chain", cfg, outputs, {"summary": summary})
    return CommandResult(id_err <= 1e-10 and slack >= -1e-10, outputs, summary, {"rows": rows})
