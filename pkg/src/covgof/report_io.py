"""JSON and CSV report emission.

Test reports embed the fully resolved configuration and every diagnostic a
reviewer needs (convergence, truncation, variance flooring, the time
rescale).  Serialization is deterministic: sorted keys, repr-roundtrip
floats, no timestamps.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .basis import surface_grid
from .gof import MultivariateTestResult, TestConfig, UnivariateTestResult
from .simulate import ExperimentCell

SURFACE_GRID_SIZE = 61


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def _config_dict(config: TestConfig) -> dict:
    return {
        "basis_size": config.basis_size,
        "n_boot": config.n_boot,
        "alpha": config.alpha,
        "mode": config.mode,
        "m_cap": config.m_cap,
        "seed": config.seed,
        "mean_basis_size": config.mean_basis_size,
        "var_basis_size": config.var_basis_size,
        "diag_basis_size": config.diag_basis_size,
        "knot_placement": config.knot_placement,
        "workers": config.workers,
        "pvalue_add_one": config.pvalue_add_one,
        "followup": config.followup,
    }


def _sigma_estimate_dict(est) -> dict:
    return {
        "sigma_sq": est.sigma_sq,
        "method": est.method,
        "smoothing_surface": est.smoothing_surface,
        "smoothing_diag": est.smoothing_diag,
        "floored": est.floored,
        "negative_mass": est.negative_mass,
    }


def univariate_report(res: UnivariateTestResult) -> dict:
    fit = res.null_fit
    tmap = res.time_map
    d_orig = tmap.map_re_cov(fit.re_cov)
    return _jsonable({
        "test": "univariate",
        "mode": res.mode,
        "outcome": res.outcome,
        "statistic": res.statistic,
        "p_value": res.p_value,
        "rejected": res.rejected,
        "sigma_sq_used": res.sigma_sq_used,
        "n_boot": res.bootstrap_draws.size,
        "null_fit": {
            "unit_scale": {
                "sigma0_sq": fit.sigma0_sq,
                "sigma01": fit.sigma01,
                "sigma1_sq": fit.sigma1_sq,
                "error_var": fit.error_var,
            },
            "original_scale": {
                "sigma0_sq": d_orig[0, 0],
                "sigma01": d_orig[0, 1],
                "sigma1_sq": d_orig[1, 1],
                "error_var": fit.error_var,
            },
            "log_likelihood": fit.log_likelihood,
            "converged": fit.converged,
            "grad_norm": fit.grad_norm,
            "error_var_at_floor": fit.at_floor,
        },
        "truncation": {
            "applied": res.alt_fit.truncation_applied,
            "min_eigenvalue_before": res.alt_fit.min_eigenvalue_before,
        },
        "sigma_estimate": _sigma_estimate_dict(
            res.diagnostics["sigma_estimate"]
        ),
        "time_map": {"offset": tmap.offset, "scale": tmap.scale},
        "basis_size": res.diagnostics["basis_size"],
        "diagnostics": {
            "boot_failures": res.diagnostics["boot_failures"],
            "boot_nonconverged": res.diagnostics["boot_nonconverged"],
            "m_used": res.diagnostics["m_used"],
        },
        "config": _config_dict(res.config),
    })


def mgfc_report(res: MultivariateTestResult,
                statistics: tuple[str, ...] = ("l_inf", "l2")) -> dict:
    tmap = res.time_map
    out = {
        "test": "mgfc",
        "n_outcomes": res.per_outcome_stats.size,
        "per_outcome_statistics": res.per_outcome_stats,
        "basis_sizes": res.diagnostics["basis_sizes"],
        "m_used": {"l_inf": res.m_used_inf, "l2": res.m_used_l2},
        "error_vars": res.error_vars,
        "null_fit": {
            "Sigma_unit_scale": res.null_fit.Sigma,
            "Sigma_original_scale": tmap.map_re_cov_multi(res.null_fit.Sigma),
            "log_likelihood": res.null_fit.log_likelihood,
            "converged": res.null_fit.converged,
            "grad_norm": res.null_fit.grad_norm,
            "min_eigenvalue": res.null_fit.min_eigenvalue,
            "jittered": res.null_fit.jittered,
        },
        "time_map": {"offset": tmap.offset, "scale": tmap.scale},
        "diagnostics": {
            "boot_failures": res.diagnostics["boot_failures"],
            "boot_nonconverged": res.diagnostics["boot_nonconverged"],
            "truncation_applied": res.diagnostics["truncation_applied"],
            "sigma_jittered": res.diagnostics["sigma_jittered"],
            "sigma_estimates": [
                _sigma_estimate_dict(e)
                for e in res.diagnostics["sigma_estimates"]
            ],
        },
        "config": _config_dict(res.config),
    }
    if "l_inf" in statistics:
        out["statistic_inf"] = res.stat_inf
        out["p_inf"] = res.p_inf
        out["rejected_inf"] = res.rejected_inf
    if "l2" in statistics:
        out["statistic_l2"] = res.stat_l2
        out["p_l2"] = res.p_l2
        out["rejected_l2"] = res.rejected_l2
    if res.bonferroni is not None:
        out["bonferroni"] = {
            "p_values": res.bonferroni.p_values,
            "threshold": res.bonferroni.threshold,
            "flagged_outcomes": list(res.bonferroni.flagged),
        }
    return _jsonable(out)


def write_json(payload: dict, path) -> None:
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def write_draws_csv(res, path) -> None:
    """Bootstrap draw matrix as CSV (one row per replicate)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if isinstance(res, UnivariateTestResult):
            w.writerow(["replicate", "stat"])
            for b, v in enumerate(res.bootstrap_draws, start=1):
                w.writerow([b, f"{v:.17g}"])
            return
        K = res.per_outcome_stats.size
        head = ["replicate"]
        head += [f"stat_inf_outcome{k}" for k in range(1, K + 1)]
        head += [f"stat_l2_outcome{k}" for k in range(1, K + 1)]
        w.writerow(head)
        for b in range(res.boot_inf.shape[0]):
            row = [b + 1]
            row += [f"{v:.17g}" for v in res.boot_inf[b]]
            row += [f"{v:.17g}" for v in res.boot_l2[b]]
            w.writerow(row)


def write_surface_csv(res, k: int, path,
                      grid_size: int = SURFACE_GRID_SIZE) -> None:
    """61 x 61 grids of the truncated alternative and smoothed null
    covariance for outcome ``k``, on the original time scale."""
    if isinstance(res, UnivariateTestResult):
        if k != res.outcome:
            raise ValueError(f"result holds outcome {res.outcome}, not {k}")
        alt, nul = res.alt_fit.theta_star, res.smoothed_null.theta0
    else:
        alt = res.alt_surfaces[k - 1]
        nul = res.null_surfaces[k - 1]
    unit = np.linspace(0.0, 1.0, grid_size)
    orig = res.time_map.invert(unit)
    c_alt = surface_grid(alt, unit)
    c_nul = surface_grid(nul, unit)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "t_prime", "cov_alt_psd", "cov_null_smoothed"])
        for i in range(grid_size):
            for j in range(grid_size):
                w.writerow([
                    f"{orig[i]:.17g}", f"{orig[j]:.17g}",
                    f"{c_alt[i, j]:.17g}", f"{c_nul[i, j]:.17g}",
                ])


def experiment_json(cells: list[ExperimentCell]) -> dict:
    return _jsonable({
        "cells": [
            {
                "name": c.name,
                "n_reps": c.n_reps,
                "rates": c.rates,
                "std_errors": c.std_errors,
                "mean_runtime_s": round(c.mean_runtime, 3),
                "failures": c.failures,
                "scenario": c.spec_echo,
                "config": c.config_echo,
            }
            for c in cells
        ]
    })


def write_experiment_csv(cells: list[ExperimentCell], path) -> None:
    """One row per (cell, statistic, alpha)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "statistic", "alpha", "rate", "std_error",
                    "n_reps", "failures"])
        for c in cells:
            for stat in sorted(c.rates):
                for a in sorted(c.rates[stat]):
                    w.writerow([
                        c.name, stat, f"{a:g}",
                        f"{c.rates[stat][a]:.6f}",
                        f"{c.std_errors[stat][a]:.6f}",
                        c.n_reps, c.failures,
                    ])


def write_power_csv(cells: list[ExperimentCell], deltas, alpha: float,
                    path) -> None:
    """Power-curve table: one row per (delta, statistic)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["delta", "statistic", "rate", "std_error"])
        for d, c in zip(deltas, cells):
            for stat in sorted(c.rates):
                w.writerow([
                    f"{d:g}", stat,
                    f"{c.rates[stat][alpha]:.6f}",
                    f"{c.std_errors[stat][alpha]:.6f}",
                ])
