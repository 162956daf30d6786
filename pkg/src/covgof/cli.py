"""Command-line front end.

Commands: ``test`` (run the covariance goodness-of-fit test on a CSV),
``simulate`` (Type I error experiments for the named designs), ``power``
(power curves over an effect-size grid, with SVG charts), and ``report``
(pretty-print a saved report.json).

Exit codes: 0 success (regardless of the test outcome), 2 input error,
3 estimation failure, 4 internal error.  The seed resolves from --seed,
then the COVGOF_SEED environment variable, then the config file, then 0.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import report_io, svg
from .dataset import load_csv
from .errors import DataError, EstimationError
from .gof import TestConfig, run_mgfc_test, run_univariate_test
from .simulate import (
    run_power_experiment,
    run_type1_experiment,
    scenario1_spec,
    scenario2_spec,
    univariate_sparse_spec,
)

DESK_B = 200
DESK_R = 500
FULL_B = 1000
FULL_R = {"table1": 5000, "table2": 1000, "scenario1a": 1000,
          "scenario1b": 1000, "scenario2": 1000}

PRESETS = ("table1", "table2", "scenario1a", "scenario1b", "scenario2")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="covgof",
        description="Goodness-of-fit tests for parametric covariance "
                    "structures in sparse longitudinal data.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_input=False):
        if with_input:
            sp.add_argument("--input", required=True, help="long-format CSV")
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--B", type=int, default=None,
                        help="bootstrap replicates")
        sp.add_argument("--H", type=int, default=None, help="basis size")
        sp.add_argument("--alpha", type=float, default=None)
        sp.add_argument("--mode", choices=("improved", "original"),
                        default=None)
        sp.add_argument("--workers", type=int, default=None)
        sp.add_argument("--no-m-cap", action="store_true",
                        help="disable the m <= N cap for the l_inf size")

    t = sub.add_parser("test", help="test a CSV dataset")
    common(t, with_input=True)
    t.add_argument("--statistic", choices=("linf", "l2", "both"),
                   default="both")
    t.add_argument("--followup", action="store_true",
                   help="Bonferroni per-outcome follow-up on rejection")

    s = sub.add_parser("simulate", help="Type I error experiment")
    common(s)
    s.add_argument("--preset", choices=PRESETS, required=True)
    s.add_argument("--cell", default=None,
                   help="design cell, e.g. N=100,J=5 or sigma2=4,N=100,J=4")
    s.add_argument("--R", type=int, default=None, help="Monte Carlo reps")
    s.add_argument("--full-scale", action="store_true",
                   help="paper-scale R and B instead of desk scale")

    w = sub.add_parser("power", help="power curves over an effect-size grid")
    common(w)
    w.add_argument("--preset", choices=("scenario1a", "scenario1b",
                                        "scenario2"), required=True)
    w.add_argument("--cell", default=None)
    w.add_argument("--R", type=int, default=None)
    w.add_argument("--grid", required=True, help="lo:hi:step")
    w.add_argument("--statistic", choices=("linf", "l2", "both"),
                   default="both")
    w.add_argument("--no-bonferroni", action="store_true",
                   help="skip the adjusted univariate procedure")
    w.add_argument("--full-scale", action="store_true")

    r = sub.add_parser("report", help="print a saved report.json")
    r.add_argument("--input", required=True, help="report.json path")
    return p


def _load_config_file(path):
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {path} is not valid JSON: {exc}") from exc


def _resolve_seed(args, filecfg) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("COVGOF_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise DataError(f"COVGOF_SEED is not an integer: {env!r}") from None
    return int(filecfg.get("test", {}).get("seed", 0))


def _resolve_test_config(args, filecfg, default_boot=DESK_B) -> TestConfig:
    cfg = TestConfig(n_boot=default_boot)
    file_test = dict(filecfg.get("test", {}))
    file_test.pop("seed", None)
    known = set(TestConfig.__dataclass_fields__)
    unknown = set(file_test) - known
    if unknown:
        raise DataError(f"unknown test config keys: {sorted(unknown)}")
    cfg = replace(cfg, **file_test)
    over = {}
    if args.B is not None:
        over["n_boot"] = args.B
    if args.H is not None:
        over["basis_size"] = args.H
    if args.alpha is not None:
        over["alpha"] = args.alpha
    if getattr(args, "mode", None):
        over["mode"] = args.mode
    if args.workers is not None:
        over["workers"] = args.workers
    if args.no_m_cap:
        over["m_cap"] = False
    if getattr(args, "followup", False):
        over["followup"] = True
    over["seed"] = _resolve_seed(args, filecfg)
    return replace(cfg, **over)


def _parse_cell(text):
    cell = {}
    if not text:
        return cell
    for part in text.split(","):
        if "=" not in part:
            raise DataError(f"bad --cell entry {part!r}; expected key=value")
        key, val = part.split("=", 1)
        try:
            num = float(val)
        except ValueError:
            raise DataError(f"bad --cell value {val!r}") from None
        cell[key.strip()] = num
    return cell


def _parse_grid(text):
    try:
        lo, hi, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise DataError(f"bad --grid {text!r}; expected lo:hi:step") from None
    if step <= 0 or hi < lo:
        raise DataError(f"bad --grid {text!r}: need step > 0 and hi >= lo")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + i * step, 10) for i in range(n)]


def _preset_spec(preset, cell, seed, filecfg):
    scen = dict(filecfg.get("scenario", {}))
    scen.update(cell)
    if preset == "table1":
        return univariate_sparse_spec(
            n_subjects=int(scen.get("N", 100)),
            error_var=float(scen.get("sigma2", 4.0)),
            mean_visits=int(scen.get("J", 4)),
            sigma1_sq=float(scen.get("sigma1_sq", 0.5)),
            seed=seed,
        )
    if preset == "table2":
        return scenario1_spec(
            n_subjects=int(scen.get("N", 100)),
            n_visits=int(scen.get("J", 5)),
            seed=seed,
        )
    if preset in ("scenario1a", "scenario1b"):
        return scenario1_spec(
            n_subjects=int(scen.get("N", 100)),
            n_visits=int(scen.get("J", 5)),
            setting=preset[-1],
            seed=seed,
        )
    if preset == "scenario2":
        return scenario2_spec(n_subjects=int(scen.get("N", 500)), seed=seed)
    raise DataError(f"unknown preset {preset!r}")


def _cmd_test(args) -> int:
    filecfg = _load_config_file(args.config)
    config = _resolve_test_config(args, filecfg, default_boot=FULL_B)
    data = load_csv(args.input, filecfg.get("schema"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if data.n_outcomes == 1:
        res = run_univariate_test(data, 1, config)
        payload = report_io.univariate_report(res)
        report_io.write_surface_csv(res, 1, out / "cov_surface_1.csv")
    else:
        stats = {"linf": ("l_inf",), "l2": ("l2",),
                 "both": ("l_inf", "l2")}[args.statistic]
        res = run_mgfc_test(data, config)
        payload = report_io.mgfc_report(res, statistics=stats)
        for k in range(1, data.n_outcomes + 1):
            report_io.write_surface_csv(res, k, out / f"cov_surface_{k}.csv")
    report_io.write_json(payload, out / "report.json")
    report_io.write_draws_csv(res, out / "draws.csv")
    _print_summary(payload)
    return 0


def _print_summary(payload: dict) -> None:
    if payload["test"] == "univariate":
        print(f"univariate ({payload['mode']}): T_N = "
              f"{payload['statistic']:.4f}, p = {payload['p_value']:.4g}")
    else:
        if "statistic_inf" in payload:
            print(f"MGFC l_inf: T = {payload['statistic_inf']:.4f}, "
                  f"p = {payload['p_inf']:.4g}")
        if "statistic_l2" in payload:
            print(f"MGFC l2:    T = {payload['statistic_l2']:.4f}, "
                  f"p = {payload['p_l2']:.4g}")
        if "bonferroni" in payload:
            b = payload["bonferroni"]
            print(f"follow-up p-values: {b['p_values']} "
                  f"(threshold {b['threshold']:.4g}, "
                  f"flagged {b['flagged_outcomes']})")


def _cmd_simulate(args) -> int:
    filecfg = _load_config_file(args.config)
    seed = _resolve_seed(args, filecfg)
    default_b = FULL_B if args.full_scale else DESK_B
    config = _resolve_test_config(args, filecfg, default_boot=default_b)
    spec = _preset_spec(args.preset, _parse_cell(args.cell), seed, filecfg)
    R = args.R or (FULL_R[args.preset] if args.full_scale else DESK_R)
    workers = config.workers
    cell = run_type1_experiment(
        spec, replace(config, workers=1), n_reps=R,
        workers=workers, name=args.preset,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_io.write_json(report_io.experiment_json([cell]),
                         out / "simulate_report.json")
    report_io.write_experiment_csv([cell], out / "simulate_report.csv")
    for stat, by_alpha in sorted(cell.rates.items()):
        for a, rate in sorted(by_alpha.items()):
            se = cell.std_errors[stat][a]
            print(f"{args.preset} {stat} alpha={a:g}: "
                  f"rate = {rate:.4f} (SE {se:.4f})")
    return 0


def _cmd_power(args) -> int:
    filecfg = _load_config_file(args.config)
    seed = _resolve_seed(args, filecfg)
    default_b = FULL_B if args.full_scale else DESK_B
    config = _resolve_test_config(args, filecfg, default_boot=default_b)
    spec = _preset_spec(args.preset, _parse_cell(args.cell), seed, filecfg)
    deltas = _parse_grid(args.grid)
    R = args.R or (FULL_R[args.preset] if args.full_scale else DESK_R)
    setting = "b" if args.preset == "scenario1b" else "a"
    deviations = (("quadratic", "trigonometric")
                  if args.preset.startswith("scenario1") else ("quadratic",))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    workers = config.workers
    all_cells = []
    for deviation in deviations:
        spec_d = replace(spec, deviation=deviation)
        cells = run_power_experiment(
            spec_d, replace(config, workers=1), deltas, n_reps=R,
            include_bonferroni=not args.no_bonferroni,
            workers=workers, setting=setting,
            name=f"{args.preset}_{deviation}",
        )
        all_cells.extend(cells)
        report_io.write_power_csv(
            cells, deltas, config.alpha,
            out / f"power_curve_{deviation}.csv",
        )
        series = []
        labels = {"l_inf": "T_linf", "l2": "T_l2",
                  "bonferroni": "T_bonferroni", "univariate": "univariate"}
        for stat in sorted(cells[0].rates):
            ys = [c.rates[stat][config.alpha] for c in cells]
            series.append((labels.get(stat, stat), deltas, ys))
        svg.line_chart(
            series,
            title=f"{args.preset} power, {deviation} deviation",
            xlabel="effect size",
            ylabel=f"rejection rate at alpha={config.alpha:g}",
            path=out / f"power_{deviation}.svg",
            y_range=(0.0, 1.0),
        )
    report_io.write_json(report_io.experiment_json(all_cells),
                         out / "power_report.json")
    for c in all_cells:
        parts = [f"{stat}={c.rates[stat][config.alpha]:.3f}"
                 for stat in sorted(c.rates)]
        print(f"{c.name}: " + ", ".join(parts))
    return 0


def _cmd_report(args) -> int:
    try:
        payload = json.loads(Path(args.input).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {args.input}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.input} is not valid JSON: {exc}") from exc
    if "test" in payload:
        _print_summary(payload)
        cfg = payload.get("config", {})
        print(f"config: mode={cfg.get('mode')}, H={cfg.get('basis_size')}, "
              f"B={cfg.get('n_boot')}, seed={cfg.get('seed')}")
    elif "cells" in payload:
        for c in payload["cells"]:
            for stat, by_alpha in sorted(c["rates"].items()):
                for a, rate in sorted(by_alpha.items()):
                    print(f"{c['name']} {stat} alpha={a}: rate={rate:.4f}")
    else:
        raise DataError(f"{args.input} is not a covgof report")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "test":
            return _cmd_test(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "power":
            return _cmd_power(args)
        return _cmd_report(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # internal error
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
