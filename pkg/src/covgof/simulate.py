"""Data generators and Monte Carlo experiment runners.

Three visit designs: the sparse univariate design (visit counts uniform on
a small set, times drawn without replacement from an 80-point grid on
[-1, 1]), the balanced three-outcome design (common equispaced times), and
the unbalanced two-outcome design with an empirical visit-count table
whose defaults honor the published summary facts (mode below 5 visits,
mean about 6, over 70% below 5).

Every generator consumes randomness in a fixed documented order from a
counter-based stream keyed by (seed, replicate), so experiments are
reproducible and order-insensitive across workers.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rng_mod
from .dataset import LongDataset, from_rows
from .errors import DataError, EstimationError
from .gof import TestConfig, run_mgfc_test, run_univariate_test

DEFAULT_ALPHAS = (0.05, 0.10)

#: visit-count table for the unbalanced two-outcome design (config data,
#: not ground truth): P(J < 5) = 0.72, mean J = 6.07
SCENARIO2_VISIT_TABLE = {2: 0.30, 3: 0.25, 4: 0.17, 8: 0.05,
                         12: 0.08, 16: 0.08, 20: 0.07}


@dataclass(frozen=True)
class VisitModel:
    """How per-subject visit times arise.

    kind "fixed": all subjects share ``n_visits`` equispaced times.
    kind "grid": visit count uniform on ``count_choices``; times drawn
    without replacement from ``grid_size`` equispaced candidate points.
    kind "empirical": visit count from a discrete table; times uniform.
    """

    kind: str
    n_visits: int | None = None
    count_choices: tuple[int, ...] | None = None
    grid_size: int = 80
    count_values: tuple[int, ...] | None = None
    count_probs: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("fixed", "grid", "empirical"):
            raise DataError(f"unknown visit model {self.kind!r}")
        if self.kind == "empirical":
            total = float(np.sum(self.count_probs))
            if abs(total - 1.0) > 1e-9:
                raise DataError(
                    f"visit-count probabilities sum to {total}, not 1"
                )

    def mean_visits(self) -> float:
        if self.kind == "fixed":
            return float(self.n_visits)
        if self.kind == "grid":
            return float(np.mean(self.count_choices))
        return float(np.dot(self.count_values, self.count_probs))


@dataclass(frozen=True)
class ScenarioSpec:
    """Complete description of one simulation design."""

    n_subjects: int
    n_outcomes: int
    visits: VisitModel
    domain: tuple[float, float]
    sigma_re: np.ndarray = field(repr=False)   # 2K x 2K random-effect cov
    error_vars: np.ndarray                     # sigma_k² per outcome
    deviation: str = "none"                    # none|quadratic|trigonometric
    effect_sizes: np.ndarray = None            # Delta_k per outcome
    shared_deviation: bool = True              # one z_i shared by outcomes
    replications: int = 500
    seed: int = 0

    def __post_init__(self):
        K = self.n_outcomes
        if self.effect_sizes is None:
            object.__setattr__(self, "effect_sizes", np.zeros(K))
        eff = np.asarray(self.effect_sizes, dtype=float)
        object.__setattr__(self, "effect_sizes", eff)
        if (eff < 0).any():
            raise DataError("effect sizes must be >= 0")
        S = np.asarray(self.sigma_re, dtype=float)
        if S.shape != (2 * K, 2 * K):
            raise DataError(f"sigma_re must be {2*K} x {2*K}")
        np.linalg.cholesky(S)  # PD check; raises LinAlgError if not
        if self.deviation not in ("none", "quadratic", "trigonometric"):
            raise DataError(f"unknown deviation {self.deviation!r}")

    @property
    def is_null(self) -> bool:
        return self.deviation == "none" or bool((self.effect_sizes == 0).all())


def deviation_quadratic(rng: np.random.Generator):
    """Subject deviation t -> b2 t² with b2 standard normal."""
    b2 = rng.standard_normal()
    return lambda t: b2 * np.asarray(t, dtype=float) ** 2


def deviation_trigonometric(rng: np.random.Generator):
    """Subject deviation xi1 sin(2 pi t) + xi2 sin(4 pi t)."""
    xi1, xi2 = rng.standard_normal(2)
    return lambda t: (xi1 * np.sin(2 * np.pi * np.asarray(t, dtype=float))
                      + xi2 * np.sin(4 * np.pi * np.asarray(t, dtype=float)))


def _deviation_values(kind, coefs, t):
    """Vectorized z values given per-subject coefficients at times t."""
    if kind == "quadratic":
        return coefs[:, 0] * t * t
    return (coefs[:, 0] * np.sin(2 * np.pi * t)
            + coefs[:, 1] * np.sin(4 * np.pi * t))


def _n_dev_coefs(kind: str) -> int:
    return 1 if kind == "quadratic" else 2


def generate(spec: ScenarioSpec, rep: int = 0,
             seed: int | None = None) -> LongDataset:
    """Generate one dataset; ``(seed, rep)`` fully determines the draw.

    Randomness order: visit counts, visit times, random-effect vectors,
    deviation coefficients, then per-outcome noise.
    """
    rng = rng_mod.stream(spec.seed if seed is None else seed,
                         rng_mod.DOMAIN_DATA, rep)
    N, K = spec.n_subjects, spec.n_outcomes
    lo, hi = spec.domain
    vm = spec.visits

    if vm.kind == "fixed":
        counts = np.full(N, vm.n_visits, dtype=int)
        base = np.linspace(lo, hi, vm.n_visits)
        times = [base] * N
    elif vm.kind == "grid":
        choices = np.asarray(vm.count_choices)
        counts = choices[rng.integers(0, choices.size, size=N)]
        grid = np.linspace(lo, hi, vm.grid_size)
        times = [np.sort(rng.choice(grid, size=j, replace=False))
                 for j in counts]
    else:
        vals = np.asarray(vm.count_values)
        probs = np.asarray(vm.count_probs, dtype=float)
        counts = vals[rng.choice(vals.size, size=N, p=probs)]
        times = [np.sort(lo + (hi - lo) * rng.random(j)) for j in counts]

    L = np.linalg.cholesky(spec.sigma_re)
    re = rng.standard_normal((N, 2 * K)) @ L.T

    n_coef = _n_dev_coefs(spec.deviation) if spec.deviation != "none" else 0
    if n_coef:
        dev_shape = (N, n_coef) if spec.shared_deviation else (N, K, n_coef)
        dev = rng.standard_normal(dev_shape)

    subj_col, out_col, t_col, y_col = [], [], [], []
    width = len(str(N - 1))
    labels = np.array([f"s{i:0{width}d}" for i in range(N)])
    t_all = np.concatenate(times)
    subj_idx = np.repeat(np.arange(N), counts)
    for k in range(K):
        x = re[subj_idx, 2 * k] + re[subj_idx, 2 * k + 1] * t_all
        if n_coef and spec.effect_sizes[k] > 0:
            coefs = dev if spec.shared_deviation else dev[:, k]
            z = _deviation_values(spec.deviation, coefs[subj_idx], t_all)
            x = x + spec.effect_sizes[k] * z
        noise = np.sqrt(spec.error_vars[k]) * rng.standard_normal(t_all.size)
        subj_col.append(labels[subj_idx])
        out_col.append(np.full(t_all.size, k + 1, dtype=int))
        t_col.append(t_all)
        y_col.append(x + noise)

    return from_rows(
        np.concatenate(subj_col), np.concatenate(out_col),
        np.concatenate(t_col), np.concatenate(y_col),
        outcome_labels=tuple(str(k + 1) for k in range(K)),
    )


# ---------------------------------------------------------------------------
# named designs
# ---------------------------------------------------------------------------

def univariate_sparse_spec(
    n_subjects: int = 100,
    error_var: float = 4.0,
    mean_visits: int = 4,
    sigma0_sq: float = 1.0,
    sigma01: float = -0.5,
    sigma1_sq: float = 0.5,
    seed: int = 0,
) -> ScenarioSpec:
    """Sparse univariate design: times from an 80-point grid on [-1, 1].

    ``mean_visits`` 4 draws visit counts from {2..6}, 7 from {5..9}.  The
    slope variance is configurable because only the intercept variance and
    the intercept-slope covariance are pinned by the design.
    """
    if mean_visits == 4:
        choices = (2, 3, 4, 5, 6)
    elif mean_visits == 7:
        choices = (5, 6, 7, 8, 9)
    else:
        lo = max(2, mean_visits - 2)
        choices = tuple(range(lo, lo + 5))
    sigma = np.array([[sigma0_sq, sigma01], [sigma01, sigma1_sq]])
    return ScenarioSpec(
        n_subjects=n_subjects,
        n_outcomes=1,
        visits=VisitModel(kind="grid", count_choices=choices, grid_size=80),
        domain=(-1.0, 1.0),
        sigma_re=sigma,
        error_vars=np.array([error_var]),
        seed=seed,
    )


def scenario1_sigma(
    n_outcomes: int = 3,
    var0: float = 1.0,
    cov01: float = -0.25,
    var1: float = 0.5,
    cross_corr: float = 0.5,
) -> np.ndarray:
    """Default cross-outcome random-effect covariance for the balanced design.

    Each outcome has the same 2x2 block; intercepts correlate cross_corr
    between outcomes, slopes likewise, cross intercept-slope terms are 0.
    """
    K = n_outcomes
    own = np.array([[var0, cov01], [cov01, var1]])
    cross = np.diag([cross_corr * var0, cross_corr * var1])
    S = np.kron(np.eye(K), own - cross) + np.kron(np.ones((K, K)), cross)
    np.linalg.cholesky(S)
    return S


def scenario1_spec(
    n_subjects: int = 100,
    n_visits: int = 5,
    delta: float = 0.0,
    setting: str = "a",
    deviation: str = "quadratic",
    n_outcomes: int = 3,
    seed: int = 0,
) -> ScenarioSpec:
    """Balanced K-outcome design with common equispaced times on [0, 1].

    Setting "a" applies the effect size to every outcome, setting "b"
    only to the first.
    """
    if setting not in ("a", "b"):
        raise DataError(f"unknown setting {setting!r}")
    K = n_outcomes
    eff = np.full(K, delta) if setting == "a" else np.concatenate(
        [[delta], np.zeros(K - 1)]
    )
    return ScenarioSpec(
        n_subjects=n_subjects,
        n_outcomes=K,
        visits=VisitModel(kind="fixed", n_visits=n_visits),
        domain=(0.0, 1.0),
        sigma_re=scenario1_sigma(K),
        error_vars=np.ones(K),
        deviation=deviation if delta > 0 else "none",
        effect_sizes=eff,
        seed=seed,
    )


def scenario2_spec(
    n_subjects: int = 500,
    delta: float = 0.0,
    visit_table: dict[int, float] | None = None,
    seed: int = 0,
) -> ScenarioSpec:
    """Unbalanced two-outcome design with an empirical visit-count table."""
    table = SCENARIO2_VISIT_TABLE if visit_table is None else visit_table
    vals = tuple(sorted(table))
    probs = tuple(table[v] for v in vals)
    return ScenarioSpec(
        n_subjects=n_subjects,
        n_outcomes=2,
        visits=VisitModel(kind="empirical", count_values=vals,
                          count_probs=probs),
        domain=(0.0, 1.0),
        sigma_re=scenario1_sigma(2),
        error_vars=np.ones(2),
        deviation="quadratic" if delta > 0 else "none",
        effect_sizes=np.full(2, delta),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# experiment runners
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentCell:
    """Rejection rates of one design cell at each nominal level."""

    name: str
    n_reps: int
    rates: dict          # statistic -> {alpha: rate}
    std_errors: dict     # statistic -> {alpha: MC standard error}
    mean_runtime: float
    failures: int
    spec_echo: dict
    config_echo: dict


def _default_test(data: LongDataset, config: TestConfig) -> dict[str, float]:
    """Dispatch on K: p-values keyed by statistic name."""
    if data.n_outcomes == 1:
        res = run_univariate_test(data, 1, config)
        return {"univariate": res.p_value}
    res = run_mgfc_test(data, config)
    return {"l_inf": res.p_inf, "l2": res.p_l2}


def _type1_rep(spec, config, exp_seed, r, test_fn):
    data = generate(spec, rep=r, seed=exp_seed)
    cfg = replace(config, seed=rng_mod.derive_seed(exp_seed,
                                                   rng_mod.DOMAIN_TEST, r))
    t0 = time.perf_counter()
    pvals = test_fn(data, cfg)
    return pvals, time.perf_counter() - t0


def _run_reps(spec, config, R, test_fn, workers):
    """Run R generate-test cycles; returns (list of p-dicts or None, runtimes)."""
    exp_seed = spec.seed
    results = [None] * R
    runtimes = []
    failures = 0
    if workers <= 1:
        for r in range(R):
            try:
                results[r], dt = _type1_rep(spec, config, exp_seed, r, test_fn)
                runtimes.append(dt)
            except EstimationError:
                failures += 1
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = {
                ex.submit(_type1_rep, spec, config, exp_seed, r, test_fn): r
                for r in range(R)
            }
            for fut, r in futs.items():
                try:
                    results[r], dt = fut.result()
                    runtimes.append(dt)
                except EstimationError:
                    failures += 1
    if failures > 0.02 * R:
        raise EstimationError(
            f"{failures}/{R} replicates failed (> 2% aborts the cell)"
        )
    return results, runtimes, failures


def _rates_from_pvals(results, alphas):
    keys = next(r.keys() for r in results if r is not None)
    rates, ses = {}, {}
    for key in keys:
        p = np.array([r[key] for r in results if r is not None])
        rates[key] = {a: float((p < a).mean()) for a in alphas}
        ses[key] = {
            a: float(np.sqrt(rates[key][a] * (1 - rates[key][a]) / p.size))
            for a in alphas
        }
    return rates, ses


def run_type1_experiment(
    spec: ScenarioSpec,
    config: TestConfig,
    n_reps: int | None = None,
    alphas=DEFAULT_ALPHAS,
    test_fn=None,
    workers: int = 1,
    name: str = "type1",
) -> ExperimentCell:
    """Empirical Type I error of the dispatched test under a null design."""
    if not spec.is_null:
        raise DataError("Type I experiment requires a null design (delta = 0)")
    R = spec.replications if n_reps is None else n_reps
    test_fn = test_fn or _default_test
    results, runtimes, failures = _run_reps(spec, config, R, test_fn, workers)
    rates, ses = _rates_from_pvals(results, alphas)
    return ExperimentCell(
        name=name,
        n_reps=R,
        rates=rates,
        std_errors=ses,
        mean_runtime=float(np.mean(runtimes)) if runtimes else float("nan"),
        failures=failures,
        spec_echo=_spec_echo(spec),
        config_echo=_config_echo(config),
    )


def _bonferroni_test(data: LongDataset, config: TestConfig) -> dict[str, float]:
    """Per-outcome improved univariate tests; reports the minimal adjusted p.

    The Bonferroni procedure rejects when any per-outcome p-value is below
    alpha / K, i.e. when min_k p_k * K < alpha.
    """
    K = data.n_outcomes
    p_min = 1.0
    for k in range(1, K + 1):
        sub_seed = rng_mod.derive_seed(config.seed, rng_mod.DOMAIN_FOLLOWUP, k)
        res = run_univariate_test(data, k, replace(config, seed=sub_seed))
        p_min = min(p_min, res.p_value)
    return {"bonferroni": min(1.0, p_min * K)}


def _power_test_all(data: LongDataset, config: TestConfig) -> dict[str, float]:
    out = _default_test(data, config)
    out.update(_bonferroni_test(data, config))
    return out


def _power_test_aggregates(data, config):
    return _default_test(data, config)


def run_power_experiment(
    spec: ScenarioSpec,
    config: TestConfig,
    deltas,
    n_reps: int | None = None,
    alphas=DEFAULT_ALPHAS,
    include_bonferroni: bool = True,
    workers: int = 1,
    setting: str = "a",
    name: str = "power",
) -> list[ExperimentCell]:
    """Rejection rates over an effect-size grid.

    For each delta the aggregate statistics and (optionally) the
    Bonferroni-adjusted univariate procedure run on the same generated
    datasets.  ``spec`` provides the null design; deviations are switched
    on per delta with the spec's deviation kind (or quadratic by default).
    """
    deltas = list(deltas)
    if not deltas:
        raise DataError("empty effect-size grid")
    K = spec.n_outcomes
    deviation = spec.deviation if spec.deviation != "none" else "quadratic"
    pattern = np.ones(K) if setting == "a" else np.concatenate(
        [[1.0], np.zeros(K - 1)]
    )
    test_fn = _power_test_all if include_bonferroni else _power_test_aggregates
    cells = []
    for d in deltas:
        spec_d = replace(
            spec,
            deviation=deviation if d > 0 else "none",
            effect_sizes=d * pattern,
        )
        R = spec_d.replications if n_reps is None else n_reps
        results, runtimes, failures = _run_reps(
            spec_d, config, R, test_fn, workers
        )
        rates, ses = _rates_from_pvals(results, alphas)
        cells.append(ExperimentCell(
            name=f"{name}_delta={d:g}",
            n_reps=R,
            rates=rates,
            std_errors=ses,
            mean_runtime=float(np.mean(runtimes)) if runtimes else float("nan"),
            failures=failures,
            spec_echo=_spec_echo(spec_d),
            config_echo=_config_echo(config),
        ))
    return cells


def _spec_echo(spec: ScenarioSpec) -> dict:
    return {
        "n_subjects": spec.n_subjects,
        "n_outcomes": spec.n_outcomes,
        "visit_model": spec.visits.kind,
        "mean_visits": spec.visits.mean_visits(),
        "domain": list(spec.domain),
        "deviation": spec.deviation,
        "effect_sizes": np.asarray(spec.effect_sizes).tolist(),
        "error_vars": np.asarray(spec.error_vars).tolist(),
        "shared_deviation": spec.shared_deviation,
        "seed": spec.seed,
    }


def _config_echo(config: TestConfig) -> dict:
    return {
        "basis_size": config.basis_size,
        "n_boot": config.n_boot,
        "alpha": config.alpha,
        "mode": config.mode,
        "m_cap": config.m_cap,
        "mean_basis_size": config.mean_basis_size,
        "var_basis_size": config.var_basis_size,
        "diag_basis_size": config.diag_basis_size,
        "knot_placement": config.knot_placement,
        "pvalue_add_one": config.pvalue_add_one,
    }
