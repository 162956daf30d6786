"""Goodness-of-fit tests for the random intercept/slope covariance model.

Univariate test: T_N is the Hilbert-Schmidt distance between the
tensor-product covariance estimate and the smoothed null covariance; its
null distribution comes from a parametric bootstrap that regenerates data
from the fitted null model and pushes every replicate through the full
pipeline (mean refit, null refit, covariance refit).

Multivariate test (K outcomes): per-outcome statistics are aggregated by
max (l_inf) and mean square (l2).  Bootstrap replicates draw correlated
random-effect vectors from the multivariate null fit and resample visit
patterns with replacement; the l_inf statistic uses an m-out-of-N sample
size, the l2 statistic uses m = N.

In ``improved`` mode the statistic uses the PSD-truncated covariance and
the smooth error-variance estimate; ``original`` mode keeps the raw
tensor-product estimate and the naive error variance, and exists to
reproduce the Type I inflation of the uncorrected test.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import rng as rng_mod
from .basis import BSplineBasis, CoefSurface, GramMatrix, build_basis, gram_matrix
from .covariance import (
    AltCovariance,
    PairDesign,
    SmoothedNull,
    _psd_truncate_raw,
    vec_to_theta,
)
from .dataset import DemeanedDataset, LongDataset, TimeRescale, rescale_time
from .error_variance import naive_from_arrays, smooth_from_arrays
from .errors import DataError, EstimationError, InsufficientDataError
from .lmm import (
    NullFitMultivariate,
    NullFitUnivariate,
    _warm_phi,
    fit_null_multivariate,
    fit_uni_suff,
)
from .mean import MIN_OBS
from .pspline import GcvSolver, second_diff_penalty


BASIS_SIZE_MAX = 12


@dataclass(frozen=True)
class TestConfig:
    """Resolved configuration of one test run.

    ``basis_size`` None picks the basis per outcome as
    min(12, #distinct visit times): a tensor basis cannot out-resolve the
    visit design, and balanced designs with few common times identify only
    that many basis functions.  ``n_boot`` is the number of bootstrap
    replicates B; ``m_cap`` keeps the m-out-of-N size for the l_inf
    statistic at or below N.  Replicate randomness is counter-based:
    replicate b only ever touches the stream keyed by (seed, b), so
    results do not depend on worker count.
    """

    __test__ = False  # not a pytest class, despite the name

    basis_size: int | None = None
    n_boot: int = 1000
    alpha: float = 0.05
    mode: str = "improved"
    m_cap: bool = True
    seed: int = 0
    mean_basis_size: int = 10
    var_basis_size: int = 5
    diag_basis_size: int = 10
    knot_placement: str = "equal"
    workers: int = 1
    pvalue_add_one: bool = False
    max_boot_fail: float = 0.05
    followup: bool = False

    def __post_init__(self):
        if self.n_boot < 1:
            raise DataError("n_boot must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise DataError("alpha must be in (0, 1)")
        if self.mode not in ("improved", "original"):
            raise DataError(f"unknown mode {self.mode!r}")
        if self.basis_size is not None and self.basis_size < 4:
            raise DataError("basis_size must be >= 4")

    def resolve_basis_size(self, times: np.ndarray) -> int:
        if self.basis_size is not None:
            return self.basis_size
        return int(min(BASIS_SIZE_MAX, max(4, np.unique(times).size)))


def m_out_of_n_size(n_subjects: int, statistic: str, cap: bool = True) -> int:
    """Bootstrap sample size: m = N for l2, min(N, ceil(7 N^(2/3))) for l_inf."""
    if n_subjects < 1:
        raise DataError("need at least one subject")
    if statistic == "l2":
        return n_subjects
    if statistic != "l_inf":
        raise DataError(f"unknown statistic {statistic!r}")
    m = math.ceil(7.0 * n_subjects ** (2.0 / 3.0))
    return min(n_subjects, m) if cap else m


def p_value(draws: np.ndarray, observed: float, add_one: bool = False) -> float:
    """Strict-exceedance bootstrap p-value (1/B) #{b : T*_b > T_N}."""
    draws = np.asarray(draws, dtype=float)
    if draws.size < 1:
        raise DataError("need at least one bootstrap draw")
    exceed = int((draws > observed).sum())
    if add_one:
        return (1 + exceed) / (1 + draws.size)
    return exceed / draws.size


def hs_distance(theta_a: CoefSurface, theta_0: CoefSurface,
                gram: GramMatrix) -> float:
    """Hilbert-Schmidt distance sqrt(tr(G D G D)), D the coefficient gap."""
    if theta_a.basis.n_basis != theta_0.basis.n_basis or not np.array_equal(
        theta_a.basis.knots, theta_0.basis.knots
    ):
        raise DataError("surfaces live on different bases")
    return _hs_from_matrices(theta_a.theta, theta_0.theta, gram.G)


def _hs_from_matrices(th_a: np.ndarray, th_0: np.ndarray, G: np.ndarray) -> float:
    delta = th_a - th_0
    GD = G @ delta
    return math.sqrt(max(float((GD * GD.T).sum()), 0.0))


def aggregate_stats(per_outcome: np.ndarray) -> tuple[float, float]:
    """(max_k T_k, mean_k T_k²) over per-outcome statistics."""
    t = np.asarray(per_outcome, dtype=float)
    if t.size == 0:
        raise DataError("aggregate of an empty statistic vector")
    return float(t.max()), float((t ** 2).mean())


# ---------------------------------------------------------------------------
# fixed-design pipeline for one outcome
# ---------------------------------------------------------------------------

class _OutcomeEngine:
    """Everything response-independent for one outcome's visit design."""

    def __init__(self, subj, t, n_subjects: int, config: TestConfig,
                 basis: BSplineBasis, gram: GramMatrix,
                 subject_blocks: bool = False):
        self.subj = np.asarray(subj)
        self.t = np.asarray(t, dtype=float)
        self.n_subjects = n_subjects
        self.basis = basis
        self.gram = gram
        self.config = config
        n = self.t.size
        if n < max(MIN_OBS, config.mean_basis_size):
            raise InsufficientDataError(
                f"outcome needs at least {max(MIN_OBS, config.mean_basis_size)}"
                f" observations, got {n}"
            )

        self.mean_basis = build_basis(config.mean_basis_size, "equal")
        self.Bmu = self.mean_basis.design(self.t)
        self.mean_penalty = second_diff_penalty(config.mean_basis_size)
        self.mean_solver = GcvSolver(self.Bmu.T @ self.Bmu, self.mean_penalty, n)

        # design-only part of the LMM sufficient statistics
        self.S_design = np.zeros((n_subjects, 3))
        self.S_design[:, 0] = np.bincount(self.subj, minlength=n_subjects)
        self.S_design[:, 1] = np.bincount(self.subj, weights=self.t,
                                          minlength=n_subjects)
        self.S_design[:, 2] = np.bincount(self.subj, weights=self.t * self.t,
                                          minlength=n_subjects)

        self.pairs = PairDesign(self.subj, self.t, basis, n_subjects,
                                subject_blocks=subject_blocks)
        H = basis.n_basis
        if self.pairs.n_pairs_ordered < H * H:
            raise InsufficientDataError(
                f"outcome has {self.pairs.n_pairs_ordered} ordered pairs; "
                f"needs at least {H * H}"
            )
        if subject_blocks:
            seg = self.subj
            Hm = config.mean_basis_size
            self.BtB_subj = np.zeros((n_subjects, Hm, Hm))
            np.add.at(self.BtB_subj, seg,
                      self.Bmu[:, :, None] * self.Bmu[:, None, :])
            # local (within-subject) pair indices for replicate assembly
            self.lp1 = self.p_local(self.pairs.p1)
            self.lp2 = self.p_local(self.pairs.p2)

    def p_local(self, p):
        subj_of_pair = self.subj[p]
        return p - self.pairs.obs_starts[subj_of_pair]

    def demean(self, values: np.ndarray):
        coef, lam, edf = self.mean_solver.solve(
            self.Bmu.T @ values, float(values @ values)
        )
        mu = self.Bmu @ coef
        return values - mu, mu, lam, edf

    def null_fit(self, resid: np.ndarray,
                 warm: np.ndarray | None = None) -> NullFitUnivariate:
        S = np.empty((self.n_subjects, 6))
        S[:, :3] = self.S_design
        S[:, 3] = np.bincount(self.subj, weights=resid,
                              minlength=self.n_subjects)
        S[:, 4] = np.bincount(self.subj, weights=self.t * resid,
                              minlength=self.n_subjects)
        S[:, 5] = np.bincount(self.subj, weights=resid * resid,
                              minlength=self.n_subjects)
        return fit_uni_suff(S, self.t.size, warm)

    def statistic(self, values: np.ndarray, warm: np.ndarray | None = None):
        """Full pipeline: returns (T, fit, resid, theta_hat, theta_use, theta0,
        min_eig, truncated)."""
        resid, _, _, _ = self.demean(values)
        fit = self.null_fit(resid, warm)
        H = self.basis.n_basis
        theta_hat = vec_to_theta(self.pairs.solve_products(resid), H)
        if self.config.mode == "improved":
            theta_use, min_eig, truncated = _psd_truncate_raw(theta_hat, self.gram)
        else:
            theta_use, min_eig, truncated = theta_hat, float("nan"), False
        theta0 = vec_to_theta(self.pairs.solve_null(fit.params()), H)
        T = _hs_from_matrices(theta_use, theta0, self.gram.G)
        return T, fit, resid, theta_hat, theta_use, theta0, min_eig, truncated


def _sample_re(rng, n: int, chol_lower: np.ndarray) -> np.ndarray:
    return rng.standard_normal((n, chol_lower.shape[0])) @ chol_lower.T


def _re_chol(mat: np.ndarray) -> np.ndarray:
    """Cholesky factor for sampling, jittered only if needed."""
    m = np.asarray(mat, dtype=float)
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        bump = 1e-10 * max(np.trace(m) / m.shape[0], 1.0)
        return np.linalg.cholesky(m + bump * np.eye(m.shape[0]))


# ---------------------------------------------------------------------------
# univariate test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UnivariateTestResult:
    statistic: float
    p_value: float
    sigma_sq_used: float
    null_fit: NullFitUnivariate
    alt_fit: AltCovariance
    smoothed_null: SmoothedNull
    bootstrap_draws: np.ndarray
    mode: str
    config: TestConfig
    time_map: TimeRescale
    outcome: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def rejected(self) -> bool:
        return self.p_value < self.config.alpha


def _uni_replicates(engine: _OutcomeEngine, d_chol, sigma, mu_obs,
                    warm, seed, b_lo, b_hi):
    """Bootstrap draws for replicate indices [b_lo, b_hi)."""
    draws = np.empty(b_hi - b_lo)
    n_fail = 0
    n_nonconv = 0
    subj, t = engine.subj, engine.t
    for b in range(b_lo, b_hi):
        rng = rng_mod.stream(seed, rng_mod.DOMAIN_BOOT, b)
        re = _sample_re(rng, engine.n_subjects, d_chol)
        x = re[subj, 0] + re[subj, 1] * t
        y = mu_obs + x + sigma * rng.standard_normal(t.size)
        try:
            T, fit, *_ = engine.statistic(y, warm)
        except (EstimationError, InsufficientDataError):
            draws[b - b_lo] = np.inf
            n_fail += 1
            continue
        if not fit.converged:
            n_nonconv += 1
        draws[b - b_lo] = T
    return draws, n_fail, n_nonconv


def run_univariate_test(data: LongDataset, k: int = 1,
                        config: TestConfig | None = None) -> UnivariateTestResult:
    """Improved (or original-mode) covariance goodness-of-fit test.

    Pipeline: rescale time to [0, 1], fit and remove the penalized-spline
    mean, ML-fit the null model, fit the tensor-product covariance (PSD
    truncated in improved mode), smooth the null through the same design,
    take the HS distance.  B parametric replicates regenerate data from
    the fitted null with the mode's error-variance estimate and repeat the
    whole pipeline.
    """
    config = config or TestConfig()
    if not 1 <= k <= data.n_outcomes:
        raise DataError(f"outcome index {k} out of range 1..{data.n_outcomes}")
    d01, tmap = rescale_time(data)
    subj, t, y = d01.outcome_arrays(k)

    basis = build_basis(config.resolve_basis_size(t), config.knot_placement,
                        times=t)
    gram = gram_matrix(basis)
    engine = _OutcomeEngine(subj, t, d01.n_subjects, config, basis, gram)

    T_obs, fit, resid, theta_hat, theta_use, theta0, min_eig, truncated = (
        engine.statistic(y)
    )
    if not fit.converged:
        raise EstimationError(
            f"null fit did not converge on the observed data "
            f"(grad norm {fit.grad_norm:.2e})"
        )

    if config.mode == "improved":
        star, star_min_eig, star_applied = theta_use, min_eig, truncated
    else:
        star, star_min_eig, star_applied = _psd_truncate_raw(theta_hat, gram)
    alt = AltCovariance(
        theta_hat=CoefSurface(theta=theta_hat, basis=basis),
        theta_star=CoefSurface(theta=star, basis=basis),
        truncation_applied=star_applied,
        min_eigenvalue_before=star_min_eig,
    )
    if config.mode == "improved":
        sig_est = smooth_from_arrays(
            subj, t, resid, d01.n_subjects,
            config.var_basis_size, config.diag_basis_size,
        )
    else:
        sig_est = naive_from_arrays(
            subj, t, resid, d01.n_subjects, theta_hat, basis,
            config.diag_basis_size,
        )

    mu_obs = y - resid
    d_chol = _re_chol(fit.re_cov)
    warm = _warm_phi(fit)
    sigma = math.sqrt(sig_est.sigma_sq)

    B = config.n_boot
    parts = _map_replicates(
        config.workers, B,
        _uni_replicates,
        (engine, d_chol, sigma, mu_obs, warm, config.seed),
    )
    draws = np.concatenate([p[0] for p in parts])
    n_fail = sum(p[1] for p in parts)
    n_nonconv = sum(p[2] for p in parts)
    if (n_fail + n_nonconv) > config.max_boot_fail * B:
        raise EstimationError(
            f"bootstrap refits failed or did not converge in "
            f"{n_fail + n_nonconv}/{B} replicates "
            f"(limit {config.max_boot_fail:.0%})"
        )

    return UnivariateTestResult(
        statistic=T_obs,
        p_value=p_value(draws, T_obs, config.pvalue_add_one),
        sigma_sq_used=sig_est.sigma_sq,
        null_fit=fit,
        alt_fit=alt,
        smoothed_null=SmoothedNull(theta0=CoefSurface(theta=theta0, basis=basis)),
        bootstrap_draws=draws,
        mode=config.mode,
        config=config,
        time_map=tmap,
        outcome=k,
        diagnostics={
            "boot_failures": n_fail,
            "boot_nonconverged": n_nonconv,
            "truncation_applied": truncated,
            "min_eigenvalue_before": min_eig,
            "sigma_estimate": sig_est,
            "m_used": d01.n_subjects,
            "basis_size": basis.n_basis,
        },
    )


def _map_replicates(workers, B, fn, args):
    """Run replicate ranges serially or across processes; order-insensitive."""
    if workers <= 1 or B < 8:
        return [fn(*args, 1, B + 1)]
    bounds = np.linspace(1, B + 1, workers * 2 + 1).astype(int)
    ranges = [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if a < b]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        futs = [ex.submit(fn, *args, a, b) for a, b in ranges]
        return [f.result() for f in futs]


# ---------------------------------------------------------------------------
# multivariate test (MGFC)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BonferroniFollowUp:
    p_values: np.ndarray
    threshold: float
    flagged: tuple[int, ...]   # outcomes with p < alpha / K


@dataclass(frozen=True)
class MultivariateTestResult:
    per_outcome_stats: np.ndarray
    stat_inf: float
    stat_l2: float
    p_inf: float
    p_l2: float
    boot_inf: np.ndarray       # (B, K) per-outcome draws, m-out-of-N stream
    boot_l2: np.ndarray        # (B, K) per-outcome draws, m = N stream
    m_used_inf: int
    m_used_l2: int
    null_fit: NullFitMultivariate
    error_vars: np.ndarray
    config: TestConfig
    time_map: TimeRescale
    alt_surfaces: tuple = ()    # per-outcome PSD-truncated covariance
    null_surfaces: tuple = ()   # per-outcome smoothed null covariance
    bonferroni: BonferroniFollowUp | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def rejected_inf(self) -> bool:
        return self.p_inf < self.config.alpha

    @property
    def rejected_l2(self) -> bool:
        return self.p_l2 < self.config.alpha


def _gather_ranges(starts, counts, idx):
    """Positions of the concatenated ranges [starts[i], starts[i]+counts[i])
    for i in idx; also the per-range lengths."""
    lens = counts[idx]
    total = int(lens.sum())
    if total == 0:
        return np.empty(0, dtype=int), lens
    offsets = np.cumsum(lens) - lens
    pos = np.arange(total) + np.repeat(starts[idx] - offsets, lens)
    return pos, lens


def _mgfc_outcome_stat(engine: _OutcomeEngine, idx, re_k, sigma_k, mu_obs_k,
                       warm_k, rng):
    """One outcome's bootstrap statistic on a resampled visit design."""
    m = idx.size
    pairs = engine.pairs
    obs_pos, obs_lens = _gather_ranges(pairs.obs_starts, pairs.obs_counts, idx)
    t_b = engine.t[obs_pos]
    subj_b = np.repeat(np.arange(m), obs_lens)
    n_b = t_b.size
    H = engine.basis.n_basis
    Hm = engine.config.mean_basis_size
    if n_b < max(MIN_OBS, Hm):
        raise InsufficientDataError("resampled design too small")

    x = re_k[subj_b, 0] + re_k[subj_b, 1] * t_b
    y = mu_obs_k[obs_pos] + x + sigma_k * rng.standard_normal(n_b)

    # mean refit on the assembled design
    counts = np.bincount(idx, minlength=engine.n_subjects)
    BtB = np.einsum("n,nab->ab", counts, engine.BtB_subj)
    Bmu_b = engine.Bmu[obs_pos]
    solver = GcvSolver(BtB, engine.mean_penalty, n_b)
    coef, _, _ = solver.solve(Bmu_b.T @ y, float(y @ y))
    resid = y - Bmu_b @ coef

    # null refit from assembled sufficient statistics
    S = np.empty((m, 6))
    S[:, :3] = engine.S_design[idx]
    S[:, 3] = np.bincount(subj_b, weights=resid, minlength=m)
    S[:, 4] = np.bincount(subj_b, weights=t_b * resid, minlength=m)
    S[:, 5] = np.bincount(subj_b, weights=resid * resid, minlength=m)
    fit = fit_uni_suff(S, n_b, warm_k)

    # covariance refit
    pair_pos, pair_lens = _gather_ranges(
        pairs.pair_starts, pairs.pair_counts, idx
    )
    if 2 * pair_pos.size < H * H:
        raise InsufficientDataError("resampled design has too few pairs")
    new_starts = np.cumsum(obs_lens) - obs_lens
    base = np.repeat(new_starts, pair_lens)
    p1_b = engine.lp1[pair_pos] + base
    p2_b = engine.lp2[pair_pos] + base
    Phi_b = pairs.Phi[pair_pos]
    PhiTPhi = np.einsum("n,npq->pq", counts, pairs.PhiTPhi_subj)
    PhiTF = np.einsum("n,npq->pq", counts, pairs.PhiTF_subj)
    fac = cho_factor(
        2.0 * PhiTPhi + 1e-10 * np.eye(Phi_b.shape[1]), lower=True
    )
    prod = resid[p1_b] * resid[p2_b]
    theta_hat = vec_to_theta(cho_solve(fac, 2.0 * (Phi_b.T @ prod)), H)
    if engine.config.mode == "improved":
        theta_use, _, _ = _psd_truncate_raw(theta_hat, engine.gram)
    else:
        theta_use = theta_hat
    rhs0 = 2.0 * (PhiTF @ np.asarray(fit.params()))
    theta0 = vec_to_theta(cho_solve(fac, rhs0), H)
    return _hs_from_matrices(theta_use, theta0, engine.gram.G), fit.converged


def _mgfc_replicates(engines, sig_chol, sigmas, mus, warms, seed,
                     m_inf, m_l2, b_lo, b_hi):
    K = len(engines)
    n_subj = engines[0].n_subjects
    nb = b_hi - b_lo
    stats_l2 = np.full((nb, K), np.inf)
    stats_inf = np.full((nb, K), np.inf)
    n_fail = 0
    n_nonconv = 0
    for b in range(b_lo, b_hi):
        rng = rng_mod.stream(seed, rng_mod.DOMAIN_BOOT, b)
        # m = N dataset feeds the l2 draws (and the l_inf draws when the
        # capped m-out-of-N size coincides with N)
        idx = rng.integers(0, n_subj, size=m_l2)
        re = _sample_re(rng, m_l2, sig_chol)
        ok = True
        for k in range(K):
            try:
                T, conv = _mgfc_outcome_stat(
                    engines[k], idx, re[:, 2 * k: 2 * k + 2], sigmas[k],
                    mus[k], warms[k], rng,
                )
            except (EstimationError, InsufficientDataError):
                n_fail += 1
                ok = False
                break
            if not conv:
                n_nonconv += 1
            stats_l2[b - b_lo, k] = T
        if m_inf == m_l2:
            stats_inf[b - b_lo] = stats_l2[b - b_lo]
            continue
        idx = rng.integers(0, n_subj, size=m_inf)
        re = _sample_re(rng, m_inf, sig_chol)
        for k in range(K):
            try:
                T, conv = _mgfc_outcome_stat(
                    engines[k], idx, re[:, 2 * k: 2 * k + 2], sigmas[k],
                    mus[k], warms[k], rng,
                )
            except (EstimationError, InsufficientDataError):
                n_fail += 1
                break
            if not conv:
                n_nonconv += 1
            stats_inf[b - b_lo, k] = T
    return stats_inf, stats_l2, n_fail, n_nonconv


def run_mgfc_test(data: LongDataset,
                  config: TestConfig | None = None) -> MultivariateTestResult:
    """Multivariate covariance goodness-of-fit test with aggregate statistics.

    Steps: demean each outcome; fit the 2K x 2K multivariate null for the
    random-effect covariance; estimate each outcome's error variance with
    the smooth estimator; compute per-outcome statistics and their max /
    mean-square aggregates; approximate both null distributions with a
    shared-stream parametric bootstrap (m = N for l2, m-out-of-N for
    l_inf); optionally follow up with per-outcome univariate tests at the
    Bonferroni threshold alpha/K.
    """
    config = config or TestConfig()
    if data.n_outcomes < 2:
        raise DataError("the multivariate test needs K >= 2 outcomes")
    if config.mode != "improved":
        raise DataError("the multivariate test only runs in improved mode")
    K = data.n_outcomes
    d01, tmap = rescale_time(data)
    N = d01.n_subjects

    engines = []
    resid_full = np.empty_like(d01.values)
    observed = np.empty(K)
    warms = []
    sigmas = np.empty(K)
    sig_ests = []
    mus = []
    trunc_flags = []
    alt_surfaces = []
    null_surfaces = []
    basis_sizes = []
    for k in range(1, K + 1):
        subj, t, y = d01.outcome_arrays(k)
        basis = build_basis(config.resolve_basis_size(t),
                            config.knot_placement, times=t)
        basis_sizes.append(basis.n_basis)
        gram = gram_matrix(basis)
        eng = _OutcomeEngine(subj, t, N, config, basis, gram,
                             subject_blocks=True)
        T, fit, resid, theta_hat, theta_use, theta0, min_eig, truncated = (
            eng.statistic(y)
        )
        if not fit.converged:
            raise EstimationError(
                f"outcome {k}: null fit did not converge on observed data"
            )
        engines.append(eng)
        observed[k - 1] = T
        warms.append(_warm_phi(fit))
        resid_full[d01.outcomes == k] = resid
        mus.append(y - resid)
        trunc_flags.append(truncated)
        alt_surfaces.append(CoefSurface(theta=theta_use, basis=basis))
        null_surfaces.append(CoefSurface(theta=theta0, basis=basis))
        sig_est = smooth_from_arrays(
            subj, t, resid, N, config.var_basis_size, config.diag_basis_size
        )
        sig_ests.append(sig_est)
        sigmas[k - 1] = math.sqrt(sig_est.sigma_sq)

    demeaned = DemeanedDataset(source=d01, residuals=resid_full, mean_fits={})
    mv_fit = fit_null_multivariate(demeaned)
    if not mv_fit.converged:
        raise EstimationError("multivariate null fit did not converge")
    sig_chol = _re_chol(mv_fit.Sigma)

    stat_inf, stat_l2 = aggregate_stats(observed)
    m_inf = m_out_of_n_size(N, "l_inf", config.m_cap)
    m_l2 = m_out_of_n_size(N, "l2")

    B = config.n_boot
    parts = _map_replicates(
        config.workers, B,
        _mgfc_replicates,
        (engines, sig_chol, sigmas, mus, warms, config.seed, m_inf, m_l2),
    )
    boot_inf = np.vstack([p[0] for p in parts])
    boot_l2 = np.vstack([p[1] for p in parts])
    n_fail = sum(p[2] for p in parts)
    n_nonconv = sum(p[3] for p in parts)
    if (n_fail + n_nonconv) > config.max_boot_fail * B * K:
        raise EstimationError(
            f"bootstrap refits failed or did not converge in "
            f"{n_fail + n_nonconv} of {B * K} outcome refits"
        )

    draws_inf = boot_inf.max(axis=1)
    draws_l2 = (boot_l2 ** 2).mean(axis=1)
    p_inf = p_value(draws_inf, stat_inf, config.pvalue_add_one)
    p_l2 = p_value(draws_l2, stat_l2, config.pvalue_add_one)

    bonf = None
    if config.followup and (p_inf < config.alpha or p_l2 < config.alpha):
        pvals = np.empty(K)
        for k in range(1, K + 1):
            sub_seed = rng_mod.derive_seed(config.seed, rng_mod.DOMAIN_FOLLOWUP, k)
            sub_cfg = replace(config, seed=sub_seed, followup=False)
            pvals[k - 1] = run_univariate_test(data, k, sub_cfg).p_value
        thr = config.alpha / K
        bonf = BonferroniFollowUp(
            p_values=pvals, threshold=thr,
            flagged=tuple(int(i + 1) for i in np.flatnonzero(pvals < thr)),
        )

    return MultivariateTestResult(
        per_outcome_stats=observed,
        stat_inf=stat_inf,
        stat_l2=stat_l2,
        p_inf=p_inf,
        p_l2=p_l2,
        boot_inf=boot_inf,
        boot_l2=boot_l2,
        m_used_inf=m_inf,
        m_used_l2=m_l2,
        null_fit=mv_fit,
        error_vars=sigmas ** 2,
        config=config,
        time_map=tmap,
        alt_surfaces=tuple(alt_surfaces),
        null_surfaces=tuple(null_surfaces),
        bonferroni=bonf,
        diagnostics={
            "boot_failures": n_fail,
            "boot_nonconverged": n_nonconv,
            "truncation_applied": trunc_flags,
            "sigma_estimates": sig_ests,
            "sigma_jittered": mv_fit.jittered,
            "basis_sizes": basis_sizes,
        },
    )
