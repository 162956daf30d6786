"""Maximum-likelihood fits of the random intercept/slope null models.

Univariate: per-subject marginal covariance Z_i D Z_iᵀ + sigma² I with
Z_i rows [1, t_ij].  The 2x2 random-effect covariance is parametrized by
a log-Cholesky factor, which keeps it positive semi-definite throughout
the optimization; the error variance is profiled out in the inner kernel.

Multivariate: the stacked model over K outcomes with a full 2K x 2K
random-effect covariance and outcome-specific error variances, fitted by
L-BFGS-B with an analytic gradient.  Both objectives are scaled per
subject, and convergence means the scaled gradient's infinity norm drops
below 1e-6 for at least one of the three starts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from ._fastpath import LOG2PI, uni_fit
from .dataset import DemeanedDataset
from .errors import EstimationError, InsufficientDataError

SIGMA2_FLOOR = 1e-8
GRAD_TOL = 1e-6
_START_SCALES = (1.0, 4.0, 0.25)  # D/sigma² guesses for the three starts


@dataclass(frozen=True)
class NullFitUnivariate:
    """ML estimate of (sigma0², sigma01, sigma1², sigma²) on [0, 1] time."""

    sigma0_sq: float
    sigma01: float
    sigma1_sq: float
    error_var: float
    log_likelihood: float
    converged: bool
    grad_norm: float
    at_floor: bool   # error variance collapsed to the positivity floor

    @property
    def re_cov(self) -> np.ndarray:
        return np.array(
            [[self.sigma0_sq, self.sigma01], [self.sigma01, self.sigma1_sq]]
        )

    def params(self) -> tuple[float, float, float]:
        return self.sigma0_sq, self.sigma01, self.sigma1_sq


def eval_null_cov(fit, t, tp):
    """Implied null covariance sigma0² + sigma01 (t+t') + sigma1² t t'."""
    t = np.asarray(t, dtype=float)
    tp = np.asarray(tp, dtype=float)
    out = fit.sigma0_sq + fit.sigma01 * (t + tp) + fit.sigma1_sq * t * tp
    return float(out) if out.ndim == 0 else out


def suff_stats(subj, t, r, n_subjects: int) -> np.ndarray:
    """(N, 6) per-subject statistics [J, sum t, sum t², sum r, sum tr, sum r²]."""
    S = np.empty((n_subjects, 6))
    S[:, 0] = np.bincount(subj, minlength=n_subjects)
    S[:, 1] = np.bincount(subj, weights=t, minlength=n_subjects)
    S[:, 2] = np.bincount(subj, weights=t * t, minlength=n_subjects)
    S[:, 3] = np.bincount(subj, weights=r, minlength=n_subjects)
    S[:, 4] = np.bincount(subj, weights=t * r, minlength=n_subjects)
    S[:, 5] = np.bincount(subj, weights=r * r, minlength=n_subjects)
    return S


def _default_starts(warm: np.ndarray | None = None) -> np.ndarray:
    starts = np.array(
        [[0.5 * np.log(s), 0.0, 0.5 * np.log(s)] for s in _START_SCALES]
    )
    if warm is not None:
        starts[1] = warm
    return starts


def fit_uni_suff(
    S: np.ndarray, n_obs: int, warm: np.ndarray | None = None
) -> NullFitUnivariate:
    """Fit from precomputed sufficient statistics (bootstrap hot path)."""
    phi, nll_scaled, sig2, conv, gnorm = uni_fit(
        np.ascontiguousarray(S), float(n_obs), _default_starts(warm),
        SIGMA2_FLOOR, GRAD_TOL, 100,
    )
    la, c, ld = np.exp(phi[0]), phi[1], np.exp(phi[2])
    # D = sigma² L Lᵀ
    d00 = sig2 * la * la
    d01 = sig2 * la * c
    d11 = sig2 * (c * c + ld * ld)
    return NullFitUnivariate(
        sigma0_sq=float(d00),
        sigma01=float(d01),
        sigma1_sq=float(d11),
        error_var=float(sig2),
        log_likelihood=float(-nll_scaled * S.shape[0]),
        converged=bool(conv),
        grad_norm=float(gnorm),
        at_floor=bool(sig2 <= SIGMA2_FLOOR * (1 + 1e-12)),
    )


def _warm_phi(fit: NullFitUnivariate) -> np.ndarray:
    """Profile parameters (log-Cholesky of D/sigma²) of an earlier fit."""
    D = fit.re_cov / fit.error_var
    d00 = max(D[0, 0], 1e-12)
    la = np.sqrt(d00)
    c = D[0, 1] / la
    ld = np.sqrt(max(D[1, 1] - c * c, 1e-12))
    return np.array([np.log(la), c, np.log(ld)])


def fit_null_univariate(
    demeaned: DemeanedDataset, k: int = 1, warm: NullFitUnivariate | None = None
) -> NullFitUnivariate:
    """ML fit of the null model for outcome ``k`` of demeaned data."""
    subj, t, r = demeaned.outcome_arrays(k)
    N = demeaned.source.n_subjects
    S = suff_stats(subj, t, r, N)
    if int((S[:, 0] > 0).sum()) < 2:
        raise InsufficientDataError(
            "null fit needs at least 2 subjects with observations"
        )
    return fit_uni_suff(S, t.size, None if warm is None else _warm_phi(warm))


# ---------------------------------------------------------------------------
# multivariate null model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NullFitMultivariate:
    """ML estimate of the 2K x 2K random-effect covariance and sigma_k²."""

    Sigma: np.ndarray
    error_vars: np.ndarray
    log_likelihood: float
    converged: bool
    grad_norm: float
    min_eigenvalue: float
    jittered: bool      # Sigma was ridged by +1e-8 I for downstream Cholesky

    @property
    def n_outcomes(self) -> int:
        return self.Sigma.shape[0] // 2

    def block(self, k: int, kp: int) -> np.ndarray:
        return self.Sigma[2 * (k - 1): 2 * k, 2 * (kp - 1): 2 * kp]

    def marginal(self, k: int) -> NullFitUnivariate:
        """Outcome-``k`` diagonal block repackaged as a univariate fit."""
        B = self.block(k, k)
        return NullFitUnivariate(
            sigma0_sq=float(B[0, 0]), sigma01=float(B[0, 1]),
            sigma1_sq=float(B[1, 1]), error_var=float(self.error_vars[k - 1]),
            log_likelihood=float("nan"), converged=self.converged,
            grad_norm=self.grad_norm, at_floor=False,
        )


def eval_cross_cov(fit: NullFitMultivariate, k: int, kp: int, t, tp):
    """Cross-covariance [1, t] Sigma_{kk'} [1, t']ᵀ of outcomes k and k'."""
    K = fit.n_outcomes
    if not (1 <= k <= K and 1 <= kp <= K):
        raise InsufficientDataError(f"outcome index out of range 1..{K}")
    B = fit.block(k, kp)
    t = np.asarray(t, dtype=float)
    tp = np.asarray(tp, dtype=float)
    out = B[0, 0] + B[1, 0] * t + B[0, 1] * tp + B[1, 1] * t * tp
    return float(out) if out.ndim == 0 else out


def _mv_stats(demeaned: DemeanedDataset):
    """Per subject and outcome: ZᵀZ, Zᵀr, rᵀr, J."""
    data = demeaned.source
    N, K = data.n_subjects, data.n_outcomes
    A = np.zeros((N, K, 2, 2))
    u = np.zeros((N, K, 2))
    s = np.zeros((N, K))
    J = np.zeros((N, K))
    for k in range(1, K + 1):
        subj, t, r = demeaned.outcome_arrays(k)
        Sk = suff_stats(subj, t, r, N)
        J[:, k - 1] = Sk[:, 0]
        A[:, k - 1, 0, 0] = Sk[:, 0]
        A[:, k - 1, 0, 1] = Sk[:, 1]
        A[:, k - 1, 1, 0] = Sk[:, 1]
        A[:, k - 1, 1, 1] = Sk[:, 2]
        u[:, k - 1, 0] = Sk[:, 3]
        u[:, k - 1, 1] = Sk[:, 4]
        s[:, k - 1] = Sk[:, 5]
    return A, u, s, J


def _unpack(params, K):
    """params -> (lower Cholesky L of Sigma, sigma_k²)."""
    p = 2 * K
    L = np.zeros((p, p))
    idx = 0
    for i in range(p):
        for j in range(i + 1):
            if i == j:
                L[i, i] = np.exp(params[idx])
            else:
                L[i, j] = params[idx]
            idx += 1
    sig2 = np.exp(params[idx: idx + K])
    return L, sig2


def _pack(Sigma, sig2):
    p = Sigma.shape[0]
    L = np.linalg.cholesky(Sigma)
    out = []
    for i in range(p):
        for j in range(i + 1):
            out.append(np.log(L[i, i]) if i == j else L[i, j])
    out.extend(np.log(sig2))
    return np.array(out)


def _mv_nll_grad(params, A, u, s, J):
    """Per-subject-scaled negative log-likelihood and gradient."""
    N, K = s.shape
    p = 2 * K
    L, sig2 = _unpack(params, K)

    inv2 = 1.0 / sig2
    T = np.zeros((N, p, p))
    c = np.zeros((N, p))
    for k in range(K):
        T[:, 2 * k: 2 * k + 2, 2 * k: 2 * k + 2] = A[:, k] * inv2[k]
        c[:, 2 * k: 2 * k + 2] = u[:, k] * inv2[k]

    TL = T @ L
    M = np.eye(p)[None, :, :] + L.T @ TL
    P = np.linalg.inv(M)
    _, logdet = np.linalg.slogdet(M)
    v = c @ L
    w = np.einsum("nab,nb->na", P, v)
    quad = s @ inv2 - np.einsum("na,na->n", v, w)
    n_total = J.sum()
    nll = 0.5 * (
        (J * np.log(sig2)).sum() + logdet.sum() + quad.sum() + n_total * LOG2PI
    )

    # gradient wrt L (full), then lower triangle with log-diag chain rule
    TLw = np.einsum("nab,nb->na", TL, w)
    G_L = (
        np.einsum("nab,nbc->ac", TL, P)
        - np.einsum("na,nb->ab", c, w)
        + np.einsum("na,nb->ab", TLw, w)
    )
    grad = []
    for i in range(p):
        for j in range(i + 1):
            grad.append(G_L[i, i] * L[i, i] if i == j else G_L[i, j])

    # gradient wrt log sigma_k²
    LPL = np.einsum("ab,nbc,dc->nad", L, P, L)
    g = w @ L.T
    for k in range(K):
        blk = LPL[:, 2 * k: 2 * k + 2, 2 * k: 2 * k + 2]
        tr_term = np.einsum("nab,nab->n", blk, A[:, k])
        gk = g[:, 2 * k: 2 * k + 2]
        res = (
            s[:, k]
            - 2.0 * np.einsum("na,na->n", gk, u[:, k])
            + np.einsum("na,nab,nb->n", gk, A[:, k], gk)
        )
        d_sig2 = 0.5 * (
            J[:, k].sum() * inv2[k]
            - inv2[k] ** 2 * (tr_term.sum() + res.sum())
        )
        grad.append(d_sig2 * sig2[k])

    return nll / N, np.asarray(grad) / N


def fit_null_multivariate(demeaned: DemeanedDataset) -> NullFitMultivariate:
    """ML fit of the stacked K-outcome null model.

    Starts from the per-outcome univariate fits (block-diagonal Sigma) plus
    two rescaled variants.  A near-singular Sigma (min eigenvalue < 1e-8)
    is flagged and ridged by +1e-8 I so downstream sampling can factorize.
    """
    data = demeaned.source
    K = data.n_outcomes
    if K < 2:
        raise InsufficientDataError(
            "multivariate fit needs K >= 2; use fit_null_univariate"
        )
    if data.n_subjects < 2 * K + 1:
        raise InsufficientDataError(
            f"multivariate fit needs at least {2 * K + 1} subjects"
        )
    A, u, s, J = _mv_stats(demeaned)

    uni = [fit_null_univariate(demeaned, k) for k in range(1, K + 1)]
    Sigma0 = np.zeros((2 * K, 2 * K))
    for k, f in enumerate(uni):
        Sigma0[2 * k: 2 * k + 2, 2 * k: 2 * k + 2] = f.re_cov
    ridge = 1e-6 * max(np.trace(Sigma0) / (2 * K), 1e-6)
    Sigma0 += ridge * np.eye(2 * K)
    sig2_0 = np.array([max(f.error_var, 1e-6) for f in uni])

    bounds = []
    for i in range(2 * K):
        for j in range(i + 1):
            bounds.append((-15.0, 10.0) if i == j else (-50.0, 50.0))
    bounds.extend([(np.log(SIGMA2_FLOOR), 10.0)] * K)

    best = None
    for scale in _START_SCALES:
        x0 = _pack(Sigma0 * scale, sig2_0 * scale)
        res = minimize(
            _mv_nll_grad, x0, args=(A, u, s, J), jac=True,
            method="L-BFGS-B", bounds=bounds,
            options={"maxiter": 800, "ftol": 1e-13, "gtol": GRAD_TOL},
        )
        gnorm = float(np.abs(res.jac).max())
        conv = gnorm < 1e-4  # scaled-gradient convergence check
        key = (not conv, res.fun)
        if best is None or key < best[0]:
            best = (key, res, conv, gnorm)
    _, res, conv, gnorm = best

    L, sig2 = _unpack(res.x, K)
    Sigma = L @ L.T
    Sigma = 0.5 * (Sigma + Sigma.T)
    evals = np.linalg.eigvalsh(Sigma)
    if evals.min() < -1e-8:
        raise EstimationError(
            f"fitted Sigma has eigenvalue {evals.min():.3e} < -1e-8 "
            "(implementation bug)"
        )
    jittered = False
    if evals.min() < 1e-8:
        Sigma = Sigma + 1e-8 * np.eye(2 * K)
        jittered = True
    return NullFitMultivariate(
        Sigma=Sigma,
        error_vars=sig2,
        log_likelihood=float(-res.fun * data.n_subjects),
        converged=bool(conv),
        grad_norm=gnorm,
        min_eigenvalue=float(evals.min()),
        jittered=jittered,
    )
