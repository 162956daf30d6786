"""Tensor-product spline covariance estimation and PSD truncation.

The alternative covariance is the least-squares tensor-product surface fit
to within-subject cross products of residuals; the same design smooths the
fitted null covariance (responses swapped), which equalizes smoothing bias
between the two sides of the test statistic.  Both ordered pairs (j, j')
and (j', j) enter the problem; since the symmetric features coincide for
the two orders, the normal equations are accumulated over unordered pairs
and doubled, which is exact.

PSD truncation projects a surface onto the positive semi-definite cone in
Hilbert-Schmidt distance: eigenvalue clipping of G^{1/2} Theta G^{1/2},
mapped back with G^{-1/2}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .basis import BSplineBasis, CoefSurface, GramMatrix, gram_matrix
from .dataset import DemeanedDataset
from .errors import EstimationError, InsufficientDataError

RIDGE = 1e-10
_TRUNC_EPS = -1e-13  # eigenvalues above this count as already PSD


def sym_indices(n_basis: int):
    """Upper-triangle (row, col) indices defining the symmetric parameters."""
    return np.triu_indices(n_basis)


def vec_to_theta(v: np.ndarray, n_basis: int) -> np.ndarray:
    """Expand a symmetric parameter vector into the full H x H matrix."""
    r, c = sym_indices(n_basis)
    Th = np.zeros((n_basis, n_basis))
    Th[r, c] = v
    Th = Th + Th.T
    Th[np.diag_indices(n_basis)] *= 0.5
    return Th


def theta_to_vec(Th: np.ndarray) -> np.ndarray:
    r, c = sym_indices(Th.shape[0])
    return Th[r, c]


def duplication(n_basis: int) -> np.ndarray:
    """(H², p) matrix E with vec(Theta) = E v for symmetric parameters v."""
    r, c = sym_indices(n_basis)
    p = r.size
    E = np.zeros((n_basis * n_basis, p))
    E[r * n_basis + c, np.arange(p)] = 1.0
    off = r != c
    E[c[off] * n_basis + r[off], np.flatnonzero(off)] = 1.0
    return E


class PairDesign:
    """Pair-level design for one outcome on a fixed set of visit times.

    Precomputes everything response-independent: pair indices, symmetric
    features, the factored ridge normal matrix, and the map from null
    parameters (sigma0², sigma01, sigma1²) to the projected right-hand
    side.  Bootstrap replicates on the same design then cost two small
    triangular solves.
    """

    def __init__(self, subj, t, basis: BSplineBasis, n_subjects: int,
                 subject_blocks: bool = False):
        self.basis = basis
        H = basis.n_basis
        self.t = np.asarray(t, dtype=float)
        self.subj = np.asarray(subj)
        self.n_subjects = n_subjects
        counts = np.bincount(self.subj, minlength=n_subjects)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

        tri_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        p1_parts, p2_parts = [], []
        pair_counts = np.zeros(n_subjects, dtype=np.int64)
        for i in np.flatnonzero(counts >= 2):
            J = int(counts[i])
            if J not in tri_cache:
                tri_cache[J] = np.triu_indices(J, 1)
            a, b = tri_cache[J]
            p1_parts.append(a + starts[i])
            p2_parts.append(b + starts[i])
            pair_counts[i] = a.size
        if p1_parts:
            self.p1 = np.concatenate(p1_parts)
            self.p2 = np.concatenate(p2_parts)
        else:
            self.p1 = np.empty(0, dtype=int)
            self.p2 = np.empty(0, dtype=int)
        self.pair_counts = pair_counts
        self.pair_starts = np.concatenate([[0], np.cumsum(pair_counts)[:-1]])
        self.obs_counts = counts
        self.obs_starts = starts
        self.n_pairs_ordered = 2 * self.p1.size

        B = basis.design(self.t)
        self.B = B
        O = B[self.p1][:, :, None] * B[self.p2][:, None, :]
        S = O + O.transpose(0, 2, 1)
        r, c = sym_indices(H)
        Phi = S[:, r, c]
        Phi[:, r == c] *= 0.5
        self.Phi = Phi

        t1, t2 = self.t[self.p1], self.t[self.p2]
        self.F = np.column_stack([np.ones_like(t1), t1 + t2, t1 * t2])

        self.PhiTPhi = Phi.T @ Phi
        self.PhiTF = Phi.T @ self.F
        p = Phi.shape[1]
        try:
            self._solver = cho_factor(
                2.0 * self.PhiTPhi + RIDGE * np.eye(p), lower=True
            )
        except np.linalg.LinAlgError as exc:
            raise EstimationError(
                "pair normal equations singular beyond ridge rescue"
            ) from exc

        if subject_blocks:
            # per-subject pieces for assembling resampled designs
            seg = np.repeat(np.arange(n_subjects), pair_counts)
            pdim = Phi.shape[1]
            self.PhiTPhi_subj = np.zeros((n_subjects, pdim, pdim))
            outer = Phi[:, :, None] * Phi[:, None, :]
            np.add.at(self.PhiTPhi_subj, seg, outer)
            self.PhiTF_subj = np.zeros((n_subjects, pdim, 3))
            np.add.at(self.PhiTF_subj, seg, Phi[:, :, None] * self.F[:, None, :])

    def solve_products(self, resid: np.ndarray) -> np.ndarray:
        """Symmetric parameter vector fitted to residual cross products."""
        y = resid[self.p1] * resid[self.p2]
        return cho_solve(self._solver, 2.0 * (self.Phi.T @ y))

    def solve_null(self, params: tuple[float, float, float]) -> np.ndarray:
        """Parameter vector of the smoothed null surface (operator K)."""
        rhs = 2.0 * (self.PhiTF @ np.asarray(params, dtype=float))
        return cho_solve(self._solver, rhs)


@dataclass(frozen=True)
class AltCovariance:
    """Raw tensor-product estimate and its PSD-truncated counterpart."""

    theta_hat: CoefSurface
    theta_star: CoefSurface
    truncation_applied: bool
    min_eigenvalue_before: float


@dataclass(frozen=True)
class SmoothedNull:
    """Null covariance pushed through the pair least-squares smoother."""

    theta0: CoefSurface


def _psd_truncate_raw(theta: np.ndarray, gram: GramMatrix):
    """Return (theta_star, min_eig_before, applied)."""
    tilde = gram.sqrt @ theta @ gram.sqrt
    tilde = 0.5 * (tilde + tilde.T)
    evals, vecs = np.linalg.eigh(tilde)
    min_eig = float(evals.min())
    if min_eig >= _TRUNC_EPS:
        return theta.copy(), min_eig, False
    clipped = (vecs * np.clip(evals, 0.0, None)) @ vecs.T
    out = gram.inv_sqrt @ clipped @ gram.inv_sqrt
    return 0.5 * (out + out.T), min_eig, True


def psd_truncate(theta_hat: CoefSurface, gram: GramMatrix) -> CoefSurface:
    """Closest PSD surface in Hilbert-Schmidt distance.

    Clips negative eigenvalues of G^{1/2} Theta G^{1/2} and maps back; a
    surface that is already PSD is returned unchanged.
    """
    out, _, _ = _psd_truncate_raw(theta_hat.theta, gram)
    return CoefSurface(theta=out, basis=theta_hat.basis)


def _build_design(demeaned: DemeanedDataset, k: int, basis: BSplineBasis):
    subj, t, r = demeaned.outcome_arrays(k)
    design = PairDesign(subj, t, basis, demeaned.source.n_subjects)
    return design, r


def fit_alt_covariance(
    demeaned: DemeanedDataset,
    k: int,
    basis: BSplineBasis,
    gram: GramMatrix | None = None,
) -> AltCovariance:
    """Least-squares tensor-product covariance for outcome ``k``.

    Minimizes the squared error of residual cross products over symmetric
    coefficient matrices (ridge 1e-10 for rank protection) and attaches
    the PSD truncation.
    """
    H = basis.n_basis
    design, r = _build_design(demeaned, k, basis)
    if design.n_pairs_ordered < H * H:
        raise InsufficientDataError(
            f"covariance fit needs at least {H * H} ordered pairs, got "
            f"{design.n_pairs_ordered}"
        )
    theta = vec_to_theta(design.solve_products(r), H)
    if gram is None:
        gram = gram_matrix(basis)
    star, min_eig, applied = _psd_truncate_raw(theta, gram)
    return AltCovariance(
        theta_hat=CoefSurface(theta=theta, basis=basis),
        theta_star=CoefSurface(theta=star, basis=basis),
        truncation_applied=applied,
        min_eigenvalue_before=min_eig,
    )


def smooth_null(
    fit, demeaned: DemeanedDataset, k: int, basis: BSplineBasis
) -> SmoothedNull:
    """Apply the smoothing operator to the fitted null covariance.

    The fitted null surface is evaluated at the same pairs used by the
    alternative fit and pushed through the identical least-squares
    problem, so both sides of the test statistic carry the same smoothing
    bias.
    """
    H = basis.n_basis
    design, _ = _build_design(demeaned, k, basis)
    if design.n_pairs_ordered < H * H:
        raise InsufficientDataError(
            f"null smoothing needs at least {H * H} ordered pairs, got "
            f"{design.n_pairs_ordered}"
        )
    theta0 = vec_to_theta(design.solve_null(fit.params()), H)
    return SmoothedNull(theta0=CoefSurface(theta=theta0, basis=basis))
