"""Error-variance estimation under the alternative model.

Both estimators share the same recipe for the marginal variance curve
V(t): a GCV-penalized spline fit to squared residuals, whose expectation
is C(t, t) + sigma².  They differ in the covariance diagonal subtracted
from it:

* ``smooth``: the diagonal of a *penalized* tensor-product surface fitted
  to off-diagonal residual products (second-difference penalties on both
  margins, GCV).  Penalization keeps the diagonal from chasing noise, so
  sigma² is recovered accurately even in sparse designs.
* ``naive``: the diagonal of the *unpenalized* tensor-product estimate
  used by the test itself (original-style).  Its diagonal overfits under
  sparsity, which is exactly the failure mode the improved test removes;
  this mode exists to reproduce it.

The integral runs over a 201-point trapezoid on [0, 1], floored at 1e-8.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import BSplineBasis, build_basis
from .covariance import AltCovariance, PairDesign, duplication, vec_to_theta
from .dataset import DemeanedDataset
from .errors import InsufficientDataError
from .mean import _fit_mean_arrays
from .pspline import GcvSolver, second_diff_penalty

SIGMA2_FLOOR = 1e-8
N_GRID = 201


@dataclass(frozen=True)
class ErrorVarianceEstimate:
    sigma_sq: float
    method: str                    # "smooth" or "naive"
    smoothing_surface: float | None
    smoothing_diag: float
    floored: bool
    negative_mass: bool            # integrand negative over the whole grid


def check_arrays(subj, t, n_subjects: int) -> None:
    if t.size < 30:
        raise InsufficientDataError(
            f"error-variance estimation needs >= 30 observations, got {t.size}"
        )
    counts = np.bincount(subj, minlength=n_subjects)
    if int((counts >= 2).sum()) < 10:
        raise InsufficientDataError(
            "error-variance estimation needs >= 10 subjects with >= 2 visits"
        )


def _variance_curve(t, r, n_basis):
    """Penalized-spline fit of squared residuals, evaluated on the grid."""
    fit = _fit_mean_arrays(t, r * r, n_basis)
    grid = np.linspace(0.0, 1.0, N_GRID)
    return fit.predict(grid), fit.smoothing, grid


def _finish(curve_v, curve_c, grid, method, lam_surf, lam_diag):
    integrand = curve_v - curve_c
    raw = float(np.trapezoid(integrand, grid))
    floored = raw < SIGMA2_FLOOR
    return ErrorVarianceEstimate(
        sigma_sq=max(raw, SIGMA2_FLOOR),
        method=method,
        smoothing_surface=lam_surf,
        smoothing_diag=lam_diag,
        floored=floored,
        negative_mass=bool((integrand < 0).all()),
    )


def smooth_from_arrays(
    subj, t, r, n_subjects: int,
    surface_basis_size: int = 7,
    diag_basis_size: int = 10,
) -> ErrorVarianceEstimate:
    check_arrays(subj, t, n_subjects)
    H = surface_basis_size
    basis = build_basis(H, "equal")
    design = PairDesign(subj, t, basis, n_subjects)
    if design.p1.size == 0:
        raise InsufficientDataError("no usable within-subject pairs")

    # both-margin second-difference penalty, restricted to symmetric coefs
    E = duplication(H)
    P2 = second_diff_penalty(H)
    P_full = np.kron(P2, np.eye(H)) + np.kron(np.eye(H), P2)
    P_sym = E.T @ P_full @ E

    y = r[design.p1] * r[design.p2]
    solver = GcvSolver(2.0 * design.PhiTPhi, P_sym, design.n_pairs_ordered)
    coef, lam_surf, _ = solver.solve(
        2.0 * (design.Phi.T @ y), 2.0 * float(y @ y)
    )
    theta = vec_to_theta(coef, H)

    curve_v, lam_diag, grid = _variance_curve(t, r, diag_basis_size)
    Bg = basis.design(grid)
    curve_c = np.einsum("ih,hl,il->i", Bg, theta, Bg)
    return _finish(curve_v, curve_c, grid, "smooth", lam_surf, lam_diag)


def naive_from_arrays(
    subj, t, r, n_subjects: int,
    theta_hat: np.ndarray,
    basis: BSplineBasis,
    diag_basis_size: int = 10,
) -> ErrorVarianceEstimate:
    check_arrays(subj, t, n_subjects)
    curve_v, lam_diag, grid = _variance_curve(t, r, diag_basis_size)
    Bg = basis.design(grid)
    curve_c = np.einsum("ih,hl,il->i", Bg, theta_hat, Bg)
    return _finish(curve_v, curve_c, grid, "naive", None, lam_diag)


def estimate_error_variance_smooth(
    demeaned: DemeanedDataset,
    k: int = 1,
    surface_basis_size: int = 7,
    diag_basis_size: int = 10,
) -> ErrorVarianceEstimate:
    """Simultaneous smooth-covariance / error-variance estimate."""
    subj, t, r = demeaned.outcome_arrays(k)
    return smooth_from_arrays(
        subj, t, r, demeaned.source.n_subjects,
        surface_basis_size, diag_basis_size,
    )


def estimate_error_variance_naive(
    demeaned: DemeanedDataset,
    k: int,
    alt: AltCovariance,
    diag_basis_size: int = 10,
) -> ErrorVarianceEstimate:
    """Original-style estimate against the unpenalized covariance diagonal."""
    subj, t, r = demeaned.outcome_arrays(k)
    return naive_from_arrays(
        subj, t, r, demeaned.source.n_subjects,
        alt.theta_hat.theta, alt.theta_hat.basis, diag_basis_size,
    )
