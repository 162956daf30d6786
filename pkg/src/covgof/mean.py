"""Penalized-spline mean estimation and demeaning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import BSplineBasis, build_basis
from .dataset import DemeanedDataset, LongDataset
from .errors import InsufficientDataError
from .pspline import GcvSolver, second_diff_penalty

MIN_OBS = 20


@dataclass(frozen=True)
class MeanFit:
    """Cubic P-spline mean with GCV-chosen second-difference penalty."""

    basis: BSplineBasis = field(repr=False)
    coef: np.ndarray
    smoothing: float
    edf: float

    def predict(self, t) -> np.ndarray:
        return self.basis.design(np.asarray(t, dtype=float)) @ self.coef


def _fit_mean_arrays(t, y, n_basis: int = 10) -> MeanFit:
    if t.size < max(MIN_OBS, n_basis):
        raise InsufficientDataError(
            f"mean fit needs at least {max(MIN_OBS, n_basis)} observations, "
            f"got {t.size}"
        )
    basis = build_basis(n_basis, "equal")
    B = basis.design(t)
    coef, lam, edf = GcvSolver(B.T @ B, second_diff_penalty(n_basis), t.size).solve(
        B.T @ y, float(y @ y)
    )
    return MeanFit(basis=basis, coef=coef, smoothing=lam, edf=edf)


def fit_mean(data: LongDataset, k: int = 1, n_basis: int = 10) -> MeanFit:
    """Fit the smooth mean of outcome ``k`` (times already on [0, 1])."""
    _, t, y = data.outcome_arrays(k)
    return _fit_mean_arrays(t, y, n_basis)


def demean(data: LongDataset, n_basis: int = 10) -> DemeanedDataset:
    """Remove each outcome's penalized-spline mean."""
    residuals = np.empty_like(data.values)
    fits: dict[int, MeanFit] = {}
    for k in range(1, data.n_outcomes + 1):
        m = data.outcomes == k
        fit = _fit_mean_arrays(data.times[m], data.values[m], n_basis)
        residuals[m] = data.values[m] - fit.predict(data.times[m])
        fits[k] = fit
    return DemeanedDataset(source=data, residuals=residuals, mean_fits=fits)
