"""Penalized least squares with GCV-selected smoothing.

Shared by the mean fit and the smooth error-variance estimator.  The
smoothing parameter is always chosen by generalized cross-validation over
the fixed grid 2^-20 ... 2^20 (41 points), which keeps every fit
deterministic.
"""

from __future__ import annotations

import numpy as np

from ._fastpath import gcv_factorize, gcv_select
from .errors import EstimationError

LAMBDA_GRID = 2.0 ** np.arange(-20, 21).astype(float)


def second_diff_penalty(n_coef: int) -> np.ndarray:
    """DᵀD for the second-order difference matrix D ((n-2) x n)."""
    D = np.diff(np.eye(n_coef), n=2, axis=0)
    return D.T @ D


def gcv_fit(BtB, Bty, yty, penalty, n_obs, lambda_grid=None):
    """Solve min ||y - Bc||^2 + lam cᵀ P c with GCV-selected lam.

    Works from the normal-equation pieces so callers can assemble them
    however is cheapest.  Returns (coef, lam, edf).
    """
    lams = LAMBDA_GRID if lambda_grid is None else np.asarray(lambda_grid)
    Ls, edf, ok = gcv_factorize(
        np.ascontiguousarray(BtB), np.ascontiguousarray(penalty), lams
    )
    coef, idx, edf_best = gcv_select(
        Ls, edf, ok, np.ascontiguousarray(BtB),
        np.ascontiguousarray(Bty), float(yty), float(n_obs),
    )
    if idx < 0:
        raise EstimationError(
            "penalized system singular at every smoothing parameter "
            "(degenerate design)"
        )
    return coef, float(lams[idx]), float(edf_best)


class GcvSolver:
    """Reusable GCV solver for one fixed design matrix.

    Factorizes BᵀB + lam P once per lambda; repeated calls with new
    responses (the bootstrap hot path) only do back-substitutions.
    """

    def __init__(self, BtB, penalty, n_obs, lambda_grid=None):
        self.lams = LAMBDA_GRID if lambda_grid is None else np.asarray(lambda_grid)
        self.BtB = np.ascontiguousarray(BtB)
        self.n_obs = float(n_obs)
        self.Ls, self.edf, self.ok = gcv_factorize(
            self.BtB, np.ascontiguousarray(penalty), self.lams
        )
        if not self.ok.any():
            raise EstimationError(
                "penalized system singular at every smoothing parameter "
                "(degenerate design)"
            )

    def solve(self, Bty, yty):
        coef, idx, edf = gcv_select(
            self.Ls, self.edf, self.ok, self.BtB,
            np.ascontiguousarray(Bty), float(yty), self.n_obs,
        )
        if idx < 0:
            raise EstimationError("GCV found no solvable smoothing parameter")
        return coef, float(self.lams[idx]), float(edf)
