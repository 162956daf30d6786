"""Cubic B-spline basis, exact Gram matrix, and tensor-product surfaces.

The basis lives on the internal unit interval.  All covariance surfaces in
the package are bilinear forms ``b(t)' Theta b(t')`` in this basis, and all
function-space norms reduce to matrix algebra through the Gram matrix
``G = int b(t) b(t)' dt``, which is computed exactly (per-interval
Gauss-Legendre, exact for products of cubics).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .errors import DataError

DEGREE = 3  # cubic, fixed


@dataclass(frozen=True)
class BSplineBasis:
    """Clamped cubic B-spline basis with ``n_basis`` functions on [0, 1]."""

    n_basis: int
    knots: np.ndarray          # length n_basis + 4, clamped at both ends
    placement: str = "equal"   # interior-knot rule used to build it

    @property
    def interior_knots(self) -> np.ndarray:
        return self.knots[DEGREE + 1 : -(DEGREE + 1)]

    def design(self, t: np.ndarray) -> np.ndarray:
        """Dense (len(t), n_basis) matrix of basis values at points ``t``."""
        t = np.asarray(t, dtype=float)
        if t.size and (t.min() < 0.0 or t.max() > 1.0):
            raise DataError(
                f"evaluation points outside [0, 1]: range "
                f"[{t.min():.6g}, {t.max():.6g}]"
            )
        return BSpline.design_matrix(t, self.knots, DEGREE).toarray()


def build_basis(
    n_basis: int,
    placement: str = "equal",
    times: np.ndarray | None = None,
) -> BSplineBasis:
    """Build a clamped cubic basis with ``n_basis`` functions.

    ``placement`` is the interior-knot rule: "equal" spaces the
    ``n_basis - 4`` interior knots evenly, "quantile" puts them at the
    empirical quantiles of ``times``.
    """
    if n_basis < 4:
        raise DataError(f"cubic basis needs n_basis >= 4, got {n_basis}")
    n_interior = n_basis - (DEGREE + 1)
    if placement == "equal":
        interior = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
    elif placement == "quantile":
        if times is None:
            raise DataError("quantile placement needs the observed times")
        t = np.unique(np.asarray(times, dtype=float))
        if t.size <= n_interior:
            raise DataError(
                f"quantile placement needs more than {n_interior} distinct "
                f"times, got {t.size}"
            )
        probs = np.arange(1, n_interior + 1) / (n_interior + 1)
        interior = np.quantile(t, probs)
    else:
        raise DataError(f"unknown knot placement {placement!r}")
    knots = np.concatenate(
        [np.zeros(DEGREE + 1), interior, np.ones(DEGREE + 1)]
    )
    return BSplineBasis(n_basis=n_basis, knots=knots, placement=placement)


def eval_basis(basis: BSplineBasis, t: float) -> np.ndarray:
    """Vector ``b(t)`` of the ``n_basis`` basis values at a single point."""
    return basis.design(np.array([float(t)]))[0]


@dataclass(frozen=True)
class GramMatrix:
    """Gram matrix ``G`` with its symmetric square root and inverse root."""

    G: np.ndarray
    sqrt: np.ndarray       # G^{1/2}, symmetric
    inv_sqrt: np.ndarray   # G^{-1/2}, symmetric


def gram_matrix(basis: BSplineBasis) -> GramMatrix:
    """Exact Gram matrix of the basis and its symmetric matrix roots.

    Integrates with 4-node Gauss-Legendre on each knot interval, exact for
    the degree-6 integrand.  Roots come from a symmetric eigendecomposition;
    a non-positive eigenvalue would mean a broken basis and raises.
    """
    nodes, weights = np.polynomial.legendre.leggauss(4)
    breaks = np.unique(basis.knots)
    H = basis.n_basis
    G = np.zeros((H, H))
    for a, b in zip(breaks[:-1], breaks[1:]):
        half = 0.5 * (b - a)
        x = a + half * (nodes + 1.0)
        Bx = basis.design(x)
        G += (half * weights)[None, :] * Bx.T @ Bx
    G = 0.5 * (G + G.T)
    evals, vecs = np.linalg.eigh(G)
    if evals.min() <= 0.0:
        raise AssertionError(
            f"Gram matrix not positive definite (min eig {evals.min():.3e})"
        )
    sqrt = (vecs * np.sqrt(evals)) @ vecs.T
    inv_sqrt = (vecs / np.sqrt(evals)) @ vecs.T
    return GramMatrix(G=G, sqrt=0.5 * (sqrt + sqrt.T),
                      inv_sqrt=0.5 * (inv_sqrt + inv_sqrt.T))


@dataclass(frozen=True)
class CoefSurface:
    """Symmetric coefficient matrix of a surface ``b(t)' Theta b(t')``."""

    theta: np.ndarray
    basis: BSplineBasis = field(repr=False)

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float)
        if th.shape != (self.basis.n_basis, self.basis.n_basis):
            raise DataError(
                f"coefficient matrix shape {th.shape} does not match basis "
                f"size {self.basis.n_basis}"
            )
        if not np.allclose(th, th.T, atol=1e-12, rtol=0.0):
            raise DataError("coefficient matrix is not symmetric")


def eval_surface(s: CoefSurface, t, tp) -> np.ndarray | float:
    """Evaluate ``b(t)' Theta b(t')``; broadcasts over array arguments."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    tp = np.atleast_1d(np.asarray(tp, dtype=float))
    Bt = s.basis.design(t)
    Btp = s.basis.design(tp)
    out = np.einsum("ih,hl,il->i", Bt, s.theta, Btp)
    return float(out[0]) if out.size == 1 else out


def surface_grid(s: CoefSurface, grid: np.ndarray) -> np.ndarray:
    """(len(grid), len(grid)) matrix of surface values on grid x grid."""
    B = s.basis.design(np.asarray(grid, dtype=float))
    return B @ s.theta @ B.T
