import numpy as np
import pytest

from covgof.basis import BSplineBasis, CoefSurface, GramMatrix, build_basis, gram_matrix
from covgof.covariance import (
    PairDesign,
    fit_alt_covariance,
    psd_truncate,
    smooth_null,
    theta_to_vec,
    vec_to_theta,
)
from covgof.dataset import DemeanedDataset, from_rows
from covgof.errors import InsufficientDataError
from covgof.lmm import NullFitUnivariate


def hs_dist(a, b, G):
    d = a - b
    return np.sqrt(max(np.trace(G @ d @ G @ d), 0.0))


def as_demeaned(data):
    return DemeanedDataset(source=data, residuals=data.values.copy(),
                           mean_fits={})


def null_fit_stub(s0, s01, s1):
    return NullFitUnivariate(
        sigma0_sq=s0, sigma01=s01, sigma1_sq=s1, error_var=1.0,
        log_likelihood=0.0, converged=True, grad_norm=0.0, at_floor=False,
    )


def spline_cov_data(rng, theta, basis, n_subjects=300, j_visits=40,
                    noise=0.0):
    """Subjects drawn from a spline-representable covariance surface."""
    H = basis.n_basis
    evals, vecs = np.linalg.eigh(theta)
    evals = np.clip(evals, 0, None)
    half = (vecs * np.sqrt(evals)) @ vecs.T
    subj, tt, yy = [], [], []
    for i in range(n_subjects):
        t = np.sort(rng.uniform(0, 1, j_visits))
        B = basis.design(t)
        coef = half @ rng.standard_normal(H)
        y = B @ coef + noise * rng.standard_normal(j_visits)
        subj += [f"s{i:04d}"] * j_visits
        tt.append(t)
        yy.append(y)
    return from_rows(subj, np.ones(n_subjects * j_visits, dtype=int),
                     np.concatenate(tt), np.concatenate(yy))


def random_psd_theta(rng, H):
    A = rng.standard_normal((H, H))
    return A @ A.T / H


class TestVecSym:
    def test_round_trip(self, rng):
        for H in (4, 5, 7):
            A = rng.standard_normal((H, H))
            Th = A + A.T
            assert np.allclose(vec_to_theta(theta_to_vec(Th), H), Th)


class TestFitAltCovariance:
    def test_zero_residuals_give_zero_surface(self, rng):
        t = rng.uniform(0, 1, 200)
        data = from_rows([f"s{i % 40}" for i in range(200)],
                         np.ones(200, dtype=int), t, np.zeros(200))
        basis = build_basis(5)
        alt = fit_alt_covariance(as_demeaned(data), 1, basis)
        assert np.abs(alt.theta_hat.theta).max() < 1e-8
        assert not alt.truncation_applied

    def test_recovers_spline_covariance_dense_design(self):
        rng = np.random.default_rng(12)
        basis = build_basis(5)
        theta0 = 0.25 * random_psd_theta(rng, 5)
        data = spline_cov_data(rng, theta0, basis, n_subjects=3000,
                               j_visits=20)
        alt = fit_alt_covariance(as_demeaned(data), 1, basis)
        assert np.abs(alt.theta_hat.theta - theta0).max() < 0.05

    def test_minimizer_beats_random_perturbations(self, rng):
        from tests.conftest import make_univariate
        data = make_univariate(rng, n_subjects=50)
        dm = as_demeaned(data)
        basis = build_basis(5)
        design = PairDesign(*dm.outcome_arrays(1)[:2], basis,
                            data.n_subjects)
        r = dm.outcome_arrays(1)[2]
        v_hat = design.solve_products(r)
        y = r[design.p1] * r[design.p2]

        def objective(v):
            pred = design.Phi @ v
            return 2 * float(((y - pred) ** 2).sum()) + 1e-10 * float(v @ v)

        base = objective(v_hat)
        for _ in range(100):
            delta = 0.1 * rng.standard_normal(v_hat.size)
            assert objective(v_hat + delta) >= base - 1e-9

    def test_insufficient_pairs_rejected(self):
        data = from_rows(["a", "a", "b", "b"], np.ones(4, dtype=int),
                         [0.0, 1.0, 0.3, 0.7], [1.0, 2.0, 0.5, 1.5])
        with pytest.raises(InsufficientDataError):
            fit_alt_covariance(as_demeaned(data), 1, build_basis(5))


class TestSmoothNull:
    def test_zero_null_smooths_to_zero(self, rng):
        from tests.conftest import make_univariate
        data = make_univariate(rng, n_subjects=50)
        out = smooth_null(null_fit_stub(0.0, 0.0, 0.0), as_demeaned(data),
                          1, build_basis(5))
        assert np.abs(out.theta0.theta).max() < 1e-12

    def test_reproduces_spline_representable_null(self, rng):
        # the null surface is bilinear, hence exactly representable: the
        # smoother must reproduce it on the pair set
        from tests.conftest import make_univariate
        data = make_univariate(rng, n_subjects=80, j_range=(4, 9))
        dm = as_demeaned(data)
        basis = build_basis(5)
        fit = null_fit_stub(1.0, -0.3, 0.6)
        out = smooth_null(fit, dm, 1, basis)
        subj, t, _ = dm.outcome_arrays(1)
        design = PairDesign(subj, t, basis, data.n_subjects)
        t1, t2 = t[design.p1], t[design.p2]
        truth = 1.0 - 0.3 * (t1 + t2) + 0.6 * t1 * t2
        B = basis.design(t)
        pred = np.einsum("ph,hl,pl->p", B[design.p1], out.theta0.theta,
                         B[design.p2])
        assert np.abs(pred - truth).max() < 1e-8

    def test_linearity_in_the_null_surface(self, rng):
        from tests.conftest import make_univariate
        data = make_univariate(rng, n_subjects=40)
        dm = as_demeaned(data)
        basis = build_basis(5)
        a = smooth_null(null_fit_stub(1.0, -0.3, 0.6), dm, 1, basis)
        b = smooth_null(null_fit_stub(3.0, -0.9, 1.8), dm, 1, basis)
        assert np.allclose(3.0 * a.theta0.theta, b.theta0.theta, atol=1e-9)


def identity_gram(H):
    return GramMatrix(G=np.eye(H), sqrt=np.eye(H), inv_sqrt=np.eye(H))


def stub_basis(H):
    return BSplineBasis(n_basis=H, knots=np.zeros(H + 4))


class TestPsdTruncate:
    def test_psd_input_returned_unchanged(self, rng):
        basis = build_basis(5)
        gram = gram_matrix(basis)
        theta = random_psd_theta(rng, 5)
        out = psd_truncate(CoefSurface(theta=theta, basis=basis), gram)
        assert np.abs(out.theta - theta).max() < 1e-12

    def test_identity_gram_eigenvalue_clipping(self):
        theta = np.diag([2.0, -1.0])
        out = psd_truncate(CoefSurface(theta=theta, basis=stub_basis(2)),
                           identity_gram(2))
        assert np.allclose(out.theta, np.diag([2.0, 0.0]), atol=1e-14)

    def test_output_is_psd_in_gram_metric(self, rng):
        basis = build_basis(6)
        gram = gram_matrix(basis)
        for _ in range(25):
            A = rng.standard_normal((6, 6))
            out = psd_truncate(CoefSurface(theta=A + A.T, basis=basis), gram)
            tilde = gram.sqrt @ out.theta @ gram.sqrt
            assert np.linalg.eigvalsh(tilde).min() >= -1e-10

    def test_beats_random_psd_candidates(self, rng):
        # randomized optimality oracle: no random PSD surface is closer in
        # Hilbert-Schmidt distance than the truncation
        basis = build_basis(5)
        gram = gram_matrix(basis)
        A = rng.standard_normal((5, 5))
        theta = A + A.T
        out = psd_truncate(CoefSurface(theta=theta, basis=basis), gram)
        d_star = hs_dist(theta, out.theta, gram.G)
        for _ in range(500):
            cand_tilde = random_psd_theta(rng, 5)
            cand = gram.inv_sqrt @ cand_tilde @ gram.inv_sqrt
            assert hs_dist(theta, cand, gram.G) >= d_star - 1e-10

    def test_surface_psd_iff_gram_weighted_matrix_psd(self, rng):
        # surface values on a grid are PSD exactly when G^{1/2} Th G^{1/2}
        # is PSD (eigenvalues kept away from zero for a clean split)
        basis = build_basis(5)
        gram = gram_matrix(basis)
        grid = np.linspace(0, 1, 60)
        B = basis.design(grid)
        n_psd = 0
        for _ in range(200):
            Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
            signs = np.sign(rng.standard_normal(5))
            evals = signs * rng.uniform(0.1, 2.0, 5)
            tilde = (Q * evals) @ Q.T
            theta = gram.inv_sqrt @ tilde @ gram.inv_sqrt
            kernel = B @ theta @ B.T
            grid_psd = np.linalg.eigvalsh(kernel).min() >= -1e-8
            matrix_psd = evals.min() > 0
            assert grid_psd == matrix_psd
            n_psd += matrix_psd
        assert 0 < n_psd < 200  # both branches exercised
