import numpy as np
import pytest

from covgof.basis import build_basis
from covgof.covariance import fit_alt_covariance
from covgof.dataset import DemeanedDataset, from_rows
from covgof.error_variance import (
    SIGMA2_FLOOR,
    estimate_error_variance_naive,
    estimate_error_variance_smooth,
)
from covgof.errors import InsufficientDataError
from tests.test_covariance import as_demeaned, random_psd_theta, spline_cov_data


def pure_noise_data(rng, n_subjects=500, sigma2=4.0, j_range=(5, 10)):
    subj, tt, yy = [], [], []
    for i in range(n_subjects):
        J = int(rng.integers(*j_range))
        subj += [f"s{i:04d}"] * J
        tt.append(np.sort(rng.uniform(0, 1, J)))
        yy.append(np.sqrt(sigma2) * rng.standard_normal(J))
    n = sum(len(x) for x in tt)
    return from_rows(subj, np.ones(n, dtype=int), np.concatenate(tt),
                     np.concatenate(yy))


class TestSmoothEstimator:
    def test_pure_noise_recovers_sigma(self, rng):
        data = pure_noise_data(rng, n_subjects=500, sigma2=4.0)
        est = estimate_error_variance_smooth(as_demeaned(data))
        assert 3.5 <= est.sigma_sq <= 4.5
        assert est.method == "smooth"

    def test_noise_free_data_estimates_near_zero(self, rng):
        # no nugget: the raw integral is 0 up to estimation noise, far
        # below the true variance scale of the curves (~0.4)
        basis = build_basis(5)
        data = spline_cov_data(rng, random_psd_theta(rng, 5), basis,
                               n_subjects=400, j_visits=12, noise=0.0)
        est = estimate_error_variance_smooth(as_demeaned(data))
        assert est.sigma_sq < 0.1 or est.floored

    def test_floor_is_enforced(self, rng):
        # deterministic floor: a covariance diagonal far above any
        # data-driven variance curve forces the clipped value
        from covgof.basis import CoefSurface
        from covgof.covariance import AltCovariance
        basis = build_basis(5)
        data = pure_noise_data(rng, n_subjects=80, sigma2=0.5)
        dm = as_demeaned(data)
        big = CoefSurface(theta=50.0 * np.eye(5), basis=basis)
        alt = AltCovariance(theta_hat=big, theta_star=big,
                            truncation_applied=False,
                            min_eigenvalue_before=0.0)
        est = estimate_error_variance_naive(dm, 1, alt)
        assert est.sigma_sq == SIGMA2_FLOOR
        assert est.floored
        assert est.negative_mass

    def test_preconditions(self, rng):
        data = pure_noise_data(rng, n_subjects=4, j_range=(2, 4))
        with pytest.raises(InsufficientDataError):
            estimate_error_variance_smooth(as_demeaned(data))


class TestNaiveEstimator:
    def test_agrees_with_smooth_on_dense_noise(self, rng):
        # dense design, pure noise: overfitting is mild, both estimators
        # land on the same value within 15%
        data = pure_noise_data(rng, n_subjects=300, sigma2=4.0,
                               j_range=(15, 21))
        dm = as_demeaned(data)
        alt = fit_alt_covariance(dm, 1, build_basis(5))
        smooth = estimate_error_variance_smooth(dm)
        naive = estimate_error_variance_naive(dm, 1, alt)
        assert naive.method == "naive"
        assert abs(naive.sigma_sq - smooth.sigma_sq) < 0.15 * smooth.sigma_sq

    def test_floored_when_alt_diagonal_dominates(self, rng):
        # noise-free smooth data: V-hat roughly equals the alt diagonal,
        # so the difference integrates to nothing and hits the floor
        basis = build_basis(5)
        data = spline_cov_data(rng, random_psd_theta(rng, 5), basis,
                               n_subjects=150, j_visits=12, noise=0.0)
        dm = as_demeaned(data)
        alt = fit_alt_covariance(dm, 1, basis)
        est = estimate_error_variance_naive(dm, 1, alt)
        assert est.sigma_sq <= 0.05
