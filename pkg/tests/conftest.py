import numpy as np
import pytest

from covgof.dataset import from_rows


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def make_univariate(rng, n_subjects=60, j_range=(2, 7), sigma2=1.0,
                    d=(1.0, -0.3, 0.6), domain=(0.0, 1.0), mean_fn=None):
    """Random intercept/slope data on the given domain."""
    D = np.array([[d[0], d[1]], [d[1], d[2]]])
    L = np.linalg.cholesky(D)
    subj, tt, yy = [], [], []
    for i in range(n_subjects):
        J = int(rng.integers(*j_range))
        t = np.sort(rng.uniform(domain[0], domain[1], J))
        b = L @ rng.standard_normal(2)
        y = b[0] + b[1] * t + np.sqrt(sigma2) * rng.standard_normal(J)
        if mean_fn is not None:
            y = y + mean_fn(t)
        subj += [f"s{i:04d}"] * J
        tt.append(t)
        yy.append(y)
    n = sum(len(x) for x in tt)
    return from_rows(subj, np.ones(n, dtype=int),
                     np.concatenate(tt), np.concatenate(yy))
