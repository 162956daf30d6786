import numpy as np
import pytest

from covgof.dataset import rescale_time
from covgof.errors import DataError, EstimationError
from covgof.gof import TestConfig
from covgof.simulate import (
    SCENARIO2_VISIT_TABLE,
    ScenarioSpec,
    VisitModel,
    deviation_quadratic,
    deviation_trigonometric,
    generate,
    run_power_experiment,
    run_type1_experiment,
    scenario1_sigma,
    scenario1_spec,
    scenario2_spec,
    univariate_sparse_spec,
)


class TestUnivariateGenerator:
    def test_theoretical_variance_near_center(self):
        # Var(Y at t) = C0(t, t) + sigma^2; checked at the grid point
        # closest to zero (the 80-point grid has no exact 0)
        spec = univariate_sparse_spec(n_subjects=4000, error_var=2.0,
                                      seed=3)
        data = generate(spec, rep=0)
        grid = np.linspace(-1, 1, 80)
        t0 = grid[np.argmin(np.abs(grid))]
        at0 = np.abs(data.times - t0) < 1e-12
        assert at0.sum() > 100
        expected = 1.0 - 0.5 * 2 * t0 + 0.5 * t0 * t0 + 2.0
        v = data.values[at0].var()
        assert abs(v - expected) < 0.3

    def test_mean_visit_count(self):
        spec = univariate_sparse_spec(n_subjects=10_000, seed=4)
        data = generate(spec, rep=0)
        counts = data.visit_counts()[:, 0]
        assert abs(counts.mean() - 4.0) < 0.05
        assert set(np.unique(counts)) <= {2, 3, 4, 5, 6}

    def test_jbar7_choices(self):
        spec = univariate_sparse_spec(n_subjects=5000, mean_visits=7, seed=4)
        counts = generate(spec, rep=0).visit_counts()[:, 0]
        assert set(np.unique(counts)) <= {5, 6, 7, 8, 9}
        assert abs(counts.mean() - 7.0) < 0.06

    def test_times_from_80_point_grid(self):
        spec = univariate_sparse_spec(n_subjects=200, seed=5)
        data = generate(spec, rep=0)
        grid = np.linspace(-1, 1, 80)
        dists = np.abs(data.times[:, None] - grid[None, :]).min(axis=1)
        assert dists.max() < 1e-12

    def test_random_effect_moments(self):
        spec = univariate_sparse_spec(n_subjects=10_000, seed=6)
        data = generate(spec, rep=0)
        # recover per-subject OLS coefficients from dense-enough subjects
        coefs = []
        for i in range(data.n_subjects):
            m = data.subjects == i
            if m.sum() >= 5:
                t, y = data.times[m], data.values[m]
                Z = np.column_stack([np.ones(t.size), t])
                coefs.append(np.linalg.lstsq(Z, y, rcond=None)[0])
        coefs = np.array(coefs)
        emp = np.cov(coefs.T)
        # OLS noise inflates diagonals; intercept-slope covariance is clean
        assert abs(emp[0, 1] - (-0.5)) < 0.1

    def test_deterministic_given_seed_and_rep(self):
        spec = univariate_sparse_spec(n_subjects=50, seed=11)
        d1, d2 = generate(spec, rep=7), generate(spec, rep=7)
        assert np.array_equal(d1.values, d2.values)
        d3 = generate(spec, rep=8)
        assert not np.array_equal(d1.values, d3.values)


class TestDeviations:
    def test_quadratic_properties(self, rng):
        z = deviation_quadratic(rng)
        assert z(0.0) == 0.0
        for t in rng.uniform(0, 1, 10):
            assert z(t) == pytest.approx(z(-t))

    def test_quadratic_induced_covariance(self):
        # Cov(b t^2, b s^2) = t^2 s^2 for standard normal b
        draws = np.array([
            deviation_quadratic(np.random.default_rng(i))(np.array([0.5, 0.9]))
            for i in range(20_000)
        ])
        cov = draws[:, 0] @ draws[:, 1] / draws.shape[0]
        assert cov == pytest.approx(0.25 * 0.81, abs=0.01)

    def test_trigonometric_properties(self, rng):
        z = deviation_trigonometric(rng)
        assert abs(z(0.0)) < 1e-12
        vals = np.array([
            deviation_trigonometric(np.random.default_rng(i))(0.3)
            for i in range(20_000)
        ])
        assert abs(vals.mean()) < 0.05
        # Var = sin^2(2 pi t) + sin^2(4 pi t)
        expected = np.sin(0.6 * np.pi) ** 2 + np.sin(1.2 * np.pi) ** 2
        assert vals.var() == pytest.approx(expected, rel=0.05)


class TestScenario1:
    def test_sigma_structure(self):
        S = scenario1_sigma(3)
        assert S.shape == (6, 6)
        np.linalg.cholesky(S)
        blk = S[0:2, 0:2]
        assert np.allclose(blk, [[1.0, -0.25], [-0.25, 0.5]])
        cross = S[0:2, 2:4]
        assert np.allclose(cross, np.diag([0.5, 0.25]))

    def test_common_times_balanced(self):
        data = generate(scenario1_spec(n_subjects=40, n_visits=5, seed=1),
                        rep=0)
        counts = data.visit_counts()
        assert (counts == 5).all()
        per_subject = {tuple(np.round(data.times[data.subjects == i], 12))
                       for i in range(40)}
        assert len(per_subject) == 1  # same grid for everybody

    def test_cross_outcome_intercept_moment(self):
        data = generate(scenario1_spec(n_subjects=10_000, n_visits=5,
                                       seed=2), rep=0)
        # intercepts are the value at t=0 minus noise; use OLS intercepts
        K, N = 3, 10_000
        inter = np.empty((N, K))
        for k in range(1, K + 1):
            subj, t, y = data.outcome_arrays(k)
            for i in range(N):
                m = subj == i
                Z = np.column_stack([np.ones(5), t[m]])
                inter[i, k - 1] = np.linalg.lstsq(Z, y[m], rcond=None)[0][0]
        emp = np.cov(inter[:, 0], inter[:, 1])[0, 1]
        assert abs(emp - 0.5) < 0.05

    def test_setting_b_zeroes_other_outcomes(self):
        spec = scenario1_spec(n_subjects=30, n_visits=5, delta=1.0,
                              setting="b", seed=3)
        assert spec.effect_sizes.tolist() == [1.0, 0.0, 0.0]

    def test_delta_zero_is_exact_null(self):
        a = generate(scenario1_spec(n_subjects=25, n_visits=5, delta=0.0,
                                    setting="a", seed=9), rep=4)
        b = generate(scenario1_spec(n_subjects=25, n_visits=5, seed=9),
                     rep=4)
        assert np.array_equal(a.values, b.values)


class TestScenario2:
    def test_visit_table_facts(self):
        # oracle: direct expectation over the configured table
        vals = np.array(sorted(SCENARIO2_VISIT_TABLE))
        probs = np.array([SCENARIO2_VISIT_TABLE[v] for v in vals])
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)
        mean = float(vals @ probs)
        below5 = float(probs[vals < 5].sum())
        assert mean == pytest.approx(6.07, abs=1e-12)
        assert below5 == pytest.approx(0.72, abs=1e-12)
        spec = scenario2_spec(n_subjects=20_000, seed=12)
        counts = generate(spec, rep=0).visit_counts()[:, 0]
        assert abs(counts.mean() - mean) < 0.1
        assert abs((counts < 5).mean() - below5) < 0.02

    def test_times_sorted_distinct(self):
        data = generate(scenario2_spec(n_subjects=300, seed=13), rep=0)
        for i in range(50):
            t = data.times[(data.subjects == i) & (data.outcomes == 1)]
            assert (np.diff(t) > 0).all()

    def test_bad_visit_table_rejected(self):
        with pytest.raises(DataError):
            scenario2_spec(visit_table={2: 0.5, 3: 0.4})


class TestExperimentRunners:
    def test_always_reject_stub(self):
        spec = univariate_sparse_spec(n_subjects=10, seed=1)
        cell = run_type1_experiment(
            spec, TestConfig(n_boot=5), n_reps=20,
            test_fn=lambda data, cfg: {"stub": 0.0},
        )
        assert cell.rates["stub"][0.05] == 1.0
        assert cell.std_errors["stub"][0.05] == 0.0

    def test_never_reject_stub_and_se(self):
        spec = univariate_sparse_spec(n_subjects=10, seed=1)
        cell = run_type1_experiment(
            spec, TestConfig(n_boot=5), n_reps=30,
            test_fn=lambda data, cfg: {"stub": 1.0},
        )
        assert cell.rates["stub"][0.05] == 0.0

    def test_requires_null_design(self):
        spec = scenario1_spec(n_subjects=10, delta=0.5, seed=1)
        with pytest.raises(DataError):
            run_type1_experiment(spec, TestConfig(n_boot=5), n_reps=2)

    def test_failure_budget_aborts(self):
        spec = univariate_sparse_spec(n_subjects=10, seed=1)

        def failing(data, cfg):
            raise EstimationError("boom")

        with pytest.raises(EstimationError, match="2%"):
            run_type1_experiment(spec, TestConfig(n_boot=5), n_reps=10,
                                 test_fn=failing)

    def test_power_grid_cells_and_keys(self):
        spec = scenario1_spec(n_subjects=12, n_visits=5, seed=2)
        cells = run_power_experiment(
            spec, TestConfig(n_boot=5), deltas=[0.0, 0.5, 1.0],
            n_reps=4, include_bonferroni=False,
        )
        assert len(cells) == 3
        for c in cells:
            assert set(c.rates) == {"l_inf", "l2"}

    def test_power_empty_grid_rejected(self):
        spec = scenario1_spec(n_subjects=12, seed=2)
        with pytest.raises(DataError):
            run_power_experiment(spec, TestConfig(n_boot=5), deltas=[])

    def test_spec_invariants(self):
        with pytest.raises(DataError):
            ScenarioSpec(
                n_subjects=10, n_outcomes=1,
                visits=VisitModel(kind="fixed", n_visits=4),
                domain=(0.0, 1.0),
                sigma_re=np.eye(2), error_vars=np.ones(1),
                effect_sizes=np.array([-0.5]),
            )
        with pytest.raises(np.linalg.LinAlgError):
            ScenarioSpec(
                n_subjects=10, n_outcomes=1,
                visits=VisitModel(kind="fixed", n_visits=4),
                domain=(0.0, 1.0),
                sigma_re=np.array([[1.0, 2.0], [2.0, 1.0]]),
                error_vars=np.ones(1),
            )
