import numpy as np
import pytest

from covgof.dataset import (
    from_rows,
    load_csv,
    rescale_time,
    split_by_outcome,
    to_csv,
)
from covgof.errors import DataError


def write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestLoadCsv:
    def test_four_row_two_subject_csv(self, tmp_path):
        p = write(tmp_path, "subject,outcome,time,value\n"
                            "a,1,0.0,1.5\na,1,0.5,2.0\n"
                            "b,1,0.2,0.3\nb,1,0.9,-1.0\n")
        d = load_csv(p)
        assert d.n_subjects == 2
        assert d.n_outcomes == 1
        assert d.n_obs == 4
        assert d.dropped_rows == 0

    def test_single_visit_subject_loads_with_j1(self, tmp_path):
        p = write(tmp_path, "subject,outcome,time,value\n"
                            "a,1,0.0,1.0\na,1,1.0,2.0\nb,1,0.5,3.0\n")
        d = load_csv(p)
        counts = d.visit_counts()
        assert counts[d.subject_labels.index("b"), 0] == 1

    def test_missing_values_dropped_and_counted(self, tmp_path):
        rows = ["subject,outcome,time,value"]
        for i in range(100):
            val = "NA" if i in (3, 50, 97) else f"{i * 0.01}"
            rows.append(f"s{i % 10},1,{i * 0.01},{val}")
        d = load_csv(write(tmp_path, "\n".join(rows) + "\n"))
        assert d.n_obs == 97
        assert d.dropped_rows == 3

    def test_non_numeric_time_reports_line(self, tmp_path):
        p = write(tmp_path, "subject,outcome,time,value\n"
                            "a,1,0.0,1.0\na,1,oops,2.0\n")
        with pytest.raises(DataError, match="line 3"):
            load_csv(p)

    def test_zero_usable_rows(self, tmp_path):
        p = write(tmp_path, "subject,outcome,time,value\na,1,0.0,NA\n")
        with pytest.raises(DataError, match="zero usable rows"):
            load_csv(p)

    def test_missing_column(self, tmp_path):
        p = write(tmp_path, "id,outcome,time,value\na,1,0.0,1.0\n")
        with pytest.raises(DataError, match="missing columns"):
            load_csv(p)

    def test_schema_override(self, tmp_path):
        p = write(tmp_path, "id,var,t,y\na,1,0.0,1.0\na,1,1.0,2.0\n")
        d = load_csv(p, schema={"subject": "id", "outcome": "var",
                                "time": "t", "value": "y"})
        assert d.n_obs == 2

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(DataError):
            load_csv(tmp_path / "nope.csv")

    def test_outcome_labels_numeric_order(self, tmp_path):
        p = write(tmp_path, "subject,outcome,time,value\n"
                            "a,10,0.0,1.0\na,2,0.5,1.0\na,10,1.0,2.0\n")
        d = load_csv(p)
        assert d.outcome_labels == ("2", "10")

    def test_round_trip(self, tmp_path, rng):
        d = from_rows(
            [f"s{i}" for i in rng.integers(0, 8, 40)],
            rng.integers(1, 3, 40),
            rng.uniform(-3, 7, 40),
            rng.standard_normal(40),
        )
        out = tmp_path / "out.csv"
        to_csv(d, out)
        d2 = load_csv(out)
        assert d2.subject_labels == d.subject_labels
        assert np.array_equal(d2.subjects, d.subjects)
        assert np.array_equal(d2.outcomes, d.outcomes)
        assert np.array_equal(d2.times, d.times)
        assert np.array_equal(d2.values, d.values)


class TestRescaleTime:
    def test_affine_map_to_unit_interval(self):
        d = from_rows(["a", "a", "b"], [1, 1, 1], [-1.0, 0.0, 1.0],
                      [1.0, 2.0, 3.0])
        r, m = rescale_time(d)
        assert r.times.tolist() == [0.0, 0.5, 1.0]
        assert m.offset == -1.0
        assert m.scale == 2.0

    def test_identity_when_already_unit(self):
        d = from_rows(["a", "a"], [1, 1], [0.0, 1.0], [1.0, 2.0])
        r, m = rescale_time(d)
        assert m.offset == 0.0 and m.scale == 1.0
        assert np.array_equal(r.times, d.times)

    def test_degenerate_domain_rejected(self):
        d = from_rows(["a", "b"], [1, 1], [0.5, 0.5], [1.0, 2.0])
        with pytest.raises(DataError, match="degenerate"):
            rescale_time(d)

    def test_inverse_restores_times(self, rng):
        t = rng.uniform(-10, 25, 200)
        d = from_rows([f"s{i % 9}" for i in range(200)],
                      np.ones(200, dtype=int), t, rng.standard_normal(200))
        r, m = rescale_time(d)
        # rows were re-sorted identically, compare through the map
        assert np.abs(m.invert(m.apply(t)) - t).max() < 1e-12

    def test_null_params_map_back_to_original_scale(self, rng):
        # fitting on [0,1] and mapping the 2x2 random-effect covariance
        # back must reproduce the covariance function at original times
        a, s = 2.0, 5.0
        d_unit = np.array([[0.8, -0.2], [-0.2, 0.4]])
        m = rescale_time(from_rows(
            ["x", "x"], [1, 1], [a, a + s], [0.0, 0.0]))[1]
        assert m.offset == a and m.scale == s
        d_orig = m.map_re_cov(d_unit)
        for t1 in rng.uniform(a, a + s, 25):
            for t2 in rng.uniform(a, a + s, 4):
                u1, u2 = m.apply(t1), m.apply(t2)
                c_unit = (d_unit[0, 0] + d_unit[0, 1] * (u1 + u2)
                          + d_unit[1, 1] * u1 * u2)
                c_orig = (d_orig[0, 0] + d_orig[0, 1] * (t1 + t2)
                          + d_orig[1, 1] * t1 * t2)
                assert c_orig == pytest.approx(c_unit, abs=1e-10)

    def test_multivariate_map_blockwise(self, rng):
        A = rng.standard_normal((4, 4))
        sigma = A @ A.T + 0.5 * np.eye(4)
        m = rescale_time(from_rows(["x", "x"], [1, 1], [-1.0, 1.0],
                                   [0.0, 0.0]))[1]
        mapped = m.map_re_cov_multi(sigma)
        for k in range(2):
            blk = sigma[2 * k: 2 * k + 2, 2 * k: 2 * k + 2]
            assert np.allclose(mapped[2 * k: 2 * k + 2, 2 * k: 2 * k + 2],
                               m.map_re_cov(blk))


class TestSplitByOutcome:
    def make(self, rng):
        n = 60
        return from_rows([f"s{i % 7}" for i in range(n)],
                         rng.integers(1, 4, n), rng.uniform(0, 1, n),
                         rng.standard_normal(n),
                         outcome_labels=("a", "b", "c"))

    def test_split_keeps_only_requested_outcome(self, rng):
        d = self.make(rng)
        v = split_by_outcome(d, 2)
        assert v.n_outcomes == 1
        assert v.outcome_labels == ("b",)
        assert v.n_obs == int((d.outcomes == 2).sum())

    def test_out_of_range_rejected(self, rng):
        with pytest.raises(DataError):
            split_by_outcome(self.make(rng), 4)

    def test_splits_partition_rows(self, rng):
        d = self.make(rng)
        total = sum(split_by_outcome(d, k).n_obs
                    for k in range(1, d.n_outcomes + 1))
        assert total == d.n_obs
