"""Sparse multivariate longitudinal data in long format.

One row per measurement: (subject, outcome, time, value).  Long format is
deliberate: visit times may differ between outcomes of the same subject,
which a wide layout cannot express.  Datasets are immutable after
construction and safe to share across workers.

All model code runs on times rescaled to [0, 1]; :func:`rescale_time`
returns the affine map so fitted covariance parameters can be reported on
the original scale (see :meth:`TimeRescale.map_re_cov`).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

DEFAULT_SCHEMA = {
    "subject": "subject",
    "outcome": "outcome",
    "time": "time",
    "value": "value",
}

_MISSING = {"", "na", "nan", "null", "none", "."}


@dataclass(frozen=True)
class Observation:
    """A single measurement of one outcome of one subject."""

    subject_id: str
    outcome_id: int
    time: float
    value: float


@dataclass(frozen=True)
class LongDataset:
    """Validated long-format dataset.

    Rows are stored canonically sorted by (subject label, outcome, time).
    ``subjects`` holds 0-based subject indices into ``subject_labels``;
    ``outcomes`` holds 1-based outcome codes into ``outcome_labels``.
    """

    subjects: np.ndarray
    outcomes: np.ndarray
    times: np.ndarray
    values: np.ndarray
    subject_labels: tuple[str, ...]
    outcome_labels: tuple[str, ...]
    dropped_rows: int = 0

    def __post_init__(self):
        n = self.times.size
        if n == 0:
            raise DataError("dataset has zero usable rows")
        if not (np.isfinite(self.times).all() and np.isfinite(self.values).all()):
            raise DataError("non-finite time or value")
        if self.outcomes.min() < 1 or self.outcomes.max() > self.n_outcomes:
            raise DataError("outcome code outside 1..K")
        if np.unique(self.subjects).size != self.n_subjects:
            raise DataError("every subject must have at least one observation")

    @property
    def n_subjects(self) -> int:
        return len(self.subject_labels)

    @property
    def n_outcomes(self) -> int:
        return len(self.outcome_labels)

    @property
    def n_obs(self) -> int:
        return self.times.size

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.times.min()), float(self.times.max())

    def visit_counts(self) -> np.ndarray:
        """(N, K) matrix of per subject-outcome observation counts J_ik."""
        counts = np.zeros((self.n_subjects, self.n_outcomes), dtype=int)
        np.add.at(counts, (self.subjects, self.outcomes - 1), 1)
        return counts

    def rows(self):
        """Iterate rows as :class:`Observation` objects."""
        for i in range(self.n_obs):
            yield Observation(
                subject_id=self.subject_labels[self.subjects[i]],
                outcome_id=int(self.outcomes[i]),
                time=float(self.times[i]),
                value=float(self.values[i]),
            )

    def outcome_arrays(self, k: int):
        """Arrays for outcome ``k``: (subject idx, times, values).

        Rows stay sorted by (subject, time) thanks to the canonical order.
        """
        if not 1 <= k <= self.n_outcomes:
            raise DataError(f"outcome index {k} out of range 1..{self.n_outcomes}")
        m = self.outcomes == k
        return self.subjects[m], self.times[m], self.values[m]


def _canonical_order(subj_labels, outcomes, times):
    order = np.lexsort((times, outcomes, subj_labels))
    return order


def from_rows(subject_ids, outcome_codes, times, values,
              outcome_labels=None, dropped_rows: int = 0) -> LongDataset:
    """Build a dataset from parallel row arrays (any order)."""
    subject_ids = np.asarray(subject_ids, dtype=object).astype(str)
    outcome_codes = np.asarray(outcome_codes, dtype=int)
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    labels, subj_idx = np.unique(subject_ids, return_inverse=True)
    if outcome_labels is None:
        outcome_labels = tuple(str(k) for k in range(1, outcome_codes.max() + 1))
    order = _canonical_order(subj_idx, outcome_codes, times)
    return LongDataset(
        subjects=subj_idx[order],
        outcomes=outcome_codes[order],
        times=times[order],
        values=values[order],
        subject_labels=tuple(labels.tolist()),
        outcome_labels=tuple(outcome_labels),
        dropped_rows=dropped_rows,
    )


def _map_outcome_labels(raw: list[str]) -> dict[str, int]:
    """Map raw outcome labels to codes 1..K (numeric order when possible)."""
    unique = sorted(set(raw))
    try:
        unique.sort(key=float)
    except ValueError:
        pass  # keep lexicographic order for non-numeric labels
    return {lab: i + 1 for i, lab in enumerate(unique)}


def load_csv(path, schema: dict | None = None) -> LongDataset:
    """Load a long-format CSV (UTF-8, header row required).

    ``schema`` maps the logical names subject/outcome/time/value to the
    file's column names; unmentioned names keep their defaults.  Rows with
    a missing value are dropped and counted in ``dropped_rows``.
    """
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        unknown = set(schema) - set(cols)
        if unknown:
            raise DataError(f"unknown schema keys: {sorted(unknown)}")
        cols.update(schema)
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    subj, out_raw, times, values = [], [], [], []
    dropped = 0
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file (header row required)")
        missing = [c for c in cols.values() if c not in reader.fieldnames]
        if missing:
            raise DataError(
                f"{path}: missing columns {missing}; found {reader.fieldnames}"
            )
        for row in reader:
            line = reader.line_num
            val = (row[cols["value"]] or "").strip()
            if val.lower() in _MISSING:
                dropped += 1
                continue
            try:
                v = float(val)
            except ValueError:
                raise DataError(
                    f"{path}: line {line}: non-numeric value {val!r}"
                ) from None
            traw = (row[cols["time"]] or "").strip()
            try:
                t = float(traw)
            except ValueError:
                raise DataError(
                    f"{path}: line {line}: non-numeric time {traw!r}"
                ) from None
            if not (np.isfinite(t) and np.isfinite(v)):
                raise DataError(f"{path}: line {line}: non-finite time or value")
            subj.append((row[cols["subject"]] or "").strip())
            out_raw.append((row[cols["outcome"]] or "").strip())
            times.append(t)
            values.append(v)
    if not values:
        raise DataError(f"{path}: zero usable rows")
    code_of = _map_outcome_labels(out_raw)
    codes = np.array([code_of[o] for o in out_raw], dtype=int)
    labels = tuple(sorted(code_of, key=code_of.get))
    return from_rows(subj, codes, times, values,
                     outcome_labels=labels, dropped_rows=dropped)


def to_csv(data: LongDataset, path, schema: dict | None = None) -> None:
    """Write the dataset back to CSV in canonical row order."""
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        cols.update(schema)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([cols["subject"], cols["outcome"], cols["time"], cols["value"]])
        for i in range(data.n_obs):
            w.writerow([
                data.subject_labels[data.subjects[i]],
                data.outcome_labels[data.outcomes[i] - 1],
                f"{data.times[i]:.17g}",
                f"{data.values[i]:.17g}",
            ])


@dataclass(frozen=True)
class TimeRescale:
    """Affine map t -> (t - offset) / scale onto [0, 1]."""

    offset: float
    scale: float

    def apply(self, t):
        return (np.asarray(t, dtype=float) - self.offset) / self.scale

    def invert(self, u):
        return self.offset + self.scale * np.asarray(u, dtype=float)

    def _re_transform(self) -> np.ndarray:
        # [1, u] = [1, t] @ A for u = (t - offset)/scale
        a, s = self.offset, self.scale
        return np.array([[1.0, -a / s], [0.0, 1.0 / s]])

    def map_re_cov(self, d_unit: np.ndarray) -> np.ndarray:
        """Map a 2x2 random intercept/slope covariance fitted on the unit
        scale back to the original time scale."""
        A = self._re_transform()
        return A @ np.asarray(d_unit, dtype=float) @ A.T

    def map_re_cov_multi(self, sigma_unit: np.ndarray) -> np.ndarray:
        """Blockwise version of :meth:`map_re_cov` for a 2K x 2K matrix."""
        sigma_unit = np.asarray(sigma_unit, dtype=float)
        K2 = sigma_unit.shape[0]
        if K2 % 2:
            raise DataError("random-effect covariance must be 2K x 2K")
        A = np.kron(np.eye(K2 // 2), self._re_transform())
        return A @ sigma_unit @ A.T


def rescale_time(data: LongDataset) -> tuple[LongDataset, TimeRescale]:
    """Map observation times affinely onto [0, 1]."""
    t_min, t_max = data.domain
    if t_max <= t_min:
        raise DataError("degenerate time domain: all observation times equal")
    tmap = TimeRescale(offset=t_min, scale=t_max - t_min)
    rescaled = LongDataset(
        subjects=data.subjects,
        outcomes=data.outcomes,
        times=tmap.apply(data.times),
        values=data.values,
        subject_labels=data.subject_labels,
        outcome_labels=data.outcome_labels,
        dropped_rows=data.dropped_rows,
    )
    return rescaled, tmap


def split_by_outcome(data: LongDataset, k: int) -> LongDataset:
    """Single-outcome view (K = 1) of outcome ``k``.

    Subject labels are preserved, so indices remain comparable with the
    parent dataset even if some subjects lack outcome-``k`` rows.
    """
    if not 1 <= k <= data.n_outcomes:
        raise DataError(f"outcome index {k} out of range 1..{data.n_outcomes}")
    m = data.outcomes == k
    labels = [data.subject_labels[i] for i in data.subjects[m]]
    return from_rows(
        labels,
        np.ones(int(m.sum()), dtype=int),
        data.times[m],
        data.values[m],
        outcome_labels=(data.outcome_labels[k - 1],),
        dropped_rows=0,
    )


@dataclass(frozen=True)
class DemeanedDataset:
    """Residuals after removing each outcome's smooth mean.

    Row layout is identical to ``source`` (one-to-one): ``residuals[i]``
    belongs to ``source`` row ``i``.  ``mean_fits[k]`` holds the per-outcome
    :class:`~covgof.mean.MeanFit`.
    """

    source: LongDataset
    residuals: np.ndarray
    mean_fits: dict = field(repr=False)

    def __post_init__(self):
        if self.residuals.shape != self.source.values.shape:
            raise DataError("residuals do not align with source rows")

    def outcome_arrays(self, k: int):
        s, t, _ = self.source.outcome_arrays(k)
        return s, t, self.residuals[self.source.outcomes == k]
