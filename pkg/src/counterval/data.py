"""Longitudinal observational data, treatment strategies and artificial censoring.

A dataset holds one record per subject: visit-indexed covariates and treatment
status on an integer visit grid, baseline predictors, and a continuous
event/censoring time. Visits exist only strictly before the end of follow-up.
All containers are immutable after construction and safe for concurrent reads.
"""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

__all__ = [
    "LongitudinalData",
    "StrategySpec",
    "StrategyView",
    "never_treated",
    "always_treated",
    "apply_artificial_censoring",
    "adherent_subset",
    "load_longitudinal_csv",
    "save_longitudinal_csv",
    "EmptySubsetError",
]


class EmptySubsetError(RuntimeError):
    """No subject follows the strategy; downstream metrics are undefined."""


def n_visits_from_time(time, max_visits):
    """Number of visits attended: integers k with k < time, capped at the grid."""
    return np.clip(np.ceil(np.asarray(time, dtype=float)).astype(int), 0, max_visits)


@dataclass(frozen=True)
class StrategySpec:
    """A static deterministic treatment strategy from time zero.

    ``path[k]`` is the treatment value the strategy prescribes at visit k.
    """

    name: str
    path: np.ndarray

    def __post_init__(self):
        path = np.asarray(self.path, dtype=np.int8)
        if path.ndim != 1 or np.any((path != 0) & (path != 1)):
            raise ValueError("strategy path must be a 1-d binary vector")
        path.setflags(write=False)
        object.__setattr__(self, "path", path)

    @property
    def n_visits(self):
        return self.path.size


def never_treated(n_visits):
    return StrategySpec("never_treated", np.zeros(n_visits, dtype=np.int8))


def always_treated(n_visits):
    return StrategySpec("always_treated", np.ones(n_visits, dtype=np.int8))


@dataclass(frozen=True, eq=False)
class LongitudinalData:
    """Array-backed longitudinal dataset.

    Parameters
    ----------
    ids : ndarray, shape (n,)
        Opaque subject identifiers (unique).
    time : ndarray, shape (n,)
        Observed end of follow-up (event or censoring), continuous, >= 0.
    event : ndarray, shape (n,)
        1 = event, 0 = right-censored.
    covariates : ndarray, shape (n, K, p)
        Visit covariates; entries at visits a subject did not attend are NaN.
    treatment : ndarray, shape (n, K)
        Binary treatment status per attended visit, -1 where unattended.
    baseline_predictors : ndarray, shape (n, q)
        Time-fixed predictors (q may be 0).
    """

    ids: np.ndarray
    time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray
    treatment: np.ndarray
    baseline_predictors: np.ndarray = None
    n_visits: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        ids = np.asarray(self.ids)
        time = np.asarray(self.time, dtype=float)
        event = np.asarray(self.event, dtype=np.int8)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 2:
            cov = cov[:, :, None]
        treat = np.asarray(self.treatment, dtype=np.int8)
        base = self.baseline_predictors
        if base is None:
            base = np.zeros((ids.size, 0))
        else:
            base = np.asarray(base, dtype=float)
            if base.ndim == 1:
                base = base[:, None]
        n = ids.size
        if any(len(x) != n for x in (time, event, cov, treat, base)):
            raise ValueError("inconsistent array lengths")
        if np.unique(ids).size != n:
            raise ValueError("duplicate subject ids")
        if np.any(time < 0):
            raise ValueError("negative follow-up time")
        if np.any((event != 0) & (event != 1)):
            raise ValueError("event indicator must be 0/1")
        n_visits = n_visits_from_time(time, treat.shape[1])
        grid = np.arange(treat.shape[1])
        attended = grid[None, :] < n_visits[:, None]
        if np.any((treat != 0) & (treat != 1) & attended):
            bad = np.argwhere((treat != 0) & (treat != 1) & attended)[0]
            raise ValueError(
                f"non-binary treatment for subject {ids[bad[0]]} at visit {bad[1]}"
            )
        for arr in (ids, time, event, cov, treat, base, n_visits):
            arr.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "event", event)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "treatment", treat)
        object.__setattr__(self, "baseline_predictors", base)
        object.__setattr__(self, "n_visits", n_visits)

    @property
    def n_subjects(self):
        return self.ids.size

    @property
    def max_visits(self):
        return self.treatment.shape[1]

    @property
    def n_covariates(self):
        return self.covariates.shape[2]

    def baseline_covariates(self):
        """Visit-0 covariate matrix, shape (n, p)."""
        return self.covariates[:, 0, :]

    def subset(self, mask):
        """New dataset restricted to ``mask`` (boolean or index array)."""
        return LongitudinalData(
            ids=self.ids[mask],
            time=self.time[mask],
            event=self.event[mask],
            covariates=self.covariates[mask],
            treatment=self.treatment[mask],
            baseline_predictors=self.baseline_predictors[mask],
        )


@dataclass(frozen=True, eq=False)
class StrategyView:
    """An artificially censored copy of a dataset under one strategy.

    ``censor_visit`` is the first visit at which the observed treatment
    deviates from the strategy (+inf when fully adherent), ``time`` is the
    follow-up truncated at that visit and ``event`` the adjusted indicator.
    Subjects deviating at visit 0 remain in the view with zero follow-up.
    ``adherent_visits`` counts the visits attended while still adherent,
    which bounds the weight factors that exist for the subject.
    """

    source: LongitudinalData
    strategy: StrategySpec
    censor_visit: np.ndarray
    time: np.ndarray
    event: np.ndarray
    adherent_visits: np.ndarray

    @property
    def n_subjects(self):
        return self.source.n_subjects

    def to_frame(self):
        return pd.DataFrame(
            {
                "id": self.source.ids,
                "c_a0": self.censor_visit,
                "t_tilde": self.time,
                "d_tilde": self.event,
            }
        )


def _first_deviation(data, strategy):
    """First attended visit where treatment differs from the strategy, else +inf."""
    if strategy.n_visits < data.max_visits:
        raise ValueError(
            f"strategy covers {strategy.n_visits} visits but data has "
            f"{data.max_visits}"
        )
    grid = np.arange(data.max_visits)
    attended = grid[None, :] < data.n_visits[:, None]
    deviates = attended & (data.treatment != strategy.path[None, : data.max_visits])
    any_dev = deviates.any(axis=1)
    first = np.where(any_dev, deviates.argmax(axis=1), 0).astype(float)
    return np.where(any_dev, first, np.inf)


def apply_artificial_censoring(data, strategy):
    """Censor each subject's follow-up at their first deviation from ``strategy``.

    The adjusted time is ``min(time, censor_visit)``; an event occurring
    exactly at the deviation visit counts as censored (strict inequality in
    the adjusted indicator).
    """
    censor_visit = _first_deviation(data, strategy)
    t_tilde = np.minimum(data.time, censor_visit)
    d_tilde = np.where(data.time < censor_visit, data.event, 0).astype(np.int8)
    # deviation at visit k leaves visits 0..k-1 as adherent ones
    adherent = np.where(
        np.isinf(censor_visit), data.n_visits, np.minimum(data.n_visits, censor_visit)
    ).astype(int)
    return StrategyView(
        source=data,
        strategy=strategy,
        censor_visit=censor_visit,
        time=t_tilde,
        event=d_tilde,
        adherent_visits=adherent,
    )


def adherent_subset(data, strategy, horizon):
    """Subjects with no deviation from ``strategy`` at any visit up to ``horizon``.

    This is the naive subset comparator. Deviations can only occur at attended
    visits, so subjects whose follow-up ends before they could deviate are
    retained (the immortal-time mechanism that biases the subset approach).
    A deviation at a visit strictly after ``horizon`` does not disqualify.

    Returns
    -------
    ndarray of bool, shape (n,)
        Membership mask.

    Raises
    ------
    EmptySubsetError
        If no subject qualifies.
    """
    censor_visit = _first_deviation(data, strategy)
    mask = censor_visit > float(horizon)
    if not mask.any():
        raise EmptySubsetError(
            f"no subject adheres to '{strategy.name}' up to horizon {horizon}"
        )
    return mask


_RESERVED = ("id", "visit", "treatment", "event_time", "event_ind")


def load_longitudinal_csv(path, covariate_columns, baseline_columns=(),
                          max_visits=None):
    """Assemble a dataset from a long-format CSV (one row per subject-visit).

    Required columns: ``id``, ``visit``, ``treatment``, plus row-constant
    ``event_time`` and ``event_ind``. ``covariate_columns`` name the
    time-varying covariates and ``baseline_columns`` the time-fixed
    predictors (row-constant per subject).
    """
    frame = pd.read_csv(path, float_precision="round_trip")
    required = list(_RESERVED) + list(covariate_columns) + list(baseline_columns)
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ValueError(f"missing required columns: {missing}")
    if frame.duplicated(subset=["id", "visit"]).any():
        dup = frame[frame.duplicated(subset=["id", "visit"])].iloc[0]
        raise ValueError(f"duplicate (id, visit) row: ({dup['id']}, {dup['visit']})")
    bad_a = ~frame["treatment"].isin([0, 1])
    if bad_a.any():
        row = frame.index[bad_a][0]
        raise ValueError(f"non-binary treatment at row {row}")
    late = frame["visit"].to_numpy() >= frame["event_time"].to_numpy()
    if late.any():
        row = frame.index[late][0]
        raise ValueError(f"visit at or after end of follow-up at row {row}")

    frame = frame.sort_values(["id", "visit"], kind="stable")
    rows, ids = pd.factorize(frame["id"])
    n = ids.size
    K = int(frame["visit"].max()) + 1 if max_visits is None else int(max_visits)
    p = len(covariate_columns)

    constant_cols = ["event_time", "event_ind", *baseline_columns]
    per_subject = frame.groupby("id", sort=False)[constant_cols]
    varying = per_subject.nunique() > 1
    if varying.any().any():
        col = [c for c in constant_cols if varying[c].any()][0]
        sid = varying.index[varying[col]][0]
        raise ValueError(f"column {col!r} not constant for subject {sid}")
    firsts = per_subject.first()

    cov = np.full((n, K, p), np.nan)
    treat = np.full((n, K), -1, dtype=np.int8)
    visits = frame["visit"].to_numpy(dtype=int)
    treat[rows, visits] = frame["treatment"].to_numpy(dtype=np.int8)
    for j, col in enumerate(covariate_columns):
        cov[rows, visits, j] = frame[col].to_numpy(dtype=float)

    return LongitudinalData(
        ids=np.asarray(ids),
        time=firsts["event_time"].to_numpy(dtype=float),
        event=firsts["event_ind"].to_numpy(dtype=np.int8),
        covariates=cov,
        treatment=treat,
        baseline_predictors=firsts[list(baseline_columns)].to_numpy(dtype=float),
    )


def save_longitudinal_csv(data, path, covariate_columns=None, baseline_columns=None,
                          view=None):
    """Write a dataset to long-format CSV, the inverse of the loader.

    Floats are written with round-trip precision so that reloading is
    bit-identical. If ``view`` is given, its adjusted columns (``c_a0``,
    ``t_tilde``, ``d_tilde``) are appended to every row of each subject.
    """
    p = data.n_covariates
    q = data.baseline_predictors.shape[1]
    covariate_columns = covariate_columns or [f"L{j + 1}" for j in range(p)]
    baseline_columns = baseline_columns or [f"P{j + 1}" for j in range(q)]

    idx = np.repeat(np.arange(data.n_subjects), data.n_visits)
    visit = np.concatenate([np.arange(k) for k in data.n_visits]).astype(int)
    out = {
        "id": data.ids[idx],
        "visit": visit,
        "treatment": data.treatment[idx, visit].astype(int),
        "event_time": data.time[idx],
        "event_ind": data.event[idx].astype(int),
    }
    for j, col in enumerate(covariate_columns):
        out[col] = data.covariates[idx, visit, j]
    for j, col in enumerate(baseline_columns):
        out[col] = data.baseline_predictors[idx, j]
    if view is not None:
        out["c_a0"] = view.censor_visit[idx]
        out["t_tilde"] = view.time[idx]
        out["d_tilde"] = view.event[idx].astype(int)
    # shortest repr guarantees a bit-exact float round trip
    pd.DataFrame(out).to_csv(
        path, index=False, float_format=lambda v: repr(float(v))
    )
