"""Counterfactual performance measures for predictions under interventions.

Calibration (observed/expected ratio plus grouped calibration), discrimination
(truncated concordance index and cumulative/dynamic AUC at a time point) and
prediction error (Brier score and its scaled version), each in three flavours:

* counterfactual: computed on an artificially censored strategy view with
  inverse probability of artificial censoring weights times an inverse
  standard-censoring factor;
* subset: standard estimators on the horizon-specific strategy-adherent
  subset of the raw data;
* standard: plain (IPCW-only) estimators, used on perfect validation data.

Tie and boundary conventions (all coincide in continuous time):
an event exactly at the evaluation time counts as an event; a subject whose
standard censoring falls exactly at the evaluation time counts as event-free
there, with the censoring survival taken as its left limit; a subject
artificially censored exactly at the evaluation time contributes neither.
Prediction ties contribute zero to concordance numerators and full weight to
denominators.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .data import EmptySubsetError, adherent_subset
from .stepfun import StepFunction
from .survival import weighted_kaplan_meier
from .weights import (
    CensoringSurvival,
    WeightTrajectorySet,
    combine_weights,
    estimate_standard_censoring,
)

__all__ = [
    "CalibrationResult",
    "ConcordanceResult",
    "AucResult",
    "BrierResult",
    "MetricPanel",
    "calibration",
    "concordance_index",
    "cumulative_dynamic_auc",
    "brier_score",
    "counterfactual_panel",
    "subset_panel",
    "standard_panel",
    "unit_weights",
]

_PAIR_CHUNK = 512


def unit_weights(n, n_intervals=1):
    """A weight trajectory set that is one everywhere."""
    return WeightTrajectorySet(
        interval_values=np.ones((n, n_intervals)),
        defined_visits=np.full(n, n_intervals, dtype=int),
    )


_ONE = StepFunction.constant(1.0)


def _unit_combined(n, n_intervals=1):
    return combine_weights(
        unit_weights(n, n_intervals), CensoringSurvival(curve=_ONE)
    )


def _event_by(time, event, t):
    return (time <= t) & (event == 1)


def _event_free_at(time, event, t, censor_visit=None):
    """Known event-free at t; artificial censoring exactly at t disqualifies."""
    alive = time > t
    boundary = (time == t) & (event == 0)
    if censor_visit is not None:
        boundary &= censor_visit > t
    return alive | boundary


@dataclass
class CalibrationResult:
    mean_predicted: float
    observed: float
    oe_ratio: float
    group_mean_predicted: np.ndarray
    group_observed: np.ndarray
    group_sizes: np.ndarray


@dataclass
class ConcordanceResult:
    value: float
    n_comparable: int
    total_weight: float


@dataclass
class AucResult:
    value: float
    n_cases: int
    n_controls: int
    total_weight: float


@dataclass
class BrierResult:
    brier: float
    brier_null: float
    scaled: float
    null_risk: float


def calibration(time, event, predictions, tau, ipacw=None, n_groups=10,
                group_weights="time-updated"):
    """Observed/expected ratio and grouped weighted-KM calibration at ``tau``.

    The observed proportion is one minus a Kaplan-Meier estimate weighted by
    the artificial-censoring weights; per-group curves use the same weights.
    ``group_weights="fixed"`` freezes each subject's weight at the value on
    the interval containing ``min(time, tau)`` instead of updating it along
    the curve.

    The mean predicted risk averages over all subjects passed in, including
    those with zero follow-up in the view.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event)
    predictions = np.asarray(predictions, dtype=float)
    n = time.size
    if ipacw is None:
        ipacw = unit_weights(n)
    if group_weights == "fixed":
        frozen = ipacw.at(np.minimum(time, tau))
        ipacw = WeightTrajectorySet(
            interval_values=frozen[:, None],
            defined_visits=np.ones(n, dtype=int),
        )
    elif group_weights != "time-updated":
        raise ValueError(f"unknown group_weights mode {group_weights!r}")

    mean_pred = float(predictions.mean()) if n else np.nan
    curve = weighted_kaplan_meier(time, event, ipacw)
    observed = float(curve.risk_at(tau))
    oe = observed / mean_pred if mean_pred > 0 else np.nan

    order = np.argsort(predictions, kind="stable")
    groups = np.array_split(order, n_groups)
    g_pred = np.full(n_groups, np.nan)
    g_obs = np.full(n_groups, np.nan)
    g_size = np.zeros(n_groups, dtype=int)
    for g, idx in enumerate(groups):
        g_size[g] = idx.size
        if idx.size == 0:
            continue
        g_pred[g] = predictions[idx].mean()
        sub = WeightTrajectorySet(
            interval_values=ipacw.interval_values[idx],
            defined_visits=ipacw.defined_visits[idx],
        )
        g_obs[g] = weighted_kaplan_meier(time[idx], event[idx], sub).risk_at(tau)
    return CalibrationResult(
        mean_predicted=mean_pred,
        observed=observed,
        oe_ratio=oe,
        group_mean_predicted=g_pred,
        group_observed=g_obs,
        group_sizes=g_size,
    )


def concordance_index(time, event, predictions, tau, combined=None):
    """Weighted concordance index truncated at ``tau``.

    A pair (i, j) is comparable when i has an event strictly before j's
    observed time and no later than ``tau``. The pair weight multiplies i's
    combined inverse weight just before their event time with j's combined
    inverse weight at that event time.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event)
    predictions = np.asarray(predictions, dtype=float)
    n = time.size
    if combined is None:
        combined = _unit_combined(n)

    ev = np.nonzero((time <= tau) & (event == 1))[0]
    numer = 0.0
    denom = 0.0
    n_comparable = 0
    V = combined.ipacw.interval_values
    n_intervals = V.shape[1]
    for lo in range(0, ev.size, _PAIR_CHUNK):
        ii = ev[lo:lo + _PAIR_CHUNK]
        ti = time[ii]
        f_i = combined.at_left(ti, ii)
        cols = np.clip(np.floor(ti).astype(int), 0, n_intervals - 1)
        f_j = V[:, cols].T / combined.censoring(ti)[:, None]
        comp = time[None, :] > ti[:, None]
        n_comparable += int(comp.sum())
        pair_w = np.where(comp, f_i[:, None] * f_j, 0.0)
        conc = predictions[ii][:, None] > predictions[None, :]
        numer += float((pair_w * conc).sum())
        denom += float(pair_w.sum())
    value = numer / denom if denom > 0 else np.nan
    return ConcordanceResult(
        value=value, n_comparable=n_comparable, total_weight=denom
    )


def cumulative_dynamic_auc(time, event, predictions, t, combined=None,
                           censor_visit=None):
    """Weighted cumulative/dynamic AUC at time ``t``.

    Cases have an event by ``t``; controls are known event-free at ``t``.
    The pair weight multiplies the case's combined inverse weight at their
    event time with the control's combined inverse weight at ``t``.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event)
    predictions = np.asarray(predictions, dtype=float)
    n = time.size
    if combined is None:
        combined = _unit_combined(n)

    cases = np.nonzero(_event_by(time, event, t))[0]
    controls = np.nonzero(_event_free_at(time, event, t, censor_visit))[0]
    if cases.size == 0 or controls.size == 0:
        return AucResult(np.nan, cases.size, controls.size, 0.0)
    w_case = combined.at(time[cases], cases)
    w_ctrl = combined.survivor_at(float(t), controls)

    order = np.argsort(predictions[controls], kind="stable")
    ctrl_sorted = predictions[controls][order]
    cum_w = np.concatenate([[0.0], np.cumsum(w_ctrl[order])])
    # strictly lower-ranked controls for each case (ties contribute zero)
    below = np.searchsorted(ctrl_sorted, predictions[cases], side="left")
    numer = float(w_case @ cum_w[below])
    denom = float(w_case.sum() * w_ctrl.sum())
    return AucResult(
        value=numer / denom if denom > 0 else np.nan,
        n_cases=cases.size,
        n_controls=controls.size,
        total_weight=denom,
    )


def brier_score(time, event, predictions, t, combined=None, n_total=None,
                censor_visit=None):
    """Inverse-probability-weighted Brier score and its scaled version at ``t``.

    Events by ``t`` contribute ``(1 - risk)^2`` weighted by their combined
    inverse weight at the event time; subjects event-free at ``t`` contribute
    ``risk^2`` weighted at ``t``; subjects censored earlier contribute
    nothing. The divisor ``n_total`` is the full validation size. The null
    model predicts the weighted event-indicator mean for everyone.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event)
    predictions = np.asarray(predictions, dtype=float)
    n = time.size
    if n_total is None:
        n_total = n
    if combined is None:
        combined = _unit_combined(n)

    is_event = _event_by(time, event, t)
    is_alive = _event_free_at(time, event, t, censor_visit)
    w = np.zeros(n)
    idx_e = np.nonzero(is_event)[0]
    idx_a = np.nonzero(is_alive)[0]
    w[idx_e] = combined.at(time[idx_e], idx_e)
    w[idx_a] = combined.survivor_at(float(t), idx_a)

    outcome = is_event.astype(float)
    bs = float(np.sum((outcome - predictions) ** 2 * w) / n_total)
    # self-normalized weighted event mean: invariant to the weight scale, so
    # the scaled score of a constant-weight view matches its unweighted one
    w_sum = float(w.sum())
    null_risk = float(np.sum(outcome * w) / w_sum) if w_sum > 0 else np.nan
    bs_null = float(np.sum((outcome - null_risk) ** 2 * w) / n_total)
    scaled = 1.0 - bs / bs_null if bs_null > 0 else np.nan
    return BrierResult(brier=bs, brier_null=bs_null, scaled=scaled,
                       null_risk=null_risk)


@dataclass
class MetricPanel:
    """All measures for one (estimator, strategy) cell, plus risk curves."""

    estimator: str
    strategy: str
    tau: float
    n_total: int
    n_events: int
    mean_predicted: float = np.nan
    observed: float = np.nan
    oe_ratio: float = np.nan
    cindex: float = np.nan
    cindex_comparable: int = 0
    cindex_weight: float = 0.0
    auc: float = np.nan
    auc_cases: int = 0
    auc_controls: int = 0
    brier: float = np.nan
    brier_null: float = np.nan
    scaled_brier: float = np.nan
    group_mean_predicted: list = field(default_factory=list)
    group_observed: list = field(default_factory=list)
    group_sizes: list = field(default_factory=list)
    curve_taus: list = field(default_factory=list)
    predicted_curve: list = field(default_factory=list)
    observed_curve: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def to_dict(self):
        d = dataclasses.asdict(self)
        for key, val in d.items():
            if isinstance(val, np.ndarray):
                d[key] = val.tolist()
        return d

    def metric_values(self):
        return {
            "oe_ratio": self.oe_ratio,
            "cindex": self.cindex,
            "auc": self.auc,
            "scaled_brier": self.scaled_brier,
        }


def _assemble_panel(estimator, strategy_name, time, event, preds_by_tau, taus,
                    tau, ipacw, combined, n_total, n_groups, censor_visit,
                    group_weights):
    taus = np.asarray(taus, dtype=float)
    j_tau = int(np.nonzero(taus == tau)[0][0])
    preds = preds_by_tau[:, j_tau]

    cal = calibration(time, event, preds, tau, ipacw=ipacw, n_groups=n_groups,
                      group_weights=group_weights)
    cidx = concordance_index(time, event, preds, tau, combined=combined)
    auc = cumulative_dynamic_auc(time, event, preds, tau, combined=combined,
                                 censor_visit=censor_visit)
    bs = brier_score(time, event, preds, tau, combined=combined,
                     n_total=n_total, censor_visit=censor_visit)

    curve = weighted_kaplan_meier(time, event, ipacw)
    observed_curve = [float(curve.risk_at(u)) for u in taus]
    predicted_curve = preds_by_tau.mean(axis=0).tolist()

    notes = []
    if np.isnan(cidx.value):
        notes.append("cindex undefined: no comparable pairs")
    if np.isnan(auc.value):
        notes.append("auc undefined: no cases or no controls")
    if np.isnan(cal.oe_ratio):
        notes.append("oe undefined")
    return MetricPanel(
        estimator=estimator,
        strategy=strategy_name,
        tau=float(tau),
        n_total=int(n_total),
        n_events=int(np.sum((time <= tau) & (event == 1))),
        mean_predicted=cal.mean_predicted,
        observed=cal.observed,
        oe_ratio=cal.oe_ratio,
        cindex=cidx.value,
        cindex_comparable=cidx.n_comparable,
        cindex_weight=cidx.total_weight,
        auc=auc.value,
        auc_cases=auc.n_cases,
        auc_controls=auc.n_controls,
        brier=bs.brier,
        brier_null=bs.brier_null,
        scaled_brier=bs.scaled * 100.0,
        group_mean_predicted=np.asarray(cal.group_mean_predicted).tolist(),
        group_observed=np.asarray(cal.group_observed).tolist(),
        group_sizes=np.asarray(cal.group_sizes).tolist(),
        curve_taus=taus.tolist(),
        predicted_curve=predicted_curve,
        observed_curve=observed_curve,
        notes=notes,
    )


def counterfactual_panel(view, ipacw, censoring, preds_by_tau, taus, tau,
                         n_groups=10, group_weights="time-updated"):
    """Counterfactual measures on an artificially censored strategy view.

    ``preds_by_tau`` has one column per entry of ``taus`` and must cover all
    n subjects of the view's source dataset (zero-follow-up subjects are in
    the mean prediction and the Brier divisor but never in a risk set).
    """
    combined = combine_weights(ipacw, censoring)
    return _assemble_panel(
        "counterfactual", view.strategy.name, view.time, view.event,
        np.asarray(preds_by_tau, dtype=float), taus, tau, ipacw, combined,
        n_total=view.n_subjects, n_groups=n_groups,
        censor_visit=view.censor_visit, group_weights=group_weights,
    )


def subset_panel(data, strategy, preds_by_tau, taus, tau, n_groups=10):
    """Standard measures on the horizon-specific strategy-adherent subset.

    The subset is recomputed at each curve horizon for the outcome-proportion
    curve; the four main measures use the subset at ``tau``. Standard
    censoring is reweighted via a Kaplan-Meier factor estimated on the
    subset; artificial-censoring weights are unit by construction.
    """
    preds_by_tau = np.asarray(preds_by_tau, dtype=float)
    taus = np.asarray(taus, dtype=float)
    try:
        mask = adherent_subset(data, strategy, tau)
    except EmptySubsetError:
        return MetricPanel(
            estimator="subset", strategy=strategy.name, tau=float(tau),
            n_total=0, n_events=0, notes=["empty adherent subset"],
        )
    time = data.time[mask]
    event = data.event[mask]
    n_sub = int(mask.sum())
    censoring = estimate_standard_censoring(time, event)
    combined = combine_weights(unit_weights(n_sub), censoring)
    panel = _assemble_panel(
        "subset", strategy.name, time, event, preds_by_tau[mask], taus, tau,
        None, combined, n_total=n_sub, n_groups=n_groups, censor_visit=None,
        group_weights="time-updated",
    )
    # the subset is horizon specific, so the observed curve is re-derived
    # from the per-horizon subsets rather than one censored cohort
    observed_curve = []
    predicted_curve = []
    for j, u in enumerate(taus):
        try:
            m_u = adherent_subset(data, strategy, u)
        except EmptySubsetError:
            observed_curve.append(np.nan)
            predicted_curve.append(np.nan)
            continue
        km = weighted_kaplan_meier(data.time[m_u], data.event[m_u])
        observed_curve.append(float(km.risk_at(u)))
        predicted_curve.append(float(preds_by_tau[m_u, j].mean()))
    panel.observed_curve = observed_curve
    panel.predicted_curve = predicted_curve
    return panel


def standard_panel(data, strategy_name, preds_by_tau, taus, tau, n_groups=10,
                   estimator="true"):
    """Plain (IPCW-only) measures on a dataset, e.g. perfect validation data."""
    n = data.n_subjects
    censoring = estimate_standard_censoring(data.time, data.event)
    combined = combine_weights(unit_weights(n), censoring)
    return _assemble_panel(
        estimator, strategy_name, data.time, data.event,
        np.asarray(preds_by_tau, dtype=float), taus, tau, None, combined,
        n_total=n, n_groups=n_groups, censor_visit=None,
        group_weights="time-updated",
    )
