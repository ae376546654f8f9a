"""Weighted nonparametric and semiparametric survival estimation.

Provides the weighted Kaplan-Meier estimator with time-updated case weights,
a weighted Cox partial-likelihood solver on counting-process rows (Breslow
ties, Breslow baseline), and the weighted Aalen additive-hazards least-squares
estimator. All fits accept time-varying case weights because the inverse
probability weights used throughout this package are piecewise constant
between visits.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .stepfun import StepFunction
from .weights import WeightTrajectorySet

__all__ = [
    "WeightedSurvivalCurve",
    "weighted_kaplan_meier",
    "CountingProcessRows",
    "WeightedCoxPH",
    "WeightedAalen",
]


@dataclass(frozen=True, eq=False)
class WeightedSurvivalCurve:
    """Step-function survival estimate with jumps at event times.

    ``support_end`` is the largest observed time; queries beyond it (or at or
    beyond ``inestimable_from``, where the weighted risk set vanished before
    the data ran out) return NaN.
    """

    times: np.ndarray
    survival: np.ndarray
    weighted_at_risk: np.ndarray
    support_end: float
    inestimable_from: float = np.inf

    def _fn(self):
        return StepFunction(self.times, self.survival, init=1.0)

    def survival_at(self, t):
        t = np.asarray(t, dtype=float)
        out = np.asarray(self._fn()(t), dtype=float)
        # once the curve reaches zero it is determined beyond the data
        determined = self.survival.size and self.survival[-1] == 0.0
        bad = (t >= self.inestimable_from)
        if not determined:
            bad = bad | (t > self.support_end)
        out = np.where(bad, np.nan, out)
        return float(out) if out.ndim == 0 else out

    def risk_at(self, t):
        return 1.0 - self.survival_at(t)


def _weight_columns(weights, n, n_intervals):
    """Normalize the weight argument to an (n, n_intervals) matrix."""
    if weights is None:
        return np.ones((n, max(n_intervals, 1)))
    if isinstance(weights, WeightTrajectorySet):
        return weights.interval_values
    w = np.asarray(weights, dtype=float)
    if w.ndim == 1:
        return np.repeat(w[:, None], max(n_intervals, 1), axis=1)
    return w


def weighted_kaplan_meier(time, event, weights=None):
    """Kaplan-Meier estimate with case weights evaluated at each event time.

    At each distinct event time the survival multiplies by
    ``1 - sum(w_i(t) dN_i(t)) / sum(w_i(t) Y_i(t))`` where the at-risk
    indicator is ``time_i >= t`` and piecewise-constant weights are read on
    the interval containing ``t``.

    Parameters
    ----------
    time, event : arrays, shape (n,)
    weights : None, (n,) array, or WeightTrajectorySet
        Unit, per-subject constant, or time-updated weights.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(bool)
    n = time.size
    if n == 0:
        return WeightedSurvivalCurve(
            times=np.empty(0), survival=np.empty(0),
            weighted_at_risk=np.empty(0), support_end=-np.inf,
        )
    n_intervals = int(np.ceil(time.max())) if time.max() > 0 else 1
    W = _weight_columns(weights, n, n_intervals)
    n_intervals = W.shape[1]

    order = np.argsort(time, kind="stable")
    t_sorted = time[order]

    event_times = np.unique(time[event])
    if event_times.size == 0:
        return WeightedSurvivalCurve(
            times=np.empty(0), survival=np.empty(0),
            weighted_at_risk=np.empty(0), support_end=float(time.max()),
        )
    cols = np.clip(np.floor(event_times).astype(int), 0, n_intervals - 1)

    # weighted risk-set size per event time via suffix sums per weight column
    at_risk = np.empty(event_times.size)
    for m in np.unique(cols):
        suffix = np.cumsum(W[order[::-1], m])[::-1]
        sel = cols == m
        first = np.searchsorted(t_sorted, event_times[sel], side="left")
        at_risk[sel] = suffix[first]

    # weighted event count per event time
    ev_idx = np.nonzero(event)[0]
    ev_w = W[ev_idx, np.clip(np.floor(time[ev_idx]).astype(int), 0, n_intervals - 1)]
    pos = np.searchsorted(event_times, time[ev_idx])
    d = np.zeros(event_times.size)
    np.add.at(d, pos, ev_w)

    inestimable_from = np.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        factors = 1.0 - d / at_risk
    bad = ~(at_risk > 0)
    if bad.any():
        cut = int(np.argmax(bad))
        inestimable_from = float(event_times[cut])
        event_times = event_times[:cut]
        factors = factors[:cut]
        at_risk = at_risk[:cut]
    surv = np.cumprod(factors)
    return WeightedSurvivalCurve(
        times=event_times,
        survival=surv,
        weighted_at_risk=at_risk,
        support_end=float(time.max()),
        inestimable_from=inestimable_from,
    )


@dataclass(frozen=True, eq=False)
class CountingProcessRows:
    """(start, stop] interval rows with fixed covariates and case weight."""

    start: np.ndarray
    stop: np.ndarray
    status: np.ndarray
    covariates: np.ndarray
    weight: np.ndarray
    strata: np.ndarray = None

    def __post_init__(self):
        start = np.asarray(self.start, dtype=float)
        stop = np.asarray(self.stop, dtype=float)
        status = np.asarray(self.status).astype(bool)
        cov = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        if cov.shape[0] != start.size:
            cov = cov.reshape(start.size, -1)
        weight = np.asarray(self.weight, dtype=float)
        strata = self.strata
        strata = np.zeros(start.size, dtype=int) if strata is None else np.asarray(
            strata, dtype=int
        )
        if np.any(stop <= start):
            raise ValueError("rows must satisfy start < stop")
        if np.any(weight < 0):
            raise ValueError("negative case weights")
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "stop", stop)
        object.__setattr__(self, "status", status)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "strata", strata)

    @property
    def n_rows(self):
        return self.start.size

    @property
    def n_covariates(self):
        return self.covariates.shape[1]


class _RiskSetSweep:
    """Backward sweep over event times maintaining weighted risk-set sums."""

    def __init__(self, rows):
        self.rows = rows
        ute = np.unique(rows.stop[rows.status])
        self.event_times = ute
        m = ute.size
        # row r is at risk at ute[j] iff exit_j(r) < j <= enter_j(r)
        self.enter_j = np.searchsorted(ute, rows.stop, side="right") - 1
        self.exit_j = np.searchsorted(ute, rows.start, side="right") - 1
        self.enter_order = np.argsort(self.enter_j, kind="stable")
        self.exit_order = np.argsort(self.exit_j, kind="stable")
        self.enter_bounds = np.searchsorted(self.enter_j[self.enter_order],
                                            np.arange(m + 1))
        self.exit_bounds = np.searchsorted(self.exit_j[self.exit_order],
                                           np.arange(m + 1))
        ev = rows.status
        ev_pos = np.searchsorted(ute, rows.stop[ev])
        order = np.argsort(ev_pos, kind="stable")
        self.event_rows = np.nonzero(ev)[0][order]
        self.event_bounds = np.searchsorted(ev_pos[order], np.arange(m + 1))

    def entering(self, j):
        return self.enter_order[self.enter_bounds[j]:self.enter_bounds[j + 1]]

    def exiting(self, j):
        return self.exit_order[self.exit_bounds[j]:self.exit_bounds[j + 1]]

    def events_at(self, j):
        return self.event_rows[self.event_bounds[j]:self.event_bounds[j + 1]]


class WeightedCoxPH(BaseEstimator):
    """Weighted Cox proportional-hazards fit on counting-process rows.

    Maximizes the weighted partial likelihood (weights enter both the event
    terms and the risk-set sums) by Newton-Raphson with step halving, Breslow
    tie handling and a Breslow weighted baseline hazard per stratum.

    Attributes
    ----------
    coef_ : ndarray, shape (p,)
    baseline_cumhaz_ : dict stratum -> StepFunction
        Cumulative baseline hazard.
    n_iter_, converged_, final_loglik_ : fit metadata
    """

    def __init__(self, max_iter=50, loglik_tol=1e-9, coef_bound=50.0):
        self.max_iter = max_iter
        self.loglik_tol = loglik_tol
        self.coef_bound = coef_bound

    def _stratum_quantities(self, sweep, rows, beta):
        """Loglik, score and hessian contributions of one stratum."""
        p = rows.n_covariates
        X = rows.covariates
        w = rows.weight
        eta = X @ beta
        shift = eta.max() if eta.size else 0.0
        e = w * np.exp(eta - shift)
        ll = 0.0
        score = np.zeros(p)
        hess = np.zeros((p, p))
        xp0 = 0.0
        xp1 = np.zeros(p)
        xp2 = np.zeros((p, p))
        for j in range(sweep.event_times.size - 1, -1, -1):
            ent = sweep.entering(j)
            if ent.size:
                ee = e[ent]
                xe = X[ent]
                xp0 += ee.sum()
                xp1 += ee @ xe
                xp2 += (ee[:, None] * xe).T @ xe
            ext = sweep.exiting(j)
            if ext.size:
                ee = e[ext]
                xe = X[ext]
                xp0 -= ee.sum()
                xp1 -= ee @ xe
                xp2 -= (ee[:, None] * xe).T @ xe
            evs = sweep.events_at(j)
            we = w[evs]
            wsum = we.sum()
            ll += we @ (eta[evs] - shift) - wsum * np.log(xp0)
            mean = xp1 / xp0
            score += we @ X[evs] - wsum * mean
            hess -= wsum * (xp2 / xp0 - np.outer(mean, mean))
        return ll, score, hess

    def _loglik_parts(self, beta):
        ll_total = 0.0
        score = np.zeros(len(beta))
        hess = np.zeros((len(beta), len(beta)))
        for stratum, sweep in self._sweeps.items():
            sub = self._rows_by_stratum[stratum]
            ll, sc, he = self._stratum_quantities(sweep, sub, beta)
            ll_total += ll
            score += sc
            hess += he
        return ll_total, score, hess

    def fit(self, rows):
        rows = rows if isinstance(rows, CountingProcessRows) else CountingProcessRows(
            *rows
        )
        if not rows.status.any():
            raise ValueError("no events in the data")
        p = rows.n_covariates
        self._rows_by_stratum = {}
        self._sweeps = {}
        for stratum in np.unique(rows.strata):
            mask = rows.strata == stratum
            sub = CountingProcessRows(
                rows.start[mask], rows.stop[mask], rows.status[mask],
                rows.covariates[mask], rows.weight[mask],
            )
            if not sub.status.any():
                raise ValueError(f"stratum {stratum} has no events")
            self._rows_by_stratum[stratum] = sub
            self._sweeps[stratum] = _RiskSetSweep(sub)

        beta = np.zeros(p)
        ll, score, hess = self._loglik_parts(beta)
        converged = False
        n_iter = 0
        for n_iter in range(1, self.max_iter + 1):
            try:
                step = np.linalg.solve(-hess, score)
            except np.linalg.LinAlgError as err:
                raise ValueError(f"singular information matrix: {err}") from err
            factor = 1.0
            for _ in range(30):
                cand = beta + factor * step
                ll_new, score_new, hess_new = self._loglik_parts(cand)
                if ll_new >= ll - 1e-12:
                    break
                factor *= 0.5
            beta, ll_prev = cand, ll
            ll, score, hess = ll_new, score_new, hess_new
            if np.any(np.abs(beta) > self.coef_bound):
                raise ValueError(
                    "coefficients diverged (monotone likelihood / separation)"
                )
            if abs(ll - ll_prev) < self.loglik_tol:
                converged = True
                break
        self.coef_ = beta
        self.n_iter_ = n_iter
        self.converged_ = converged
        self.final_loglik_ = ll
        self.final_score_ = score
        if not converged:
            raise ValueError(
                f"Cox fit did not converge in {self.max_iter} iterations"
            )
        self.baseline_cumhaz_ = {
            stratum: self._breslow_baseline(stratum, beta)
            for stratum in self._rows_by_stratum
        }
        self.max_time_ = float(rows.stop.max())
        del self._sweeps
        return self

    def _breslow_baseline(self, stratum, beta):
        rows = self._rows_by_stratum[stratum]
        sweep = self._sweeps[stratum]
        eta = rows.covariates @ beta
        e = rows.weight * np.exp(eta)
        m = sweep.event_times.size
        increments = np.zeros(m)
        xp0 = 0.0
        for j in range(m - 1, -1, -1):
            ent = sweep.entering(j)
            if ent.size:
                xp0 += e[ent].sum()
            ext = sweep.exiting(j)
            if ext.size:
                xp0 -= e[ext].sum()
            evs = sweep.events_at(j)
            increments[j] = rows.weight[evs].sum() / xp0
        return StepFunction(sweep.event_times, np.cumsum(increments), init=0.0)

    def cumhaz_increments(self, taus, boundaries, stratum=0):
        """Baseline cumulative-hazard mass per interval, capped at each tau.

        Returns an array of shape (len(boundaries) - 1, len(taus)) whose
        ``[k, j]`` entry is ``H0(min(tau_j, b_{k+1})) - H0(min(tau_j, b_k))``.
        """
        h0 = self.baseline_cumhaz_[stratum]
        taus = np.asarray(taus, dtype=float)
        b = np.asarray(boundaries, dtype=float)
        lo = h0(np.minimum(taus[None, :], b[:-1, None]))
        hi = h0(np.minimum(taus[None, :], b[1:, None]))
        return hi - lo

    def to_dict(self):
        return {
            "coef": self.coef_.tolist(),
            "max_time": self.max_time_,
            "baseline_cumhaz": {
                str(k): fn.to_dict() for k, fn in self.baseline_cumhaz_.items()
            },
        }

    @classmethod
    def from_dict(cls, d):
        model = cls()
        model.coef_ = np.asarray(d["coef"], dtype=float)
        model.baseline_cumhaz_ = {
            int(k): StepFunction.from_dict(v)
            for k, v in d["baseline_cumhaz"].items()
        }
        model.max_time_ = d.get("max_time", np.inf)
        model.n_iter_ = 0
        model.converged_ = True
        return model


def _solvable(M, rtol=1e-10):
    """Rank check for the PSD risk-set Gram matrix; downdating leaves
    near-zero eigenvalues that plain ``solve`` would turn into garbage."""
    evals = np.linalg.eigvalsh(M)
    return evals[0] > rtol * max(evals[-1], 1.0)


class WeightedAalen(BaseEstimator):
    """Weighted Aalen additive-hazards fit on counting-process rows.

    At each event time the coefficient increment solves the weighted
    least-squares system on the risk set; cumulative sums of the increments
    form the cumulative coefficient functions. An intercept column is always
    prepended. Negative increments are kept (the estimator is unbiased);
    risks derived from the fit are clamped at prediction time only.

    Attributes
    ----------
    cumulative_ : dict stratum -> StepFunction list (one per column)
    skipped_increments_ : int
        Event times skipped because the risk-set design was singular.
    """

    def __init__(self):
        pass

    def fit(self, rows):
        rows = rows if isinstance(rows, CountingProcessRows) else CountingProcessRows(
            *rows
        )
        if not rows.status.any():
            raise ValueError("no events in the data")
        self.skipped_increments_ = 0
        self.cumulative_ = {}
        self.event_times_ = {}
        self.increments_ = {}
        self.max_time_ = float(rows.stop.max())
        for stratum in np.unique(rows.strata):
            mask = rows.strata == stratum
            sub = CountingProcessRows(
                rows.start[mask], rows.stop[mask], rows.status[mask],
                rows.covariates[mask], rows.weight[mask],
            )
            self._fit_stratum(stratum, sub)
        return self

    def _fit_stratum(self, stratum, rows):
        sweep = _RiskSetSweep(rows)
        Z = np.column_stack([np.ones(rows.n_rows), rows.covariates])
        p = Z.shape[1]
        w = rows.weight
        m = sweep.event_times.size
        increments = np.zeros((m, p))
        M = np.zeros((p, p))
        for j in range(m - 1, -1, -1):
            ent = sweep.entering(j)
            if ent.size:
                M += (w[ent][:, None] * Z[ent]).T @ Z[ent]
            ext = sweep.exiting(j)
            if ext.size:
                M -= (w[ext][:, None] * Z[ext]).T @ Z[ext]
            evs = sweep.events_at(j)
            rhs = w[evs] @ Z[evs]
            # a covariate identically zero on the risk set (e.g. a treatment
            # duration before anyone can have accrued one) is excluded from
            # the solve and gets a zero increment; only genuine rank
            # deficiency among the remaining columns skips the event time
            diag = np.diag(M)
            active = diag > 1e-12 * max(diag.max(), 1.0)
            Ma = M[np.ix_(active, active)]
            if not _solvable(Ma):
                self.skipped_increments_ += 1
                continue
            increments[j, active] = np.linalg.solve(Ma, rhs[active])
        # increments were filled backwards over ascending event times
        cum = np.cumsum(increments, axis=0)
        self.event_times_[stratum] = sweep.event_times
        self.increments_[stratum] = increments
        self.cumulative_[stratum] = [
            StepFunction(sweep.event_times, cum[:, c], init=0.0) for c in range(p)
        ]

    def cumulative_increments(self, taus, boundaries, stratum=0):
        """Per-coefficient cumulative mass per interval, capped at each tau.

        Returns shape (p, len(boundaries) - 1, len(taus)).
        """
        taus = np.asarray(taus, dtype=float)
        b = np.asarray(boundaries, dtype=float)
        fns = self.cumulative_[stratum]
        out = np.empty((len(fns), b.size - 1, taus.size))
        for c, fn in enumerate(fns):
            lo = fn(np.minimum(taus[None, :], b[:-1, None]))
            hi = fn(np.minimum(taus[None, :], b[1:, None]))
            out[c] = hi - lo
        return out

    def to_dict(self):
        return {
            "max_time": self.max_time_,
            "cumulative": {
                str(k): [fn.to_dict() for fn in fns]
                for k, fns in self.cumulative_.items()
            },
        }

    @classmethod
    def from_dict(cls, d):
        model = cls()
        model.cumulative_ = {
            int(k): [StepFunction.from_dict(f) for f in fns]
            for k, fns in d["cumulative"].items()
        }
        model.max_time_ = d.get("max_time", np.inf)
        model.skipped_increments_ = 0
        return model
