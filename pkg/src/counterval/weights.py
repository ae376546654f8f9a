"""Inverse-probability weights for artificial censoring and treatment.

Weights are piecewise constant between visits: the value on interval
``[m, m+1)`` multiplies the inverse visit-adherence probabilities for visits
``0..m``, so the product at time ``t`` runs up to the most recent visit
(inclusive at integer ``t``). Unstabilized artificial-censoring weights are
therefore >= 1 and nondecreasing. Standard censoring is handled by a separate
Kaplan-Meier factor that does not depend on covariates.
"""

from dataclasses import dataclass, field

import numpy as np

from .glm import PROB_CLAMP, BinaryRegression, build_design_matrix
from .stepfun import StepFunction

__all__ = [
    "TreatmentModelSet",
    "WeightTrajectorySet",
    "CensoringSurvival",
    "CombinedWeights",
    "fit_treatment_models",
    "compute_ipacw",
    "estimate_standard_censoring",
    "combine_weights",
    "compute_stabilized_iptw",
]


@dataclass(frozen=True, eq=False)
class TreatmentModelSet:
    """Fitted models for treatment initiation (and, optionally, continuation).

    With an absorbing treatment process the continuation probability is
    structurally one and no continuation model is fitted.
    """

    terms: tuple
    link: str
    pooled: bool
    initiation: object  # BinaryRegression or dict visit -> BinaryRegression
    continuation: object = None
    include_visit: bool = False
    n_dropped_rows: int = 0

    def initiation_probability(self, data):
        """P(treated at k | untreated before k, covariates), shape (n, K).

        Evaluated at every attended visit of every subject; unattended
        entries are NaN.
        """
        return self._probability(data, self.initiation)

    def continuation_probability(self, data):
        if self.continuation is None:
            raise ValueError("no continuation model was fitted (absorbing process)")
        return self._probability(data, self.continuation)

    def _probability(self, data, model):
        n, K = data.n_subjects, data.max_visits
        out = np.full((n, K), np.nan)
        grid = np.arange(K)
        attended = grid[None, :] < data.n_visits[:, None]
        baseline = data.baseline_covariates()
        for k in range(K):
            rows = attended[:, k]
            if not rows.any():
                continue
            # transform arguments outside their domain are floored so that
            # evaluation stays finite; the clamped probability is flagged by
            # the positivity diagnostics downstream when it matters
            X = build_design_matrix(
                data.covariates[rows, k, :], self.terms, baseline=baseline[rows],
                on_invalid="floor",
            )
            if self.include_visit:
                X = np.column_stack([X, np.full(rows.sum(), float(k))])
            m = model if self.pooled else model[k]
            out[rows, k] = m.predict_proba(X)
        return out

    def coefficients(self):
        """Coefficient echo for run reports."""
        if self.pooled:
            return {"initiation": self.initiation.coef_.tolist()}
        return {
            "initiation": {k: m.coef_.tolist() for k, m in self.initiation.items()}
        }


def _initiation_rows(data):
    """Masks of (subject, visit) cells where an initiation decision is made."""
    grid = np.arange(data.max_visits)
    attended = grid[None, :] < data.n_visits[:, None]
    prev_untreated = np.ones_like(attended)
    prev_untreated[:, 1:] = data.treatment[:, :-1] == 0
    return attended & prev_untreated


def fit_treatment_models(data, terms, link="logit", pooled=True,
                         include_visit=False, absorbing=True):
    """Fit visit-level treatment models on a longitudinal dataset.

    The initiation model targets P(A_k = 1 | A_{k-1} = 0, covariate terms),
    pooled across visits by default. With ``absorbing=False`` a continuation
    model P(A_k = 1 | A_{k-1} = 1, ...) is fitted as well; otherwise
    continuation is taken as structurally certain.
    """
    terms = tuple(terms)
    cells = _initiation_rows(data)
    baseline = data.baseline_covariates()

    def design_for(cells_k, k):
        X = build_design_matrix(
            data.covariates[cells_k, k, :], terms, baseline=baseline[cells_k],
            on_invalid="nan",
        )
        if include_visit:
            X = np.column_stack([X, np.full(cells_k.sum(), float(k))])
        return X

    labels = [t.label() for t in terms] + (["visit"] if include_visit else [])
    n_dropped = 0

    def fit_rows(cell_mask, context):
        nonlocal n_dropped
        Xs, ys = [], []
        for k in range(data.max_visits):
            rows = cell_mask[:, k]
            if rows.any():
                Xs.append(design_for(rows, k))
                ys.append(data.treatment[rows, k].astype(float))
        X = np.vstack(Xs) if Xs else np.empty((0, len(labels)))
        y = np.concatenate(ys) if ys else np.empty(0)
        # rows where a transform is undefined are dropped from the fit
        ok = np.isfinite(X).all(axis=1)
        n_dropped += int((~ok).sum())
        try:
            return BinaryRegression(link=link).fit(X[ok], y[ok], term_labels=labels)
        except (ValueError, RuntimeError) as err:
            raise type(err)(f"{context}: {err}") from err

    if pooled:
        initiation = fit_rows(cells, "treatment initiation model")
    else:
        initiation = {}
        for k in range(data.max_visits):
            mask = np.zeros_like(cells)
            mask[:, k] = cells[:, k]
            initiation[k] = fit_rows(mask, f"treatment initiation model, visit {k}")

    continuation = None
    if not absorbing:
        grid = np.arange(data.max_visits)
        attended = grid[None, :] < data.n_visits[:, None]
        prev_treated = np.zeros_like(attended)
        prev_treated[:, 1:] = data.treatment[:, :-1] == 1
        cont_cells = attended & prev_treated
        if pooled:
            continuation = fit_rows(cont_cells, "treatment continuation model")
        else:
            continuation = {}
            for k in range(1, data.max_visits):
                mask = np.zeros_like(cont_cells)
                mask[:, k] = cont_cells[:, k]
                continuation[k] = fit_rows(
                    mask, f"treatment continuation model, visit {k}"
                )

    return TreatmentModelSet(
        terms=terms, link=link, pooled=pooled, initiation=initiation,
        continuation=continuation, include_visit=include_visit,
        n_dropped_rows=n_dropped,
    )


@dataclass(frozen=True, eq=False)
class WeightTrajectorySet:
    """Per-subject piecewise-constant weights over visit intervals.

    ``interval_values[i, m]`` is subject i's weight on ``[m, m+1)``; the last
    interval extends beyond the grid. Entries past a subject's last defined
    factor carry the final defined value so queries stay finite; estimators
    only evaluate weights where the subject is still under observation.
    """

    interval_values: np.ndarray
    defined_visits: np.ndarray
    positivity_flags: list = field(default_factory=list)

    @property
    def n_subjects(self):
        return self.interval_values.shape[0]

    @property
    def n_intervals(self):
        return self.interval_values.shape[1]

    def _index(self, t, left):
        t = np.asarray(t, dtype=float)
        if left:
            m = np.ceil(t).astype(int) - 1
        else:
            m = np.floor(t).astype(int)
        return np.clip(m, -1, self.n_intervals - 1)

    def _gather(self, m, subjects):
        vals = np.where(
            m < 0,
            1.0,
            self.interval_values[subjects, np.clip(m, 0, None)],
        )
        return vals

    def at(self, t, subjects=None):
        """Weight value at time ``t`` (scalar or per-subject array)."""
        if subjects is None:
            subjects = np.arange(self.n_subjects)
        m = self._index(t, left=False)
        m = np.broadcast_to(m, np.shape(subjects)) if np.ndim(m) == 0 else m
        return self._gather(m, subjects)

    def at_left(self, t, subjects=None):
        """Left-limit weight value just before time ``t``."""
        if subjects is None:
            subjects = np.arange(self.n_subjects)
        m = self._index(t, left=True)
        m = np.broadcast_to(m, np.shape(subjects)) if np.ndim(m) == 0 else m
        return self._gather(m, subjects)

    def max_weight(self):
        return float(np.nanmax(self.interval_values))

    def truncate(self, percentile):
        """Cap interval values at the given percentile of defined values."""
        grid = np.arange(self.n_intervals)
        defined = grid[None, :] < self.defined_visits[:, None]
        cap = np.percentile(self.interval_values[defined], percentile)
        return WeightTrajectorySet(
            interval_values=np.minimum(self.interval_values, cap),
            defined_visits=self.defined_visits,
            positivity_flags=list(self.positivity_flags),
        )


def compute_ipacw(view, models=None, probabilities=None, collect_flags=True):
    """Unstabilized inverse probability of artificial censoring weights.

    For each subject still adherent on an interval, the weight multiplies the
    inverse probabilities of having followed the strategy at every visit up to
    the interval. Factors exist only for visits attended while adherent;
    subjects censored at visit 0 have an empty trajectory (all ones).

    Parameters
    ----------
    view : StrategyView
    models : TreatmentModelSet, optional
        Source of fitted initiation probabilities.
    probabilities : ndarray (n, K), optional
        Initiation probabilities P(A_k=1 | A_{k-1}=0, history) to use instead
        of fitted ones (e.g. the true generating probabilities).
    collect_flags : bool
        Record (id, visit) pairs whose adherence probability hit the clamp
        floor (positivity diagnostics).
    """
    data = view.source
    strategy = view.strategy
    n, K = data.n_subjects, data.max_visits
    if probabilities is None:
        probabilities = models.initiation_probability(data)
    p_treat = np.asarray(probabilities, dtype=float)

    path = strategy.path[:K].astype(float)
    # probability of taking the strategy-consistent action at each visit
    p_follow = np.where(path[None, :] == 1.0, p_treat, 1.0 - p_treat)
    prev = np.concatenate([[0.0], path[:-1]])
    structural = prev == 1.0  # absorbing continuation once the strategy treats
    if models is not None and models.continuation is not None:
        p_cont = models.continuation_probability(data)
        p_follow = np.where(
            structural[None, :],
            np.where(path[None, :] == 1.0, p_cont, 1.0 - p_cont),
            p_follow,
        )
    else:
        p_follow = np.where(structural[None, :], 1.0, p_follow)

    grid = np.arange(K)
    defined = grid[None, :] < view.adherent_visits[:, None]
    p_follow = np.where(defined, p_follow, 1.0)
    p_follow = np.clip(p_follow, PROB_CLAMP, 1.0)

    flags = []
    if collect_flags:
        hit = defined & (p_follow <= PROB_CLAMP)
        for i, k in zip(*np.nonzero(hit)):
            flags.append((data.ids[i], int(k)))

    values = np.cumprod(1.0 / p_follow, axis=1)
    return WeightTrajectorySet(
        interval_values=values,
        defined_visits=view.adherent_visits.copy(),
        positivity_flags=flags,
    )


@dataclass(frozen=True, eq=False)
class CensoringSurvival:
    """Kaplan-Meier estimate of the standard-censoring survival P(C > t)."""

    curve: StepFunction

    def __call__(self, t):
        return self.curve(t)

    def left(self, t):
        return self.curve.left(t)


def estimate_standard_censoring(time, event):
    """Kaplan-Meier of the censoring process (events censor C and vice versa)."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event)
    order = np.argsort(time, kind="stable")
    t_sorted = time[order]
    cens_sorted = (event[order] == 0).astype(float)
    uniq, start = np.unique(t_sorted, return_index=True)
    d = np.add.reduceat(cens_sorted, start)
    at_risk = time.size - start
    with np.errstate(invalid="ignore"):
        factors = 1.0 - d / at_risk
    keep = d > 0
    surv = np.cumprod(np.where(keep, factors, 1.0))
    return CensoringSurvival(StepFunction(uniq[keep], surv[keep], init=1.0))


@dataclass(frozen=True, eq=False)
class CombinedWeights:
    """Product of artificial-censoring and standard-censoring inverse weights.

    Evaluation conventions: ``at`` is right-continuous in both factors;
    ``at_left`` takes left limits of both; ``survivor_at`` pairs the
    right-continuous treatment factor with the left limit of the censoring
    survival, the weight for subjects known event-free at the query time
    (a censoring atom exactly there must not zero out their weight).
    """

    ipacw: WeightTrajectorySet
    censoring: CensoringSurvival

    def at(self, t, subjects=None):
        return self.ipacw.at(t, subjects) / self.censoring(t)

    def at_left(self, t, subjects=None):
        return self.ipacw.at_left(t, subjects) / self.censoring.left(t)

    def survivor_at(self, t, subjects=None):
        return self.ipacw.at(t, subjects) / self.censoring.left(t)


def combine_weights(ipacw, censoring):
    """Combined weight per the product of the two censoring mechanisms."""
    return CombinedWeights(ipacw=ipacw, censoring=censoring)


def compute_stabilized_iptw(data, denominator_models, numerator_models=None,
                            numerator_probabilities=None,
                            denominator_probabilities=None):
    """Stabilized inverse probability of treatment weights for observed paths.

    The factor at visit s is P_num(A_s = a_s | .) / P_den(A_s = a_s | .),
    evaluated at the subject's observed treatment. With an absorbing process
    both probabilities are one after initiation, so weights freeze there.
    A missing numerator model gives unstabilized weights (numerator one).
    """
    n, K = data.n_subjects, data.max_visits

    def initiation_probs(models, override):
        if override is not None:
            return np.asarray(override, dtype=float)
        if models is None:
            return None
        return models.initiation_probability(data)

    p_den = initiation_probs(denominator_models, denominator_probabilities)
    p_num = initiation_probs(numerator_models, numerator_probabilities)

    obs = data.treatment.astype(float)
    grid = np.arange(K)
    attended = grid[None, :] < data.n_visits[:, None]
    prev_untreated = np.ones((n, K), dtype=bool)
    prev_untreated[:, 1:] = data.treatment[:, :-1] == 0
    decision = attended & prev_untreated

    def follow_prob(p_treat):
        p = np.where(obs == 1.0, p_treat, 1.0 - p_treat)
        p = np.where(decision, p, 1.0)
        return np.clip(p, PROB_CLAMP, 1.0)

    den = follow_prob(p_den)
    num = follow_prob(p_num) if p_num is not None else np.ones((n, K))
    values = np.cumprod(num / den, axis=1)
    return WeightTrajectorySet(
        interval_values=values,
        defined_visits=data.n_visits.copy(),
        positivity_flags=[],
    )
