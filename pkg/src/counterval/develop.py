"""Development of interventional prediction models on longitudinal data.

Two routes to a model of counterfactual risk under a static strategy given
baseline covariates: a marginal structural hazard model fitted with
stabilized inverse probability of treatment weights, and the
cloning-censoring-weighting approach (per-strategy artificial censoring with
a strategy-stratified weighted fit). Both support an additive-hazards family
(weighted Aalen) and a Cox family (weighted partial likelihood), and both
return predictors evaluated as one minus the exponentiated negative
cumulative hazard.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import apply_artificial_censoring
from .glm import TermSpec
from .survival import CountingProcessRows, WeightedAalen, WeightedCoxPH
from .weights import compute_ipacw, compute_stabilized_iptw, fit_treatment_models

__all__ = ["MsmIptw", "CloneCensorWeight", "treatment_history_features"]

G_FORMS = ("current", "current_duration", "current_geometric")


def treatment_history_features(path, g_form, decay=0.8):
    """Features summarizing treatment history at each visit.

    Parameters
    ----------
    path : ndarray (..., K)
        Binary treatment per visit (trailing padding may be any value; only
        attended visits should be consumed downstream).
    g_form : {"current", "current_duration", "current_geometric"}
        ``current`` uses the treatment at the most recent visit alone;
        ``current_duration`` adds the count of treated earlier visits;
        ``current_geometric`` adds a geometrically decayed sum of earlier
        treatment, matching the carry-over of an AR(1) covariate process.
    decay : float
        Decay rate for the geometric option.

    Returns
    -------
    ndarray (..., K, n_features)
    """
    path = np.asarray(path, dtype=float)
    current = path[..., :, None]
    if g_form == "current":
        return current
    K = path.shape[-1]
    prior = np.zeros_like(path)
    if g_form == "current_duration":
        prior[..., 1:] = np.cumsum(path, axis=-1)[..., :-1]
    elif g_form == "current_geometric":
        for k in range(1, K):
            prior[..., k] = decay * prior[..., k - 1] + path[..., k - 1]
    else:
        raise ValueError(f"unknown g_form {g_form!r}; options: {G_FORMS}")
    return np.concatenate([current, prior[..., :, None]], axis=-1)


def build_counting_rows(time, event, covariates_by_interval, weight_by_interval,
                        max_visits, strata_value=0):
    """Counting-process rows, one per subject-interval with follow-up in it.

    Interval k covers ``(k, k+1]`` except the last grid interval, which
    extends to the end of follow-up. Subjects with zero follow-up produce no
    rows. ``covariates_by_interval`` has shape (n, K, p) and
    ``weight_by_interval`` (n, K).
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event)
    n = time.size
    K = max_visits
    starts, stops, statuses, covs, ws = [], [], [], [], []
    for k in range(K):
        upper = np.inf if k == K - 1 else float(k + 1)
        live = time > k
        if not live.any():
            break
        stop = np.minimum(time[live], upper)
        status = (event[live] == 1) & (time[live] <= upper)
        starts.append(np.full(live.sum(), float(k)))
        stops.append(stop)
        statuses.append(status)
        covs.append(covariates_by_interval[live, k, :])
        ws.append(weight_by_interval[live, k])
    if not starts:
        raise ValueError("no follow-up to build rows from")
    return CountingProcessRows(
        start=np.concatenate(starts),
        stop=np.concatenate(stops),
        status=np.concatenate(statuses),
        covariates=np.vstack(covs),
        weight=np.concatenate(ws),
        strata=np.full(sum(s.size for s in starts), strata_value, dtype=int),
    )


def _baseline_identity_terms(n_covariates):
    return tuple(TermSpec(j, baseline=True) for j in range(n_covariates))


class MsmIptw(BaseEstimator):
    """Marginal structural hazard model fitted with stabilized IPTW.

    The hazard model conditions on baseline covariates and a configurable
    function of treatment history; fitting reweights observed person-time by
    stabilized inverse probability of treatment weights estimated from the
    same data.

    Parameters
    ----------
    family : {"additive", "cox"}
    g_form : {"current", "current_duration", "current_geometric"}
        Treatment-history features entering the hazard model.
    decay : float
        Decay rate for ``current_geometric``.
    treatment_terms : sequence of TermSpec
        Denominator treatment-model terms (visit-level covariates).
    stabilized : bool
        Use a numerator model (over baseline covariates) on top of the
        denominator; otherwise weights are unstabilized.
    numerator : {"baseline", "marginal"}
        Conditioning set of the stabilizing numerator.
    link : {"logit", "cauchit"}
        Link of the treatment models.
    pooled : bool
        One treatment model pooled over visits (default) or one per visit.
    absorbing : bool
        Treat continuation after initiation as structurally certain.
    """

    def __init__(self, family="additive", g_form="current", decay=0.8,
                 treatment_terms=(TermSpec(0),), stabilized=True,
                 numerator="baseline", link="logit", pooled=True,
                 absorbing=True):
        self.family = family
        self.g_form = g_form
        self.decay = decay
        self.treatment_terms = treatment_terms
        self.stabilized = stabilized
        self.numerator = numerator
        self.link = link
        self.pooled = pooled
        self.absorbing = absorbing

    def fit(self, data, x_matrix=None):
        """Fit on a development dataset.

        ``x_matrix`` is the baseline conditioning set of the hazard model;
        by default the visit-0 covariates next to any baseline predictors.
        """
        if self.family not in ("additive", "cox"):
            raise ValueError(f"unknown family {self.family!r}")
        X = self._default_x(data) if x_matrix is None else np.atleast_2d(
            np.asarray(x_matrix, dtype=float)
        )
        if X.shape[0] != data.n_subjects:
            raise ValueError("x_matrix must have one row per subject")

        denominator = fit_treatment_models(
            data, self.treatment_terms, link=self.link, pooled=self.pooled,
            absorbing=self.absorbing,
        )
        numerator = None
        if self.stabilized:
            num_terms = (
                () if self.numerator == "marginal"
                else _baseline_identity_terms(data.n_covariates)
            )
            numerator = fit_treatment_models(
                data, num_terms, link="logit", pooled=self.pooled,
                absorbing=self.absorbing,
            )
        iptw = compute_stabilized_iptw(data, denominator, numerator)

        treat = np.where(data.treatment >= 0, data.treatment, 0)
        g_feats = treatment_history_features(treat, self.g_form, self.decay)
        n, K = data.n_subjects, data.max_visits
        cov = np.concatenate(
            [g_feats, np.repeat(X[:, None, :], K, axis=1)], axis=2
        )
        rows = build_counting_rows(
            data.time, data.event, cov, iptw.interval_values, K
        )
        fitter = WeightedAalen() if self.family == "additive" else WeightedCoxPH()
        fitter.fit(rows)
        self.model_ = fitter
        self.treatment_models_ = denominator
        self.numerator_models_ = numerator
        self.n_g_features_ = g_feats.shape[2]
        self.n_x_ = X.shape[1]
        self.max_visits_ = K
        return self

    def _default_x(self, data):
        return np.column_stack(
            [data.baseline_covariates(), data.baseline_predictors]
        )

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit first")

    def predict_risk(self, X, strategy, taus):
        """Risk by each tau under a strategy, for baseline covariate rows X.

        Returns an (n, len(taus)) array, clamped to [0, 1] and nondecreasing
        along the tau axis.
        """
        self._check_fitted()
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_x_:
            raise ValueError(f"expected {self.n_x_} baseline columns")
        taus = np.asarray(taus, dtype=float)
        if taus.size and taus.max() > self.model_.max_time_:
            raise ValueError(
                f"tau {taus.max()} beyond the fitted follow-up "
                f"({self.model_.max_time_})"
            )
        order = np.argsort(taus, kind="stable")
        K = self.max_visits_
        boundaries = np.concatenate([np.arange(K, dtype=float), [np.inf]])
        g_path = treatment_history_features(
            strategy.path[:K].astype(float), self.g_form, self.decay
        )  # (K, n_g)

        sorted_taus = taus[order]
        if self.family == "additive":
            inc = self.model_.cumulative_increments(sorted_taus, boundaries)
            # coefficient order: intercept, g features, baseline covariates
            cumhaz = inc[0].sum(axis=0)[None, :]  # (1, T)
            for g in range(self.n_g_features_):
                cumhaz = cumhaz + (g_path[:, g] @ inc[1 + g])[None, :]
            xterm = X @ inc[1 + self.n_g_features_:].sum(axis=1)  # (n, T)
            cumhaz = cumhaz + xterm
        else:
            beta = self.model_.coef_
            beta_g = beta[: self.n_g_features_]
            beta_x = beta[self.n_g_features_:]
            h0 = self.model_.cumhaz_increments(sorted_taus, boundaries)  # (K, T)
            g_lin = np.exp(g_path @ beta_g)  # (K,)
            base = g_lin @ h0  # (T,)
            cumhaz = np.exp(X @ beta_x)[:, None] * base[None, :]

        risk = 1.0 - np.exp(-cumhaz)
        risk = np.maximum.accumulate(np.clip(risk, 0.0, 1.0), axis=1)
        out = np.empty_like(risk)
        out[:, order] = risk
        return out

    def predict_under_strategies(self, X, strategies, taus):
        """Predictions for several strategies at once: dict name -> (n, T)."""
        return {s.name: self.predict_risk(X, s, taus) for s in strategies}

    def to_dict(self):
        self._check_fitted()
        return {
            "kind": "msm_iptw",
            "family": self.family,
            "g_form": self.g_form,
            "decay": self.decay,
            "n_g_features": self.n_g_features_,
            "n_x": self.n_x_,
            "max_visits": self.max_visits_,
            "model": self.model_.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        obj = cls(family=d["family"], g_form=d["g_form"], decay=d["decay"])
        obj.model_ = (
            WeightedAalen.from_dict(d["model"]) if d["family"] == "additive"
            else WeightedCoxPH.from_dict(d["model"])
        )
        obj.n_g_features_ = d["n_g_features"]
        obj.n_x_ = d["n_x"]
        obj.max_visits_ = d["max_visits"]
        return obj


class CloneCensorWeight(BaseEstimator):
    """Cloning-censoring-weighting development of interventional predictions.

    One artificially censored copy of the development data per strategy,
    weighted by (optionally stabilized) inverse probability of artificial
    censoring weights, fitted as a strategy-stratified model: a stratified
    Cox model with shared covariate effects, or one Aalen fit per stratum.
    """

    def __init__(self, family="additive", treatment_terms=(TermSpec(0),),
                 stabilized=True, numerator="baseline", link="logit",
                 pooled=True, absorbing=True):
        self.family = family
        self.treatment_terms = treatment_terms
        self.stabilized = stabilized
        self.numerator = numerator
        self.link = link
        self.pooled = pooled
        self.absorbing = absorbing

    def fit(self, data, strategies, x_matrix=None):
        if self.family not in ("additive", "cox"):
            raise ValueError(f"unknown family {self.family!r}")
        X = (
            np.column_stack([data.baseline_covariates(), data.baseline_predictors])
            if x_matrix is None
            else np.atleast_2d(np.asarray(x_matrix, dtype=float))
        )
        denominator = fit_treatment_models(
            data, self.treatment_terms, link=self.link, pooled=self.pooled,
            absorbing=self.absorbing,
        )
        numerator = None
        if self.stabilized:
            num_terms = (
                () if self.numerator == "marginal"
                else _baseline_identity_terms(data.n_covariates)
            )
            numerator = fit_treatment_models(
                data, num_terms, link="logit", pooled=self.pooled,
                absorbing=self.absorbing,
            )

        n, K = data.n_subjects, data.max_visits
        row_parts = []
        self.strategy_index_ = {}
        for s_idx, strategy in enumerate(strategies):
            self.strategy_index_[strategy.name] = s_idx
            view = apply_artificial_censoring(data, strategy)
            if not np.any(view.time > 0):
                raise ValueError(
                    f"no follow-up under strategy '{strategy.name}' "
                    "(nobody starts on it)"
                )
            ipacw = compute_ipacw(view, denominator, collect_flags=False)
            values = ipacw.interval_values
            if numerator is not None:
                num_traj = compute_ipacw(view, numerator, collect_flags=False)
                values = values / num_traj.interval_values
            cov = np.repeat(X[:, None, :], K, axis=1)
            rows = build_counting_rows(
                view.time, view.event, cov, values, K, strata_value=s_idx
            )
            row_parts.append(rows)

        rows = CountingProcessRows(
            start=np.concatenate([r.start for r in row_parts]),
            stop=np.concatenate([r.stop for r in row_parts]),
            status=np.concatenate([r.status for r in row_parts]),
            covariates=np.vstack([r.covariates for r in row_parts]),
            weight=np.concatenate([r.weight for r in row_parts]),
            strata=np.concatenate([r.strata for r in row_parts]),
        )
        fitter = WeightedAalen() if self.family == "additive" else WeightedCoxPH()
        fitter.fit(rows)
        self.model_ = fitter
        self.treatment_models_ = denominator
        self.n_x_ = X.shape[1]
        return self

    def predict_risk(self, X, strategy, taus):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit first")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        taus = np.asarray(taus, dtype=float)
        if taus.size and taus.max() > self.model_.max_time_:
            raise ValueError(
                f"tau {taus.max()} beyond the fitted follow-up "
                f"({self.model_.max_time_})"
            )
        order = np.argsort(taus, kind="stable")
        sorted_taus = taus[order]
        stratum = self.strategy_index_[strategy.name]
        if self.family == "additive":
            fns = self.model_.cumulative_[stratum]
            cumhaz = np.asarray(fns[0](sorted_taus))[None, :]
            for j in range(self.n_x_):
                cumhaz = cumhaz + X[:, j][:, None] * np.asarray(
                    fns[1 + j](sorted_taus)
                )[None, :]
        else:
            h0 = self.model_.baseline_cumhaz_[stratum]
            cumhaz = np.exp(X @ self.model_.coef_)[:, None] * np.asarray(
                h0(sorted_taus)
            )[None, :]
        risk = 1.0 - np.exp(-cumhaz)
        risk = np.maximum.accumulate(np.clip(risk, 0.0, 1.0), axis=1)
        out = np.empty_like(risk)
        out[:, order] = risk
        return out

    def predict_under_strategies(self, X, strategies, taus):
        return {s.name: self.predict_risk(X, s, taus) for s in strategies}
