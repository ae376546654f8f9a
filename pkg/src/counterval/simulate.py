"""Simulation study engine: data generation, scenario runs and aggregation.

Generates development, observational-validation and perfect-validation
datasets on a five-visit grid with continuous event times, runs the full
develop/predict/validate pipeline per replication, and aggregates bias and
Monte Carlo standard errors of every estimator against the perfect-data
truth.

Randomness is organized as one substream per (replication, dataset, purpose),
so the perfect datasets reuse the covariate-noise and event draws of the
observational dataset they extend: a subject whose observed treatment path
already follows the strategy keeps the same covariates and event time in the
perfect dataset. Treatment draws have their own substream and are simply not
consumed when treatment is forced.
"""

import dataclasses
import os
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .data import LongitudinalData, always_treated, apply_artificial_censoring, never_treated
from .develop import MsmIptw
from .glm import TermSpec, _expit
from .metrics import counterfactual_panel, standard_panel, subset_panel
from .weights import compute_ipacw, estimate_standard_censoring, fit_treatment_models

__all__ = [
    "DgmParams",
    "ScenarioConfig",
    "SimulatedCohort",
    "dgm_params",
    "weight_model_spec",
    "generate_observational",
    "generate_perfect",
    "simulate_event_time",
    "run_replication",
    "run_scenario",
    "marginal_summary",
    "AggregateReport",
    "SCENARIOS",
]

SCENARIOS = ("1", "2", "3", "4a", "4b", "5a", "5b", "6a", "6b", "6c", "6d")
STRATEGY_NAMES = ("never_treated", "always_treated")
ESTIMATORS = ("true", "subset", "counterfactual")
METRIC_KEYS = ("oe_ratio", "cindex", "auc", "scaled_brier")


@dataclass(frozen=True)
class DgmParams:
    """Constants of one data generating mechanism (one dataset role)."""

    family: str
    n_visits: int = 5
    admin_censor: float = 5.0
    u_sd: float = 2.0
    l0_mean: float = 10.0
    l0_sd: float = 4.0
    l_autoreg: float = 0.8
    l_treat_effect: float = -1.0
    l_drift: float = 0.1
    l_noise_sd: float = 4.0
    gamma0: float = -2.0
    gamma_l: float = 0.1
    gamma_l2: float = 0.0
    alpha0: float = 0.2
    alpha_a: float = -0.04
    alpha_l: float = 0.01
    alpha_u: float = 0.01
    additive_time_factor: bool = True
    measure_sd: float = 4.0


_ADDITIVE_BASE = DgmParams(family="additive")
_COX_BASE = DgmParams(
    family="cox",
    u_sd=0.1,
    l0_mean=0.0,
    l0_sd=1.0,
    l_noise_sd=1.0,
    gamma0=-1.0,
    gamma_l=0.5,
    alpha0=-2.0,
    alpha_a=-0.5,
    alpha_l=0.5,
    alpha_u=0.5,
    additive_time_factor=False,
    measure_sd=1.0,
)


def dgm_params(family, scenario="1", role="validation"):
    """Generating-mechanism constants for a scenario and dataset role.

    Scenario 2 raises the development baseline hazard only; scenarios 4a/4b
    shift the validation treatment intercept (positivity violations) and 6c
    adds a quadratic treatment term in the validation data.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    if family == "additive":
        p = _ADDITIVE_BASE
        if scenario == "2" and role == "development":
            p = replace(p, alpha0=0.3)
        if role == "validation":
            if scenario == "4a":
                p = replace(p, gamma0=-0.25)
            elif scenario == "4b":
                p = replace(p, gamma0=-0.75)
            elif scenario == "6c":
                p = replace(p, gamma0=-1.0, gamma_l=0.01, gamma_l2=0.01)
        return p
    if family == "cox":
        p = _COX_BASE
        if scenario == "2" and role == "development":
            p = replace(p, alpha0=-1.0)
        if role == "validation":
            if scenario == "4a":
                p = replace(p, gamma0=0.5)
            elif scenario == "4b":
                p = replace(p, gamma0=0.0)
            elif scenario == "6c":
                p = replace(p, gamma0=-1.0, gamma_l=0.5, gamma_l2=0.25)
        return p
    raise ValueError(f"unknown family {family!r}")


def weight_model_spec(scenario):
    """Validation-side weight-model terms and link for a scenario."""
    if scenario in ("1", "2", "3", "4a", "4b", "6c"):
        return (TermSpec(0),), "logit"
    if scenario == "5a":
        return (), "logit"
    if scenario == "5b":
        return (TermSpec(0, baseline=True),), "logit"
    if scenario == "6a":
        return (TermSpec(0, transform="log_shift", shift=20.0),), "logit"
    if scenario == "6b":
        return (TermSpec(0, transform="square"),), "logit"
    if scenario == "6d":
        return (TermSpec(0),), "cauchit"
    raise ValueError(f"unknown scenario {scenario!r}")


@dataclass(frozen=True, eq=False)
class SimulatedCohort:
    """A generated dataset plus the latent state needed to extend it."""

    data: LongitudinalData
    u: np.ndarray
    covariate_paths: np.ndarray  # (n, K) untruncated
    treatment_paths: np.ndarray  # (n, K) untruncated
    l_noise: np.ndarray  # (n, K-1) innovations shared with perfect data
    event_exp: np.ndarray  # unit-exponential event draws, shared
    measurement_noise: np.ndarray
    n_floored_hazards: int


def _treatment_probability(params, l_values):
    eta = params.gamma0 + params.gamma_l * l_values + params.gamma_l2 * l_values ** 2
    return _expit(np.asarray(eta, dtype=float))


def true_initiation_probabilities(params, data):
    """The generating P(A_k=1 | untreated, L_k) on a dataset's own covariates."""
    l_k = data.covariates[:, :, 0]
    with np.errstate(invalid="ignore"):
        return _treatment_probability(params, l_k)


def _interval_hazards(params, a_paths, l_paths, u):
    """Piecewise-constant hazard per visit interval, shape (n, K).

    The additive covariate effect decays over the grid: the interval starting
    at visit m carries the factor ``1 - 0.2 m`` (one-based interval labels in
    the generating tables).
    """
    k = np.arange(params.n_visits)
    if params.family == "additive":
        time_factor = 1.0 - 0.2 * k if params.additive_time_factor else np.ones_like(k, dtype=float)
        h = (
            params.alpha0
            + params.alpha_a * a_paths
            + params.alpha_l * time_factor[None, :] * l_paths
            + params.alpha_u * u[:, None]
        )
        floored = int(np.sum(h < 0))
        return np.maximum(h, 0.0), floored
    h = np.exp(
        params.alpha0
        + params.alpha_a * a_paths
        + params.alpha_l * l_paths
        + params.alpha_u * u[:, None]
    )
    return h, 0


def simulate_event_time(hazards, exp_draws, admin_censor):
    """Invert piecewise-constant interval hazards against unit exponentials.

    The cumulative hazard grows by ``h_k`` over each unit interval
    ``[k, k+1)``; the event lands where it first reaches the exponential
    draw, by linear inversion inside the interval. Draws not reached within
    the grid, or reached exactly at the administrative boundary, censor at
    ``admin_censor``.

    Returns ``(time, event)`` arrays.
    """
    h = np.atleast_2d(np.asarray(hazards, dtype=float))
    e = np.atleast_1d(np.asarray(exp_draws, dtype=float))
    cum = np.cumsum(h, axis=1)
    crossed = cum >= e[:, None]
    any_cross = crossed.any(axis=1)
    k = np.where(any_cross, crossed.argmax(axis=1), h.shape[1] - 1)
    prev = np.where(k > 0, np.take_along_axis(cum, np.maximum(k - 1, 0)[:, None],
                                              axis=1)[:, 0], 0.0)
    hk = np.take_along_axis(h, k[:, None], axis=1)[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = (e - prev) / hk
    t_event = np.where(any_cross & (hk > 0), k + frac, np.inf)
    time = np.minimum(t_event, admin_censor)
    event = (t_event < admin_censor).astype(np.int8)
    return time, event


def _draw_streams(seed_seq):
    names = ("baseline", "lnoise", "treatment", "event", "measurement")
    children = seed_seq.spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def _paths_to_dataset(params, a_paths, l_paths, time, event):
    n, K = a_paths.shape
    n_visits = np.clip(np.ceil(time).astype(int), 0, K)
    grid = np.arange(K)
    attended = grid[None, :] < n_visits[:, None]
    cov = np.where(attended, l_paths, np.nan)[:, :, None]
    treat = np.where(attended, a_paths, -1).astype(np.int8)
    return LongitudinalData(
        ids=np.arange(n), time=time, event=event, covariates=cov, treatment=treat,
    )


def generate_observational(params, n, seed_seq):
    """Draw an observational cohort under the generating mechanism."""
    streams = _draw_streams(seed_seq)
    K = params.n_visits
    u = streams["baseline"].normal(0.0, params.u_sd, size=n)
    l0 = params.l0_mean + u + streams["baseline"].normal(0.0, params.l0_sd, size=n)
    l_noise = streams["lnoise"].normal(0.0, params.l_noise_sd, size=(n, K - 1))
    treat_u = streams["treatment"].uniform(size=(n, K))
    event_exp = streams["event"].exponential(size=n)
    measurement = streams["measurement"].normal(0.0, 1.0, size=n)

    l_paths = np.empty((n, K))
    a_paths = np.empty((n, K), dtype=np.int8)
    l_paths[:, 0] = l0
    a_paths[:, 0] = treat_u[:, 0] < _treatment_probability(params, l0)
    for k in range(1, K):
        l_paths[:, k] = (
            params.l_autoreg * l_paths[:, k - 1]
            + params.l_treat_effect * a_paths[:, k - 1]
            + params.l_drift * k
            + u
            + l_noise[:, k - 1]
        )
        initiate = treat_u[:, k] < _treatment_probability(params, l_paths[:, k])
        a_paths[:, k] = np.where(a_paths[:, k - 1] == 1, 1, initiate)

    hazards, n_floored = _interval_hazards(params, a_paths, l_paths, u)
    time, event = simulate_event_time(hazards, event_exp, params.admin_censor)
    return SimulatedCohort(
        data=_paths_to_dataset(params, a_paths, l_paths, time, event),
        u=u,
        covariate_paths=l_paths,
        treatment_paths=a_paths,
        l_noise=l_noise,
        event_exp=event_exp,
        measurement_noise=measurement,
        n_floored_hazards=n_floored,
    )


def generate_perfect(cohort, strategy, params):
    """Extend an observational cohort into a perfect dataset for one strategy.

    Inherits each subject's baseline covariate and latent frailty, forces the
    treatment path, and regenerates later covariates and the event time from
    the same innovation and exponential draws as the source cohort. A subject
    who already followed the strategy is reproduced identically.
    """
    n = cohort.u.size
    K = params.n_visits
    u = cohort.u
    l_paths = np.empty((n, K))
    l_paths[:, 0] = cohort.covariate_paths[:, 0]
    a_paths = np.repeat(strategy.path[None, :K], n, axis=0).astype(np.int8)
    for k in range(1, K):
        l_paths[:, k] = (
            params.l_autoreg * l_paths[:, k - 1]
            + params.l_treat_effect * a_paths[:, k - 1]
            + params.l_drift * k
            + u
            + cohort.l_noise[:, k - 1]
        )
    hazards, n_floored = _interval_hazards(params, a_paths, l_paths, u)
    time, event = simulate_event_time(hazards, cohort.event_exp,
                                      params.admin_censor)
    return SimulatedCohort(
        data=_paths_to_dataset(params, a_paths, l_paths, time, event),
        u=u,
        covariate_paths=l_paths,
        treatment_paths=a_paths,
        l_noise=cohort.l_noise,
        event_exp=cohort.event_exp,
        measurement_noise=cohort.measurement_noise,
        n_floored_hazards=n_floored,
    )


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation run: scenario, family, sizes, seed and method switches."""

    scenario: str = "1"
    family: str = "additive"
    n: int = 3000
    replications: int = 1000
    seed: int = 0
    n_groups: int = 10
    taus: tuple = (1.0, 2.0, 3.0, 4.0, 5.0)
    primary_tau: float = 5.0
    g_form: str = "current_geometric"
    true_weights: bool = False
    truncate_weights: float = None
    per_visit_models: bool = False
    calibration_weights: str = "time-updated"
    dev_link: str = "logit"
    n_jobs: int = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.family not in ("additive", "cox"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.primary_tau not in self.taus:
            raise ValueError("primary_tau must be on the tau grid")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["taus"] = list(self.taus)
        return d


def _rep_seed(config, rep):
    return np.random.SeedSequence(entropy=config.seed, spawn_key=(rep,))


def run_replication(config, rep):
    """One full simulation replication; returns panels keyed by estimator."""
    rep_seq = _rep_seed(config, rep)
    dev_seq, val_seq = rep_seq.spawn(2)

    dev_params = dgm_params(config.family, config.scenario, role="development")
    val_params = dgm_params(config.family, config.scenario, role="validation")
    dev = generate_observational(dev_params, config.n, dev_seq)
    val = generate_observational(val_params, config.n, val_seq)

    strategies = (
        never_treated(val_params.n_visits),
        always_treated(val_params.n_visits),
    )
    perfect = {
        s.name: generate_perfect(val, s, val_params) for s in strategies
    }

    model = MsmIptw(
        family=config.family, g_form=config.g_form,
        treatment_terms=(TermSpec(0),), link=config.dev_link,
    ).fit(dev.data, x_matrix=dev.covariate_paths[:, :1])

    x_clean = val.covariate_paths[:, :1]
    if config.scenario == "3":
        x_pred = x_clean + val_params.measure_sd * val.measurement_noise[:, None]
    else:
        x_pred = x_clean
    taus = np.asarray(config.taus, dtype=float)
    predictions = {
        s.name: model.predict_risk(x_pred, s, taus) for s in strategies
    }

    terms, link = weight_model_spec(config.scenario)
    treatment_models = None
    probabilities = None
    if config.true_weights:
        probabilities = true_initiation_probabilities(val_params, val.data)
    else:
        treatment_models = fit_treatment_models(
            val.data, terms, link=link, pooled=not config.per_visit_models,
        )
    censoring = estimate_standard_censoring(val.data.time, val.data.event)

    panels = {}
    diagnostics = {
        "floored_hazards": {
            "development": dev.n_floored_hazards,
            "validation": val.n_floored_hazards,
        },
        "max_ipacw": {},
        "positivity_flags": {},
        "weight_model_coefficients": (
            treatment_models.coefficients() if treatment_models else "true"
        ),
    }
    for s in strategies:
        view = apply_artificial_censoring(val.data, s)
        ipacw = compute_ipacw(view, treatment_models, probabilities=probabilities)
        diagnostics["max_ipacw"][s.name] = ipacw.max_weight()
        diagnostics["positivity_flags"][s.name] = len(ipacw.positivity_flags)
        if config.truncate_weights is not None:
            ipacw = ipacw.truncate(config.truncate_weights)
        panels[("counterfactual", s.name)] = counterfactual_panel(
            view, ipacw, censoring, predictions[s.name], taus,
            config.primary_tau, n_groups=config.n_groups,
            group_weights=config.calibration_weights,
        )
        panels[("subset", s.name)] = subset_panel(
            val.data, s, predictions[s.name], taus, config.primary_tau,
            n_groups=config.n_groups,
        )
        panels[("true", s.name)] = standard_panel(
            perfect[s.name].data, s.name, predictions[s.name], taus,
            config.primary_tau, n_groups=config.n_groups,
        )
    return {"rep": rep, "panels": panels, "diagnostics": diagnostics}


@dataclass
class AggregateReport:
    """Mean, bias and Monte Carlo SE per estimator/strategy/metric cell."""

    config: dict
    n_replications: int
    n_failed: int
    failures: list
    cells: dict
    curves: dict
    calibration_groups: dict
    diagnostics: dict
    status: str = "ok"

    def to_dict(self):
        def key_str(k):
            return "|".join(k) if isinstance(k, tuple) else str(k)

        return {
            "config": self.config,
            "n_replications": self.n_replications,
            "n_failed": self.n_failed,
            "failures": self.failures,
            "status": self.status,
            "cells": {key_str(k): v for k, v in self.cells.items()},
            "curves": {key_str(k): v for k, v in self.curves.items()},
            "calibration_groups": {
                key_str(k): v for k, v in self.calibration_groups.items()
            },
            "diagnostics": self.diagnostics,
        }


def _nan_stats(values):
    arr = np.asarray(values, dtype=float)
    ok = np.isfinite(arr)
    n_ok = int(ok.sum())
    if n_ok == 0:
        return np.nan, np.nan, 0
    sd = float(np.std(arr[ok], ddof=1)) if n_ok > 1 else np.nan
    return float(np.mean(arr[ok])), sd, n_ok


def _nanmean_cols(arr):
    """Column nanmean that returns NaN (quietly) for all-NaN columns."""
    arr = np.asarray(arr, dtype=float)
    ok = np.isfinite(arr)
    count = ok.sum(axis=0)
    total = np.where(ok, arr, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / count, np.nan)


def aggregate_replications(config, results, failures):
    """Reduce per-replication panels to the aggregate report."""
    results = sorted(results, key=lambda r: r["rep"])
    cells = {}
    curves = {}
    calibration_groups = {}
    for strategy in STRATEGY_NAMES:
        for metric in METRIC_KEYS:
            true_vals = np.array(
                [r["panels"][("true", strategy)].metric_values()[metric]
                 for r in results]
            )
            for estimator in ESTIMATORS:
                vals = np.array(
                    [r["panels"][(estimator, strategy)].metric_values()[metric]
                     for r in results]
                )
                mean, sd, n_ok = _nan_stats(vals)
                cell = {
                    "mean": mean,
                    "mc_se": sd / np.sqrt(n_ok) if n_ok else np.nan,
                    "n_used": n_ok,
                }
                if estimator != "true":
                    diffs = vals - true_vals
                    bias_mean, bias_sd, bias_n = _nan_stats(diffs)
                    cell["bias"] = bias_mean
                    cell["bias_mc_se"] = (
                        bias_sd / np.sqrt(bias_n) if bias_n else np.nan
                    )
                cells[(estimator, strategy, metric)] = cell
        for estimator in ESTIMATORS:
            obs = np.array(
                [r["panels"][(estimator, strategy)].observed_curve
                 for r in results], dtype=float
            )
            pred = np.array(
                [r["panels"][(estimator, strategy)].predicted_curve
                 for r in results], dtype=float
            )
            curves[(estimator, strategy)] = {
                "taus": list(config.taus),
                "observed": _nanmean_cols(obs).tolist(),
                "predicted": _nanmean_cols(pred).tolist(),
            }
            gp = np.array(
                [r["panels"][(estimator, strategy)].group_mean_predicted
                 for r in results], dtype=float
            )
            go = np.array(
                [r["panels"][(estimator, strategy)].group_observed
                 for r in results], dtype=float
            )
            calibration_groups[(estimator, strategy)] = {
                "mean_predicted": _nanmean_cols(gp).tolist(),
                "observed": _nanmean_cols(go).tolist(),
            }
    diagnostics = {
        "max_ipacw": {
            s: float(np.max([r["diagnostics"]["max_ipacw"][s] for r in results]))
            for s in STRATEGY_NAMES
        },
        "floored_hazards_total": int(
            np.sum([sum(r["diagnostics"]["floored_hazards"].values())
                    for r in results])
        ),
        "positivity_flags_total": int(
            np.sum([sum(r["diagnostics"]["positivity_flags"].values())
                    for r in results])
        ),
        "weight_model_coefficients_first_rep": (
            results[0]["diagnostics"]["weight_model_coefficients"]
            if results else None
        ),
    }
    n_failed = len(failures)
    status = "ok" if n_failed <= 0.01 * config.replications else "failed"
    return AggregateReport(
        config=config.to_dict(),
        n_replications=len(results),
        n_failed=n_failed,
        failures=failures,
        cells=cells,
        curves=curves,
        calibration_groups=calibration_groups,
        diagnostics=diagnostics,
        status=status,
    )


def _safe_replication(config, rep):
    try:
        return run_replication(config, rep), None
    except Exception as err:  # noqa: BLE001 - per-rep failures are data
        return None, (rep, f"{type(err).__name__}: {err}")


def resolve_n_jobs(requested=None):
    """Requested worker count, capped by the COUNTERVAL_THREADS env var."""
    env = os.environ.get("COUNTERVAL_THREADS")
    cap = max(1, int(env)) if env else None
    n = int(requested) if requested is not None else (cap or 1)
    return min(n, cap) if cap else n


def run_scenario(config):
    """Run all replications of a scenario and aggregate.

    Returns ``(report, per_rep_frame)`` where the frame has one row per
    (replication, estimator, strategy) with the four metric values.
    """
    n_jobs = resolve_n_jobs(config.n_jobs)
    reps = range(config.replications)
    if n_jobs == 1:
        outcomes = [_safe_replication(config, r) for r in reps]
    else:
        outcomes = Parallel(n_jobs=n_jobs)(
            delayed(_safe_replication)(config, r) for r in reps
        )
    results = [res for res, err in outcomes if res is not None]
    failures = [err for res, err in outcomes if err is not None]
    report = aggregate_replications(config, results, failures)

    rows = []
    for r in results:
        for (estimator, strategy), panel in r["panels"].items():
            row = {
                "rep": r["rep"],
                "estimator": estimator,
                "strategy": strategy,
                "n_events": panel.n_events,
                **panel.metric_values(),
            }
            rows.append(row)
    frame = pd.DataFrame(rows).sort_values(
        ["rep", "estimator", "strategy"], kind="stable"
    ).reset_index(drop=True)
    return report, frame


def dump_replication_data(config, out_dir, rep=0):
    """Write one replication's generated datasets as long-format CSVs."""
    from .data import save_longitudinal_csv

    rep_seq = _rep_seed(config, rep)
    dev_seq, val_seq = rep_seq.spawn(2)
    dev_params = dgm_params(config.family, config.scenario, "development")
    val_params = dgm_params(config.family, config.scenario, "validation")
    dev = generate_observational(dev_params, config.n, dev_seq)
    val = generate_observational(val_params, config.n, val_seq)
    os.makedirs(out_dir, exist_ok=True)
    save_longitudinal_csv(dev.data, os.path.join(out_dir, f"rep{rep}_development.csv"))
    save_longitudinal_csv(val.data, os.path.join(out_dir, f"rep{rep}_validation.csv"))
    for make, label in ((never_treated, "never"), (always_treated, "always")):
        perfect = generate_perfect(val, make(val_params.n_visits), val_params)
        save_longitudinal_csv(
            perfect.data, os.path.join(out_dir, f"rep{rep}_perfect_{label}.csv")
        )


def marginal_summary(family, n=200_000, seed=12345):
    """Large-sample marginal descriptives used as generator sanity checks."""
    params = dgm_params(family, "1", role="validation")
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(0,))
    cohort = generate_observational(params, n, seq)
    out = {
        "observational_event_proportion": float(np.mean(cohort.data.event)),
        "ever_treated_proportion": float(
            np.mean((cohort.treatment_paths * (
                np.arange(params.n_visits)[None, :]
                < cohort.data.n_visits[:, None])).any(axis=1))
        ),
    }
    for make, label in ((never_treated, "never"), (always_treated, "always")):
        perfect = generate_perfect(cohort, make(params.n_visits), params)
        out[f"perfect_{label}_event_proportion"] = float(
            np.mean(perfect.data.event)
        )
    return out
