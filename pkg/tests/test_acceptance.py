"""Acceptance gate: every criterion is one test printing a pass/fail line.

The simulation criteria run 200 replications at n=3000 (the published study
used 1000) with the tolerances fixed below; scenario runs are cached so the
sweep criteria reuse them. Expect the full module to take tens of minutes.
"""

import json
import os

import numpy as np
import pandas as pd

from counterval.cli import main as cli_main
from counterval.data import (
    always_treated,
    apply_artificial_censoring,
    never_treated,
)
from counterval.metrics import (
    brier_score,
    concordance_index,
    cumulative_dynamic_auc,
    unit_weights,
)
from counterval.simulate import (
    ScenarioConfig,
    dgm_params,
    generate_observational,
    marginal_summary,
    run_scenario,
    weight_model_spec,
)
from counterval.survival import weighted_kaplan_meier
from counterval.weights import (
    CensoringSurvival,
    combine_weights,
    fit_treatment_models,
)
from counterval.stepfun import StepFunction

SEED = 42
REPS = 200
N = 3000
N_JOBS = min(2, os.cpu_count() or 1)

_RUNS = {}


def scenario_run(scenario, family):
    key = (scenario, family)
    if key not in _RUNS:
        config = ScenarioConfig(
            scenario=scenario, family=family, n=N, replications=REPS,
            seed=SEED, n_jobs=N_JOBS,
        )
        report, frame = run_scenario(config)
        assert report.status == "ok", (
            f"{family} scenario {scenario}: {report.n_failed} replications "
            f"failed: {report.failures[:3]}"
        )
        _RUNS[key] = report
    return _RUNS[key]


def cell(report, estimator, strategy, metric):
    return report.cells[(estimator, strategy, metric)]


class Check:
    def __init__(self, criterion):
        self.criterion = criterion
        self.lines = []
        self.ok = True

    def within(self, label, value, target, tol):
        good = np.isfinite(value) and abs(value - target) <= tol
        self.ok &= good
        self.lines.append(
            f"  {'ok ' if good else 'FAIL'} {label}: {value:.4f} "
            f"(target {target} +/- {tol})"
        )

    def holds(self, label, good, detail=""):
        self.ok &= bool(good)
        self.lines.append(
            f"  {'ok ' if good else 'FAIL'} {label}{': ' + detail if detail else ''}"
        )

    def finish(self):
        verdict = "PASS" if self.ok else "FAIL"
        print(f"\nACCEPTANCE CRITERION {self.criterion}: {verdict}")
        for line in self.lines:
            print(line)
        assert self.ok, f"criterion {self.criterion} failed"


def test_criterion_1_scenario1_additive():
    report = scenario_run("1", "additive")
    check = Check(1)
    cf = lambda s, m: cell(report, "counterfactual", s, m)["mean"]  # noqa: E731
    check.within("counterfactual OE never", cf("never_treated", "oe_ratio"),
                 1.002, 0.010)
    check.within("counterfactual c-index never", cf("never_treated", "cindex"),
                 0.547, 0.005)
    check.within("counterfactual c-index always", cf("always_treated", "cindex"),
                 0.556, 0.005)
    check.within("counterfactual AUCt never", cf("never_treated", "auc"),
                 0.572, 0.010)
    check.within("counterfactual scaled Brier never (pp)",
                 cf("never_treated", "scaled_brier"), 1.18, 0.75)
    sub = lambda m: cell(report, "subset", "never_treated", m)["bias"]  # noqa: E731
    check.within("subset OE bias never", sub("oe_ratio"), 0.14, 0.02)
    check.within("subset c-index bias never", sub("cindex"), 0.031, 0.005)
    check.within("subset scaled Brier bias never (pp)", sub("scaled_brier"),
                 -4.2, 1.7)
    check.finish()


def test_criterion_2_scenario2_additive():
    report = scenario_run("2", "additive")
    check = Check(2)
    cf = lambda s, m: cell(report, "counterfactual", s, m)["mean"]  # noqa: E731
    check.within("counterfactual OE never", cf("never_treated", "oe_ratio"),
                 0.857, 0.010)
    check.within("counterfactual OE always", cf("always_treated", "oe_ratio"),
                 0.809, 0.010)
    check.within("counterfactual scaled Brier never (pp)",
                 cf("never_treated", "scaled_brier"), -5.4, 1.8)
    check.within("subset OE never",
                 cell(report, "subset", "never_treated", "oe_ratio")["mean"],
                 0.973, 0.015)
    check.finish()


def test_criterion_3_scenario3_additive():
    report = scenario_run("3", "additive")
    check = Check(3)
    cf = lambda s, m: cell(report, "counterfactual", s, m)["mean"]  # noqa: E731
    check.within("counterfactual c-index never", cf("never_treated", "cindex"),
                 0.535, 0.005)
    check.within("counterfactual AUCt never", cf("never_treated", "auc"),
                 0.554, 0.010)
    check.within("counterfactual OE never", cf("never_treated", "oe_ratio"),
                 1.008, 0.010)
    check.finish()


def test_criterion_4_cox_scenarios():
    report1 = scenario_run("1", "cox")
    report2 = scenario_run("2", "cox")
    check = Check(4)
    cf1 = lambda s, m: cell(report1, "counterfactual", s, m)["mean"]  # noqa: E731
    check.within("cox sc1 counterfactual c-index never",
                 cf1("never_treated", "cindex"), 0.600, 0.006)
    check.within("cox sc1 counterfactual OE never",
                 cf1("never_treated", "oe_ratio"), 0.986, 0.012)
    check.within("cox sc1 counterfactual scaled Brier never (pp)",
                 cf1("never_treated", "scaled_brier"), 4.33, 1.8)
    check.within("cox sc2 counterfactual OE always",
                 cell(report2, "counterfactual", "always_treated",
                      "oe_ratio")["mean"], 0.480, 0.010)
    check.finish()


SWEEP_SCENARIOS = ("4a", "4b", "5a", "5b", "6a", "6b", "6c", "6d")


def test_criterion_5_violation_sweep_bias_ordering():
    check = Check(5)
    results = {}
    for family in ("additive", "cox"):
        wins = total = 0
        for scenario in SWEEP_SCENARIOS:
            report = scenario_run(scenario, family)
            for strategy in ("never_treated", "always_treated"):
                for metric in ("oe_ratio", "cindex", "auc", "scaled_brier"):
                    b_cf = cell(report, "counterfactual", strategy,
                                metric)["bias"]
                    b_sub = cell(report, "subset", strategy, metric)["bias"]
                    if not (np.isfinite(b_cf) and np.isfinite(b_sub)):
                        continue
                    total += 1
                    # several always-treated cells tie by construction
                    # (constant-weight views); equal bias is not worse
                    wins += abs(b_cf) <= abs(b_sub) + 1e-10
        results[family] = (wins, total)
    wins = sum(w for w, _ in results.values())
    total = sum(t for _, t in results.values())
    frac = wins / total
    detail = ", ".join(
        f"{fam}: {w}/{t} ({w / t:.1%})" for fam, (w, t) in results.items()
    )
    check.holds(
        "counterfactual bias smaller than subset bias in >= 80% of cells",
        frac >= 0.80, f"{wins}/{total} ({frac:.1%}) [{detail}]",
    )
    check.finish()


def test_criterion_6_marginal_sanity():
    check = Check(6)
    add = marginal_summary("additive", n=400_000, seed=SEED)
    cox = marginal_summary("cox", n=400_000, seed=SEED)
    check.within("additive perfect never risk by 5",
                 add["perfect_never_event_proportion"], 0.70, 0.01)
    check.within("additive perfect always risk by 5",
                 add["perfect_always_event_proportion"], 0.62, 0.01)
    check.within("additive observational risk by 5",
                 add["observational_event_proportion"], 0.66, 0.01)
    check.within("additive ever-treated", add["ever_treated_proportion"],
                 0.53, 0.01)
    check.within("cox perfect never risk by 5",
                 cox["perfect_never_event_proportion"], 0.59, 0.01)
    check.within("cox perfect always risk by 5",
                 cox["perfect_always_event_proportion"], 0.24, 0.01)
    check.within("cox observational risk by 5",
                 cox["observational_event_proportion"], 0.40, 0.01)
    check.within("cox ever-treated", cox["ever_treated_proportion"],
                 0.68, 0.01)
    check.finish()


def _km_oracle(time, event):
    t_out, s_out = [], []
    s = 1.0
    for t in sorted(set(time[event == 1])):
        s *= 1.0 - np.sum((time == t) & (event == 1)) / np.sum(time >= t)
        t_out.append(t)
        s_out.append(s)
    return np.array(t_out), np.array(s_out)


def _pair_oracles(time, event, preds, tau, combined):
    cnum = cden = 0.0
    anum = aden = 0.0
    n = len(time)
    for i in range(n):
        ti = np.array(time[i])
        if event[i] == 1 and time[i] <= tau:
            fi = combined.at_left(ti, np.array([i]))[0]
            fa = combined.at(ti, np.array([i]))[0]
            for j in range(n):
                if time[j] > time[i]:
                    w = fi * combined.at(ti, np.array([j]))[0]
                    cden += w
                    cnum += w * (preds[i] > preds[j])
            for j in range(n):
                if time[j] > tau or (time[j] == tau and event[j] == 0):
                    w = fa * combined.survivor_at(float(tau), np.array([j]))[0]
                    aden += w
                    anum += w * (preds[i] > preds[j])
    cindex = cnum / cden if cden > 0 else np.nan
    auc = anum / aden if aden > 0 else np.nan
    return cindex, auc


def _brier_oracle(time, event, preds, tau, combined, n_total):
    total = 0.0
    null_total = 0.0
    null_num = 0.0
    null_den = 0.0
    for i in range(len(time)):
        if event[i] == 1 and time[i] <= tau:
            wi = combined.at(np.array(time[i]), np.array([i]))[0]
            null_num += wi
            null_den += wi
        elif time[i] > tau or (time[i] == tau and event[i] == 0):
            null_den += combined.survivor_at(float(tau), np.array([i]))[0]
    null_risk = null_num / null_den
    for i in range(len(time)):
        if event[i] == 1 and time[i] <= tau:
            w = combined.at(np.array(time[i]), np.array([i]))[0]
            total += (1.0 - preds[i]) ** 2 * w
            null_total += (1.0 - null_risk) ** 2 * w
        elif time[i] > tau or (time[i] == tau and event[i] == 0):
            w = combined.survivor_at(float(tau), np.array([i]))[0]
            total += preds[i] ** 2 * w
            null_total += null_risk ** 2 * w
    return total / n_total, null_total / n_total


def test_criterion_7_property_suites():
    check = Check(7)
    rng = np.random.default_rng(SEED)

    # (a) unit-weight reductions against independent oracles, 1000 datasets
    all_equal = True
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        time = np.round(rng.uniform(0.1, 6.0, n), 1)
        event = (rng.random(n) < 0.7).astype(int)
        preds = np.round(rng.random(n), 2)
        tau = 4.0
        curve = weighted_kaplan_meier(time, event)
        t_or, s_or = _km_oracle(time, event)
        if not (np.array_equal(curve.times, t_or)
                and np.array_equal(curve.survival, s_or)):
            all_equal = False
            break
        combined = combine_weights(
            unit_weights(n, 6), CensoringSurvival(StepFunction.constant(1.0))
        )
        c_or, a_or = _pair_oracles(time, event, preds, tau, combined)
        c = concordance_index(time, event, preds, tau).value
        a = cumulative_dynamic_auc(time, event, preds, tau).value
        b = brier_score(time, event, preds, tau)
        b_or, b0_or = _brier_oracle(time, event, preds, tau, combined, n)
        for got, want in ((c, c_or), (a, a_or)):
            if not (np.isnan(got) and np.isnan(want)) and got != want:
                all_equal = False
        if abs(b.brier - b_or) > 1e-14 or abs(b.brier_null - b0_or) > 1e-14:
            all_equal = False
        if not all_equal:
            break
    check.holds("(a) unit-weight reductions match oracles on 1000 datasets",
                all_equal)

    # (b) brute-force pair enumeration with arbitrary weights up to n=200
    exact = True
    for n in (10, 60, 200):
        time = rng.uniform(0.1, 6.0, n)
        event = (rng.random(n) < 0.7).astype(int)
        preds = rng.random(n)
        vals = np.cumprod(rng.uniform(1.0, 1.5, size=(n, 6)), axis=1)
        traj = unit_weights(n, 6)
        object.__setattr__(traj, "interval_values", vals)
        censoring = CensoringSurvival(
            StepFunction([2.0, 4.0], [0.9, 0.7])
        )
        combined = combine_weights(traj, censoring)
        c_or, a_or = _pair_oracles(time, event, preds, 4.5, combined)
        c = concordance_index(time, event, preds, 4.5, combined=combined).value
        a = cumulative_dynamic_auc(time, event, preds, 4.5,
                                   combined=combined).value
        exact &= abs(c - c_or) < 1e-12 and abs(a - a_or) < 1e-12
    check.holds("(b) weighted pair metrics match brute-force enumeration",
                exact)

    # (c) monotone-transform invariance of discrimination metrics
    invariant = True
    for _ in range(20):
        n = 40
        time = rng.uniform(0.1, 6.0, n)
        event = (rng.random(n) < 0.7).astype(int)
        preds = rng.random(n)
        c0 = concordance_index(time, event, preds, 4.0).value
        a0 = cumulative_dynamic_auc(time, event, preds, 4.0).value
        for f in (np.exp, lambda p: p ** 3, lambda p: np.log(p + 1.0)):
            c1 = concordance_index(time, event, f(preds), 4.0).value
            a1 = cumulative_dynamic_auc(time, event, f(preds), 4.0).value
            invariant &= (np.isnan(c0) and np.isnan(c1)) or c0 == c1
            invariant &= (np.isnan(a0) and np.isnan(a1)) or a0 == a1
    check.holds("(c) discrimination invariant to monotone transforms",
                invariant)

    # (d) byte-identical scenario runs from one seed
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        args = ["simulate", "--scenario", "1", "--family", "additive",
                "--n", "300", "--reps", "2", "--seed", "123"]
        assert cli_main(args + ["--out", os.path.join(tmp, "a")]) == 0
        assert cli_main(args + ["--out", os.path.join(tmp, "b")]) == 0
        same = all(
            open(os.path.join(tmp, "a", f), "rb").read()
            == open(os.path.join(tmp, "b", f), "rb").read()
            for f in ("report.json", "replications.csv")
        )
    check.holds("(d) scenario runs byte-identical for one seed", same)

    # (e) IPACW at least one and nondecreasing on every simulated subject
    from counterval.weights import compute_ipacw

    monotone = True
    for family in ("additive", "cox"):
        params = dgm_params(family, "1", "validation")
        cohort = generate_observational(
            params, N, np.random.SeedSequence(SEED, spawn_key=(777,))
        )
        terms, link = weight_model_spec("1")
        models = fit_treatment_models(cohort.data, terms, link=link)
        for strategy in (never_treated(5), always_treated(5)):
            view = apply_artificial_censoring(cohort.data, strategy)
            vals = compute_ipacw(view, models).interval_values
            monotone &= bool(np.all(vals >= 1.0 - 1e-12))
            monotone &= bool(np.all(np.diff(vals, axis=1) >= -1e-12))
    check.holds("(e) IPACW >= 1 and nondecreasing for every subject", monotone)

    # (f) score equations satisfied by every fitted weight model
    max_scores = []
    for family in ("additive", "cox"):
        for scenario in ("1", "5b", "6a", "6b"):
            params = dgm_params(family, scenario, "validation")
            cohort = generate_observational(
                params, N, np.random.SeedSequence(SEED, spawn_key=(778,))
            )
            terms, link = weight_model_spec(scenario)
            models = fit_treatment_models(cohort.data, terms, link=link)
            max_scores.append(models.initiation.max_score_)
    check.holds(
        "(f) weight-model score residuals below 1e-6",
        max(max_scores) < 1e-6, f"max residual {max(max_scores):.2e}",
    )
    check.finish()


def test_criterion_8_pipeline_equivalence(tmp_path):
    check = Check(8)
    from counterval.develop import MsmIptw
    from counterval.data import save_longitudinal_csv
    from counterval.metrics import counterfactual_panel, subset_panel
    from counterval.weights import (
        compute_ipacw,
        estimate_standard_censoring,
    )
    from counterval.glm import TermSpec

    params = dgm_params("additive", "1", "validation")
    dev = generate_observational(
        params, 1500, np.random.SeedSequence(SEED, spawn_key=(900,))
    )
    val = generate_observational(
        params, 1500, np.random.SeedSequence(SEED, spawn_key=(901,))
    )
    model = MsmIptw(family="additive").fit(
        dev.data, x_matrix=dev.covariate_paths[:, :1]
    )
    taus = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    strategies = (never_treated(5), always_treated(5))
    preds = {
        s.name: model.predict_risk(val.covariate_paths[:, :1], s, taus)
        for s in strategies
    }
    data_path = tmp_path / "data.csv"
    save_longitudinal_csv(val.data, data_path)
    rows = []
    for s in strategies:
        for j, tau in enumerate(taus):
            for i, sid in enumerate(val.data.ids):
                rows.append({"id": sid, "strategy": s.name, "tau": tau,
                             "risk": preds[s.name][i, j]})
    preds_path = tmp_path / "preds.csv"
    pd.DataFrame(rows).to_csv(preds_path, index=False,
                              float_format=lambda v: repr(float(v)))
    out = tmp_path / "out"
    code = cli_main([
        "validate", "--data", str(data_path), "--covariates", "L1",
        "--predictions", str(preds_path), "--strategy", "never",
        "--strategy", "always", "--tau", "5", "--taus", "1,2,3,4,5",
        "--weight-terms", "L1", "--out", str(out),
    ])
    check.holds("validate command succeeded", code == 0)
    report = json.loads((out / "report.json").read_text())

    models = fit_treatment_models(val.data, (TermSpec(0),))
    censoring = estimate_standard_censoring(val.data.time, val.data.event)
    worst = 0.0
    for strategy in strategies:
        view = apply_artificial_censoring(val.data, strategy)
        ipacw = compute_ipacw(view, models)
        cf = counterfactual_panel(view, ipacw, censoring, preds[strategy.name],
                                  taus, 5.0)
        sub = subset_panel(val.data, strategy, preds[strategy.name], taus, 5.0)
        for label, panel in (("counterfactual", cf), ("subset", sub)):
            got = report["panels"][f"{label}|{strategy.name}"]
            for key in ("oe_ratio", "cindex", "auc", "brier", "scaled_brier"):
                worst = max(worst, abs(got[key] - getattr(panel, key)))
    check.holds("CLI metrics equal in-process metrics to 1e-12",
                worst <= 1e-12, f"max |difference| {worst:.2e}")
    check.finish()
