import numpy as np
import pytest

from counterval.data import never_treated
from counterval.glm import TermSpec
from counterval.simulate import (
    ScenarioConfig,
    aggregate_replications,
    dgm_params,
    generate_observational,
    generate_perfect,
    run_replication,
    run_scenario,
    simulate_event_time,
    weight_model_spec,
)


class TestEventTimeInversion:
    def test_boundary_draw_censors(self):
        time, event = simulate_event_time(np.full((1, 5), 0.2), [1.0], 5.0)
        assert time[0] == 5.0 and event[0] == 0

    def test_piecewise_inversion_arithmetic(self):
        h = np.array([[0.5, 0.1, 0.1, 0.1, 0.1]])
        time, event = simulate_event_time(h, [0.55], 5.0)
        assert time[0] == pytest.approx(1.5)
        assert event[0] == 1

    def test_zero_hazard_censors(self):
        time, event = simulate_event_time(np.zeros((1, 5)), [0.4], 5.0)
        assert time[0] == 5.0 and event[0] == 0

    def test_exponential_closed_form(self):
        from dataclasses import replace

        params = replace(
            dgm_params("additive", "1", "validation"),
            alpha_a=0.0, alpha_l=0.0, alpha_u=0.0, alpha0=0.2,
            additive_time_factor=False,
        )
        cohort = generate_observational(
            params, 200_000, np.random.SeedSequence(3, spawn_key=(0,))
        )
        assert np.mean(cohort.data.event) == pytest.approx(
            1.0 - np.exp(-1.0), abs=0.005
        )


class TestGeneration:
    def test_treatment_is_absorbing(self):
        for family in ("additive", "cox"):
            params = dgm_params(family, "1", "validation")
            cohort = generate_observational(
                params, 5000, np.random.SeedSequence(5, spawn_key=(0,))
            )
            diffs = np.diff(cohort.treatment_paths.astype(int), axis=1)
            assert np.all(diffs >= 0)

    def test_visits_truncated_at_followup(self):
        params = dgm_params("additive", "1", "validation")
        cohort = generate_observational(
            params, 2000, np.random.SeedSequence(7, spawn_key=(0,))
        )
        data = cohort.data
        grid = np.arange(5)
        attended = grid[None, :] < data.n_visits[:, None]
        assert np.all(np.isnan(data.covariates[~attended]))
        assert np.all(data.treatment[~attended] == -1)
        assert np.all(data.treatment[attended] >= 0)

    def test_perfect_data_inherits_baseline_and_frailty(self):
        params = dgm_params("additive", "1", "validation")
        cohort = generate_observational(
            params, 3000, np.random.SeedSequence(9, spawn_key=(0,))
        )
        perf = generate_perfect(cohort, never_treated(5), params)
        np.testing.assert_array_equal(perf.u, cohort.u)
        np.testing.assert_array_equal(
            perf.covariate_paths[:, 0], cohort.covariate_paths[:, 0]
        )

    def test_adherent_subjects_replayed_identically(self):
        params = dgm_params("additive", "1", "validation")
        cohort = generate_observational(
            params, 3000, np.random.SeedSequence(11, spawn_key=(0,))
        )
        perf = generate_perfect(cohort, never_treated(5), params)
        never_obs = cohort.treatment_paths.max(axis=1) == 0
        assert never_obs.sum() > 100
        np.testing.assert_array_equal(
            perf.data.time[never_obs], cohort.data.time[never_obs]
        )
        np.testing.assert_array_equal(
            perf.data.event[never_obs], cohort.data.event[never_obs]
        )
        np.testing.assert_allclose(
            perf.covariate_paths[never_obs], cohort.covariate_paths[never_obs]
        )

    def test_scenario_overrides(self):
        assert dgm_params("additive", "2", "development").alpha0 == 0.3
        assert dgm_params("additive", "2", "validation").alpha0 == 0.2
        assert dgm_params("additive", "4a", "validation").gamma0 == -0.25
        assert dgm_params("additive", "4a", "development").gamma0 == -2.0
        assert dgm_params("additive", "6c", "validation").gamma_l2 == 0.01
        assert dgm_params("cox", "2", "development").alpha0 == -1.0
        assert dgm_params("cox", "4a", "validation").gamma0 == 0.5
        assert dgm_params("cox", "4b", "validation").gamma0 == 0.0
        assert dgm_params("cox", "6c", "validation").gamma_l2 == 0.25

    def test_weight_model_specs(self):
        terms, link = weight_model_spec("1")
        assert terms == (TermSpec(0),) and link == "logit"
        assert weight_model_spec("5a")[0] == ()
        assert weight_model_spec("5b")[0][0].baseline
        assert weight_model_spec("6a")[0][0].transform == "log_shift"
        assert weight_model_spec("6b")[0][0].transform == "square"
        assert weight_model_spec("6d")[1] == "cauchit"


class TestScenarioRunner:
    def test_seed_determinism_of_aggregate(self):
        cfg = ScenarioConfig(scenario="1", family="additive", n=300,
                             replications=3, seed=99)
        r1, f1 = run_scenario(cfg)
        r2, f2 = run_scenario(cfg)
        assert r1.to_dict() == r2.to_dict()
        assert f1.equals(f2)

    def test_parallel_equals_serial(self):
        cfg1 = ScenarioConfig(scenario="1", family="additive", n=300,
                              replications=4, seed=7, n_jobs=1)
        cfg2 = ScenarioConfig(scenario="1", family="additive", n=300,
                              replications=4, seed=7, n_jobs=2)
        r1, f1 = run_scenario(cfg1)
        r2, f2 = run_scenario(cfg2)
        d1, d2 = r1.to_dict(), r2.to_dict()
        d1["config"].pop("n_jobs")
        d2["config"].pop("n_jobs")
        assert d1 == d2

    def test_replication_panels_complete(self):
        cfg = ScenarioConfig(scenario="1", family="additive", n=500,
                             replications=2, seed=3)
        rep = run_replication(cfg, 0)
        keys = {(e, s) for e in ("true", "subset", "counterfactual")
                for s in ("never_treated", "always_treated")}
        assert set(rep["panels"]) == keys

    def test_true_weights_close_to_fitted_weights(self):
        base = dict(scenario="1", family="additive", n=3000, replications=4,
                    seed=21)
        fitted = [run_replication(ScenarioConfig(**base), r) for r in range(4)]
        truew = [
            run_replication(ScenarioConfig(**base, true_weights=True), r)
            for r in range(4)
        ]
        a = np.mean([r["panels"][("counterfactual", "never_treated")].oe_ratio
                     for r in fitted])
        b = np.mean([r["panels"][("counterfactual", "never_treated")].oe_ratio
                     for r in truew])
        assert a == pytest.approx(b, abs=0.03)

    def test_failure_status_threshold(self):
        cfg = ScenarioConfig(scenario="1", family="additive", n=200,
                             replications=100, seed=1)
        ok = [run_replication(cfg, r) for r in range(3)]
        report = aggregate_replications(cfg, ok, failures=[(9, "x")] * 2)
        assert report.status == "failed"
        report = aggregate_replications(cfg, ok, failures=[(9, "x")])
        assert report.status == "ok"

    def test_truncation_flag_caps_weights(self):
        cfg = ScenarioConfig(scenario="4a", family="additive", n=2000,
                             replications=2, seed=13, truncate_weights=95.0)
        rep = run_replication(cfg, 0)
        assert np.isfinite(
            rep["panels"][("counterfactual", "never_treated")].oe_ratio
        )

    def test_per_visit_models_run(self):
        cfg = ScenarioConfig(scenario="1", family="additive", n=2000,
                             replications=2, seed=17, per_visit_models=True)
        rep = run_replication(cfg, 0)
        assert np.isfinite(
            rep["panels"][("counterfactual", "never_treated")].oe_ratio
        )

    def test_fixed_calibration_weights_run(self):
        cfg = ScenarioConfig(scenario="1", family="additive", n=2000,
                             replications=2, seed=19,
                             calibration_weights="fixed")
        rep = run_replication(cfg, 0)
        assert np.isfinite(
            rep["panels"][("counterfactual", "never_treated")].oe_ratio
        )

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError, match="unknown scenario"):
            ScenarioConfig(scenario="7")
        with pytest.raises(ValueError, match="unknown family"):
            ScenarioConfig(family="weibull")
        with pytest.raises(ValueError, match="tau grid"):
            ScenarioConfig(primary_tau=7.0)


class TestTrueWeightConvergence:
    def test_counterfactual_approaches_truth_as_n_grows(self):
        gaps = []
        for n, reps in ((1000, 6), (3000, 4), (9000, 3)):
            diffs = []
            for r in range(reps):
                cfg = ScenarioConfig(scenario="1", family="additive", n=n,
                                     replications=reps, seed=500 + n,
                                     true_weights=True)
                rep = run_replication(cfg, r)
                cf = rep["panels"][("counterfactual", "never_treated")]
                tr = rep["panels"][("true", "never_treated")]
                diffs.append(abs(cf.observed - tr.observed))
            gaps.append(np.mean(diffs))
        assert gaps[2] < gaps[0]
