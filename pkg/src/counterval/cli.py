"""Command-line entry points: run simulation scenarios, validate an external
model against a longitudinal dataset, and emit plot-ready CSVs.

All randomness flows from the seed in the run configuration; reports embed
the tool version, the resolved configuration and a content hash of the
inputs, and contain no wall-clock state, so identical invocations produce
identical bytes. Output files are written atomically (temp file + rename).
Exit codes: 0 ok, 1 run failure, 2 usage error.
"""

import argparse
import hashlib
import json
import os
import re
import sys
import tempfile
from importlib.metadata import PackageNotFoundError, version as pkg_version

import numpy as np
import pandas as pd

from .data import (
    StrategySpec,
    always_treated,
    apply_artificial_censoring,
    load_longitudinal_csv,
    never_treated,
)
from .develop import MsmIptw
from .glm import TermSpec
from .metrics import counterfactual_panel, subset_panel
from .simulate import SCENARIOS, ScenarioConfig, run_scenario
from .weights import compute_ipacw, estimate_standard_censoring, fit_treatment_models

try:
    VERSION = pkg_version("counterval")
except PackageNotFoundError:  # running from a checkout
    VERSION = "0.1.0"


def _atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path, payload):
    _atomic_write(path, json.dumps(payload, sort_keys=True, indent=1) + "\n")


def _write_csv(path, frame):
    _atomic_write(path, frame.to_csv(index=False))


def _hash_files(paths):
    digest = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as handle:
            digest.update(handle.read())
    return digest.hexdigest()


_LOG_TERM = re.compile(r"^log\(L(\d+)(@0)?\+([0-9.]+)\)$")
_SQUARE_TERM = re.compile(r"^L(\d+)(@0)?\^2$")
_IDENTITY_TERM = re.compile(r"^L(\d+)(@0)?$")


def parse_weight_terms(spec):
    """Parse a comma-separated term spec like ``L1``, ``L1^2``, ``log(L1+20)``,
    ``L1@0`` (baseline value) or ``1`` (intercept only)."""
    spec = spec.strip()
    if spec == "1":
        return ()
    terms = []
    for piece in spec.split(","):
        piece = piece.strip()
        if m := _LOG_TERM.match(piece):
            term = TermSpec(int(m.group(1)) - 1, "log_shift",
                            float(m.group(3)), baseline=bool(m.group(2)))
        elif m := _SQUARE_TERM.match(piece):
            term = TermSpec(int(m.group(1)) - 1, "square",
                            baseline=bool(m.group(2)))
        elif m := _IDENTITY_TERM.match(piece):
            term = TermSpec(int(m.group(1)) - 1, baseline=bool(m.group(2)))
        else:
            raise argparse.ArgumentTypeError(
                f"cannot parse weight term {piece!r}"
            )
        if term.covariate < 0:
            raise argparse.ArgumentTypeError("covariate indices are 1-based")
        terms.append(term)
    return tuple(terms)


def parse_strategy(text, n_visits):
    if text == "never":
        return never_treated(n_visits)
    if text == "always":
        return always_treated(n_visits)
    if re.fullmatch(r"[01]+", text):
        return StrategySpec(f"path_{text}", np.array([int(c) for c in text]))
    raise argparse.ArgumentTypeError(
        f"strategy must be 'never', 'always' or a 0/1 string, got {text!r}"
    )


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="counterval",
        description="Counterfactual validation of predictions under "
        "sustained treatment strategies for time-to-event outcomes.",
    )
    parser.add_argument("--version", action="version", version=VERSION)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a simulation scenario")
    sim.add_argument("--config", help="JSON file with config keys; flags override")
    sim.add_argument("--scenario", choices=SCENARIOS)
    sim.add_argument("--family", choices=("additive", "cox"))
    sim.add_argument("--n", type=int)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--groups", type=int, dest="n_groups")
    sim.add_argument("--tau", type=float, dest="primary_tau")
    sim.add_argument("--g-form", dest="g_form",
                     choices=("current", "current_duration", "current_geometric"))
    sim.add_argument("--true-weights", action="store_true", default=None)
    sim.add_argument("--truncate-weights", type=float, default=None)
    sim.add_argument("--per-visit-models", action="store_true", default=None)
    sim.add_argument("--calibration-weights",
                     choices=("time-updated", "fixed"), default=None)
    sim.add_argument("--jobs", type=int, default=None, dest="n_jobs")
    sim.add_argument("--dump-data", action="store_true",
                     help="also write the first replication's datasets as CSV")
    sim.add_argument("--out", required=True, help="output directory")

    val = sub.add_parser("validate", help="validate predictions on a dataset")
    val.add_argument("--data", required=True, help="long-format CSV")
    val.add_argument("--covariates", required=True,
                     help="comma-separated covariate column names")
    val.add_argument("--baseline-predictors", default="",
                     help="comma-separated baseline predictor columns")
    group = val.add_mutually_exclusive_group(required=True)
    group.add_argument("--predictions",
                       help="CSV with columns id, strategy, tau, risk")
    group.add_argument("--model", help="model JSON exported by this tool")
    val.add_argument("--strategy", required=True, action="append",
                     help="never, always, or a 0/1 visit path (repeatable)")
    val.add_argument("--tau", type=float, required=True)
    val.add_argument("--taus", default=None,
                     help="comma-separated horizon grid (default: just --tau)")
    val.add_argument("--weight-terms", default=None,
                     help="term spec, e.g. 'L1', 'L1^2,log(L1+20)', '1'")
    val.add_argument("--link", choices=("logit", "cauchit"), default="logit")
    val.add_argument("--per-visit-models", action="store_true")
    val.add_argument("--groups", type=int, default=10)
    val.add_argument("--dump-weights", action="store_true")
    val.add_argument("--out", required=True)

    plot = sub.add_parser("plotdata", help="flatten a report into plot CSVs")
    plot.add_argument("--report", required=True)
    plot.add_argument("--kind", required=True,
                      choices=("calibration", "outcome-curves", "brier"))
    plot.add_argument("--out", required=True, help="output CSV path")
    return parser


def cmd_simulate(args):
    settings = {}
    if args.config:
        with open(args.config) as handle:
            settings.update(json.load(handle))
        known = set(ScenarioConfig.__dataclass_fields__)
        bad = sorted(set(settings) - known)
        if bad:
            print(f"error: unknown config keys: {bad}", file=sys.stderr)
            return 2
    overrides = {
        "scenario": args.scenario,
        "family": args.family,
        "n": args.n,
        "replications": args.reps,
        "seed": args.seed,
        "n_groups": args.n_groups,
        "primary_tau": args.primary_tau,
        "g_form": args.g_form,
        "true_weights": args.true_weights,
        "truncate_weights": args.truncate_weights,
        "per_visit_models": args.per_visit_models,
        "calibration_weights": args.calibration_weights,
        "n_jobs": args.n_jobs,
    }
    settings.update({k: v for k, v in overrides.items() if v is not None})
    if "taus" in settings:
        settings["taus"] = tuple(float(t) for t in settings["taus"])
    try:
        config = ScenarioConfig(**settings)
    except (TypeError, ValueError) as err:
        print(f"error: bad configuration: {err}", file=sys.stderr)
        return 2

    report, frame = run_scenario(config)
    payload = report.to_dict()
    payload["version"] = VERSION
    payload["input_hash"] = hashlib.sha256(
        json.dumps(payload["config"], sort_keys=True).encode()
    ).hexdigest()
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "report.json"), payload)
    _write_csv(os.path.join(args.out, "replications.csv"), frame)
    cal_rows = []
    for key, val in report.calibration_groups.items():
        estimator, strategy = key
        for g, (mp, ob) in enumerate(
            zip(val["mean_predicted"], val["observed"]), start=1
        ):
            cal_rows.append(
                {"estimator": estimator, "strategy": strategy, "group": g,
                 "mean_predicted": mp, "observed": ob}
            )
    _write_csv(os.path.join(args.out, "calibration_groups.csv"),
               pd.DataFrame(cal_rows))
    if args.dump_data:
        from .simulate import dump_replication_data

        dump_replication_data(config, os.path.join(args.out, "data"))
    if report.status != "ok":
        print(f"run failed: {report.n_failed} replications failed "
              f"(>1% of {config.replications})", file=sys.stderr)
        return 1
    print(f"wrote {args.out}/report.json ({report.n_replications} replications, "
          f"{report.n_failed} failed)")
    return 0


def _load_predictions(path, ids, strategies, taus):
    frame = pd.read_csv(path)
    required = {"id", "strategy", "tau", "risk"}
    if not required.issubset(frame.columns):
        raise ValueError(f"predictions CSV needs columns {sorted(required)}")
    id_index = pd.Index(ids)
    out = {}
    for strategy in strategies:
        block = frame[frame["strategy"] == strategy.name]
        preds = np.full((len(ids), len(taus)), np.nan)
        for j, tau in enumerate(taus):
            rows = block[np.isclose(block["tau"].to_numpy(dtype=float), tau)]
            located = id_index.get_indexer(rows["id"])
            if (located < 0).any():
                raise ValueError("prediction rows reference unknown subject ids")
            preds[located, j] = rows["risk"].to_numpy(dtype=float)
        if np.isnan(preds).any():
            i, j = np.argwhere(np.isnan(preds))[0]
            raise ValueError(
                f"missing prediction for id {ids[i]} under "
                f"'{strategy.name}' at tau {taus[j]}"
            )
        out[strategy.name] = preds
    return out


def cmd_validate(args):
    covariates = [c for c in args.covariates.split(",") if c]
    baseline = [c for c in args.baseline_predictors.split(",") if c]
    try:
        data = load_longitudinal_csv(args.data, covariates, baseline)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    strategies = [parse_strategy(s, data.max_visits) for s in args.strategy]
    taus = (
        [float(t) for t in args.taus.split(",")] if args.taus else [args.tau]
    )
    if args.tau not in taus:
        taus.append(args.tau)
    taus = sorted(set(taus))

    if args.predictions:
        predictions = _load_predictions(args.predictions, data.ids, strategies,
                                        taus)
        input_paths = [args.data, args.predictions]
    else:
        with open(args.model) as handle:
            model = MsmIptw.from_dict(json.load(handle))
        x = np.column_stack([data.baseline_covariates(),
                             data.baseline_predictors])
        predictions = {
            s.name: model.predict_risk(x, s, np.asarray(taus))
            for s in strategies
        }
        input_paths = [args.data, args.model]

    if args.weight_terms is None:
        terms = tuple(TermSpec(j) for j in range(data.n_covariates))
    else:
        terms = parse_weight_terms(args.weight_terms)
    models = fit_treatment_models(
        data, terms, link=args.link, pooled=not args.per_visit_models
    )
    censoring = estimate_standard_censoring(data.time, data.event)

    panels = {}
    weight_dump = []
    for strategy in strategies:
        view = apply_artificial_censoring(data, strategy)
        if not np.any(view.time > 0):
            print(
                f"error: positivity failure: nobody in the data starts on "
                f"strategy '{strategy.name}'", file=sys.stderr,
            )
            return 1
        ipacw = compute_ipacw(view, models)
        panels[f"counterfactual|{strategy.name}"] = counterfactual_panel(
            view, ipacw, censoring, predictions[strategy.name],
            np.asarray(taus), args.tau, n_groups=args.groups,
        ).to_dict()
        panels[f"subset|{strategy.name}"] = subset_panel(
            data, strategy, predictions[strategy.name], np.asarray(taus),
            args.tau, n_groups=args.groups,
        ).to_dict()
        if args.dump_weights:
            for m in range(ipacw.n_intervals):
                weight_dump.extend(
                    {"strategy": strategy.name, "id": sid, "interval_start": m,
                     "weight": w}
                    for sid, w, defined in zip(
                        data.ids, ipacw.interval_values[:, m],
                        ipacw.defined_visits)
                    if m < defined
                )

    payload = {
        "version": VERSION,
        "input_hash": _hash_files(input_paths),
        "config": {
            "data": os.path.basename(args.data),
            "strategies": [s.name for s in strategies],
            "tau": args.tau,
            "taus": taus,
            "weight_terms": [t.label() for t in terms],
            "link": args.link,
            "groups": args.groups,
            "per_visit_models": bool(args.per_visit_models),
        },
        "treatment_model_coefficients": models.coefficients(),
        "panels": panels,
    }
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "report.json"), payload)
    cal_rows = []
    for key, panel in panels.items():
        estimator, strategy = key.split("|")
        for g, (mp, ob) in enumerate(
            zip(panel["group_mean_predicted"], panel["group_observed"]), start=1
        ):
            cal_rows.append(
                {"estimator": estimator, "strategy": strategy, "group": g,
                 "mean_predicted": mp, "observed": ob}
            )
    _write_csv(os.path.join(args.out, "calibration.csv"), pd.DataFrame(cal_rows))
    if args.dump_weights:
        _write_csv(os.path.join(args.out, "weights.csv"),
                   pd.DataFrame(weight_dump))
    print(f"wrote {args.out}/report.json")
    return 0


def cmd_plotdata(args):
    with open(args.report) as handle:
        report = json.load(handle)
    rows = []
    if "panels" in report:
        blocks = {
            tuple(k.split("|")): v for k, v in report["panels"].items()
        }
        if args.kind == "calibration":
            for (estimator, strategy), panel in blocks.items():
                for g, (mp, ob) in enumerate(
                    zip(panel["group_mean_predicted"],
                        panel["group_observed"]), start=1
                ):
                    rows.append({"estimator": estimator, "strategy": strategy,
                                 "group": g, "mean_predicted": mp,
                                 "observed": ob})
        elif args.kind == "outcome-curves":
            for (estimator, strategy), panel in blocks.items():
                for t, ob, pr in zip(panel["curve_taus"],
                                     panel["observed_curve"],
                                     panel["predicted_curve"]):
                    rows.append({"time": t, "estimator": estimator,
                                 "strategy": strategy, "observed": ob,
                                 "predicted": pr})
        else:
            for (estimator, strategy), panel in blocks.items():
                rows.append({"estimator": estimator, "strategy": strategy,
                             "brier": panel["brier"],
                             "brier_null": panel["brier_null"],
                             "scaled_brier": panel["scaled_brier"]})
    else:
        if args.kind == "calibration":
            for key, val in report["calibration_groups"].items():
                estimator, strategy = key.split("|")
                for g, (mp, ob) in enumerate(
                    zip(val["mean_predicted"], val["observed"]), start=1
                ):
                    rows.append({"estimator": estimator, "strategy": strategy,
                                 "group": g, "mean_predicted": mp,
                                 "observed": ob})
        elif args.kind == "outcome-curves":
            for key, val in report["curves"].items():
                estimator, strategy = key.split("|")
                for t, ob, pr in zip(val["taus"], val["observed"],
                                     val["predicted"]):
                    rows.append({"time": t, "estimator": estimator,
                                 "strategy": strategy, "observed": ob,
                                 "predicted": pr})
        else:
            for key, cell in report["cells"].items():
                estimator, strategy, metric = key.split("|")
                if metric != "scaled_brier":
                    continue
                rows.append({"estimator": estimator, "strategy": strategy,
                             "scaled_brier_mean": cell["mean"]})
    _write_csv(args.out, pd.DataFrame(rows))
    print(f"wrote {args.out}")
    return 0


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "validate":
            return cmd_validate(args)
        return cmd_plotdata(args)
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
