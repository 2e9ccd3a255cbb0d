"""Command-line pipeline: ingest -> fit -> validate / plot, plus simulate.

Each command writes a self-contained run directory with a manifest recording
config hash, seed, and digests of every input and output, so a run can be
reproduced and exchanged. Exit codes: 2 validation/configuration failure,
3 numerical failure, 4 insufficient data, 5 missing inputs.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import correlation as corr
from .data_model import CleanDataset, build_model_inputs, load_survey_data
from .errors import (
    ConfigError,
    InsufficientDataError,
    NonConvergenceWarning,
    NumericalError,
    RangeError,
    SchemaError,
    SupplyShareError,
    UnknownCountryError,
    WindowError,
)
from .model_core import (
    FixedGlobal,
    InformativePriors,
    Level,
    ModelSpec,
    Scope,
    ZeroCovariance,
)
from .plotting import DEFAULT_COLORS, save_population_figures
from .posterior_summary import export_estimates, load_estimates, summarize
from .runio import read_manifest, save_draws, write_diagnostics_csv, write_manifest
from .sampler import SamplerConfig, run_chains
from .simulate import SimScenario, simulate_dataset, write_geography_csv, write_truth_csv
from .validation import (
    compare_models,
    holdout_split,
    median_agreement,
    metrics,
    predictive_errors,
    write_comparison_csv,
)

SEED_ENV = "SUPPLYSHARE_SEED"


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    return int(raw) if raw else 0


def _load_kv_config(path) -> dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line is not KEY = VALUE: {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = raw
    return values


# ---------------------------------------------------------------------------
# ingest


def cmd_ingest(args) -> int:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_survey_data(
        args.input,
        national=args.national,
        local=args.local,
        mycountry=args.country,
        fp2030=args.fp2030,
        geography=args.geography,
    )
    dataset_path = out / "dataset.csv"
    dataset.to_csv(dataset_path)
    geo_path = out / "geography.csv"
    write_geography_csv(geo_path, dataset.geography)
    settings_path = out / "settings.json"
    with open(settings_path, "w", encoding="utf-8") as fh:
        json.dump(asdict(dataset.settings), fh, indent=2, sort_keys=True)
        fh.write("\n")
    report_path = out / "ingest_report.txt"
    report_path.write_text("\n".join(dataset.report.lines()) + "\n", encoding="utf-8")

    for line in dataset.report.lines():
        print(line)
    print(f"populations: {len(dataset.populations())}")
    write_manifest(
        out,
        command="ingest",
        seed=0,
        config={
            "national": args.national,
            "local": args.local,
            "mycountry": args.country,
            "fp2030": args.fp2030,
            "input": str(args.input),
        },
        inputs={},
        outputs=[dataset_path, geo_path, settings_path, report_path],
    )
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# fit


def _load_ingested(data_dir: Path) -> CleanDataset:
    settings_path = data_dir / "settings.json"
    dataset_path = data_dir / "dataset.csv"
    geo_path = data_dir / "geography.csv"
    for p in (settings_path, dataset_path, geo_path):
        if not p.exists():
            raise ConfigError(f"{data_dir} is not an ingest directory (missing {p.name})")
    with open(settings_path, encoding="utf-8") as fh:
        settings = json.load(fh)
    return load_survey_data(
        dataset_path,
        national=settings["national"],
        local=settings["local"],
        mycountry=settings["mycountry"],
        fp2030=settings["fp2030"],
        geography=geo_path,
    )


def _build_spec(args, inputs, level: Level) -> tuple[ModelSpec, dict]:
    """Resolve scope, correlation mode, and priors into a ModelSpec."""
    scope = Scope.SINGLE_COUNTRY if args.scope == "single" else Scope.MULTI_COUNTRY
    extras = {}
    if scope is Scope.SINGLE_COUNTRY:
        if args.priors is None:
            raise ConfigError("single-country fits need --priors PATH")
        priors = InformativePriors.from_csv(args.priors, inputs.methods)
        if args.correlations in ("zero", "fit"):
            raise ConfigError(
                "single-country fits need --correlations PATH with fixed covariances"
            )
        mode = corr.load_correlations(args.correlations, inputs.methods)
        if not isinstance(mode, FixedGlobal):
            raise ConfigError("single-country fits need sigma_sector*.csv covariances")
    else:
        priors = None
        if args.correlations == "zero":
            mode = ZeroCovariance()
        elif args.correlations == "fit":
            mode = ZeroCovariance()  # stage one; stage two swaps in the estimate
            extras["two_stage"] = True
        else:
            mode = corr.load_correlations(args.correlations, inputs.methods)
    spec = ModelSpec(
        level=level,
        scope=scope,
        start_year=args.start,
        end_year=args.end,
        nsegments=args.segments,
        methods=inputs.methods,
        correlation=mode,
        priors=priors,
    )
    return spec, extras


def cmd_fit(args) -> int:
    data_dir = Path(args.data)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _load_ingested(data_dir)
    inputs = build_model_inputs(dataset, args.start, args.end, args.segments)
    level = Level.NATIONAL if dataset.settings.national else Level.SUBNATIONAL
    if args.level != "auto" and Level(args.level) is not level:
        raise ConfigError(
            f"--level {args.level} does not match the ingested data ({level.value})"
        )
    spec, extras = _build_spec(args, inputs, level)
    config = SamplerConfig(
        n_iter=args.iter,
        n_burnin=args.burnin,
        n_thin=args.thin,
        n_chains=args.chains,
        seed=args.seed,
    )
    monitor = tuple(args.monitor.split(",")) if args.monitor else None

    outputs = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NonConvergenceWarning)
        if extras.get("two_stage"):
            print("stage one: zero-covariance fit for cross-method correlations")
            medians, _ = corr.fit_zero_covariance(
                spec, inputs, config, monitor=("delta.k", "alpha_cms")
            )
            pooling = "by_country" if level is Level.NATIONAL else "by_province"
            mode = corr.cross_method_from_medians(medians, pooling=pooling)
            corr_dir = out / "correlations"
            outputs.extend(corr.export_correlations(corr_dir, mode, inputs.methods))
            spec = ModelSpec(
                level=spec.level,
                scope=spec.scope,
                start_year=spec.start_year,
                end_year=spec.end_year,
                nsegments=spec.nsegments,
                methods=spec.methods,
                correlation=mode,
            )
            print("stage two: cross-method fit")
        output = run_chains(spec, inputs, config, monitor=monitor)

    summary = summarize(output)
    estimates_path = out / "estimates.csv"
    export_estimates(summary, estimates_path)
    outputs.append(estimates_path)
    outputs.extend(save_draws(out, output))

    diag_path = out / "diagnostics.csv"
    write_diagnostics_csv(output.diagnostics_table, diag_path)
    outputs.append(diag_path)

    for name in ("dataset.csv", "geography.csv", "settings.json"):
        target = out / name
        shutil.copyfile(data_dir / name, target)
        outputs.append(target)

    config_record = {
        "start": args.start,
        "end": args.end,
        "segments": args.segments,
        "scope": args.scope,
        "correlations": args.correlations,
        "priors": str(args.priors) if args.priors else None,
        "sampler": asdict(config),
        "monitor": list(monitor) if monitor else None,
    }
    write_manifest(
        out,
        command="fit",
        seed=args.seed,
        config=config_record,
        inputs={
            "dataset": data_dir / "dataset.csv",
            "geography": data_dir / "geography.csv",
        },
        outputs=outputs,
    )

    nonconv = [w for w in caught if issubclass(w.category, NonConvergenceWarning)]
    if nonconv:
        print(f"warning: {nonconv[0].message}")
        worst = sorted(
            output.diagnostics_table, key=lambda r: -(r.rhat if np.isfinite(r.rhat) else 0)
        )[:10]
        print(f"{'parameter':<28}{'rhat':>8}{'ess':>10}")
        for row in worst:
            print(f"{row.parameter:<28}{row.rhat:>8.3f}{row.ess:>10.0f}")
    kept = output.n_draws_total
    print(f"retained draws: {kept} ({config.n_chains} chains x {config.n_keep})")
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# validate


def _refit_args(manifest: dict) -> argparse.Namespace:
    cfg = manifest["config"]
    sampler = cfg["sampler"]
    return argparse.Namespace(
        start=cfg["start"],
        end=cfg["end"],
        segments=cfg["segments"],
        level="auto",
        scope=cfg["scope"],
        correlations=cfg["correlations"],
        priors=cfg["priors"],
        iter=sampler["n_iter"],
        burnin=sampler["n_burnin"],
        thin=sampler["n_thin"],
        chains=sampler["n_chains"],
        seed=sampler["seed"],
    )


def _validate_one(run_dir: Path, rule: str, fraction: float, seed: int):
    manifest = read_manifest(run_dir)
    if manifest["command"] != "fit":
        raise ConfigError(f"{run_dir} is not a fit run directory")
    dataset = _load_ingested(run_dir)
    train, test = holdout_split(dataset, rule, fraction=fraction, seed=seed)
    args = _refit_args(manifest)
    inputs = build_model_inputs(train, args.start, args.end, args.segments)
    level = Level.NATIONAL if dataset.settings.national else Level.SUBNATIONAL
    spec, extras = _build_spec(args, inputs, level)
    config = SamplerConfig(
        n_iter=args.iter,
        n_burnin=args.burnin,
        n_thin=args.thin,
        n_chains=args.chains,
        seed=args.seed,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        if extras.get("two_stage"):
            medians, _ = corr.fit_zero_covariance(
                spec, inputs, config, monitor=("delta.k", "alpha_cms")
            )
            pooling = "by_country" if level is Level.NATIONAL else "by_province"
            mode = corr.cross_method_from_medians(medians, pooling=pooling)
            spec = ModelSpec(
                level=spec.level,
                scope=spec.scope,
                start_year=spec.start_year,
                end_year=spec.end_year,
                nsegments=spec.nsegments,
                methods=spec.methods,
                correlation=mode,
            )
        output = run_chains(spec, inputs, config, monitor=("alpha_cms",))
    checks = predictive_errors(output, test, seed=seed)
    return metrics(checks)


def cmd_validate(args) -> int:
    reports = []
    for run in args.run:
        run_dir = Path(run)
        report = _validate_one(run_dir, args.rule, args.fraction, args.seed)
        report.to_csv(run_dir / "validation_report.csv")
        (run_dir / "validation_report.txt").write_text(
            report.to_text() + "\n", encoding="utf-8"
        )
        print(f"== {run_dir}")
        print(report.to_text())
        reports.append(report)
    if len(reports) == 2:
        rows = compare_models(reports[0], reports[1])
        comparison_path = Path(args.run[0]) / "comparison.csv"
        write_comparison_csv(rows, comparison_path)
        print(f"wrote {comparison_path}")
    return 0


# ---------------------------------------------------------------------------
# plot


def cmd_plot(args) -> int:
    run_dir = Path(args.run)
    estimates_path = run_dir / "estimates.csv"
    dataset_path = run_dir / "dataset.csv"
    if not estimates_path.exists() or not dataset_path.exists():
        print(f"missing estimates.csv or dataset.csv in {run_dir}", file=sys.stderr)
        return 5
    try:
        summary = load_estimates(estimates_path)
    except ConfigError as err:
        if "no estimates" in str(err):
            print("estimates file is empty; nothing to plot")
            return 0
        raise
    dataset = _load_ingested(run_dir)
    colors = DEFAULT_COLORS
    if args.colors:
        parts = tuple(tok.strip() for tok in args.colors.split(","))
        if len(parts) != 3:
            raise ConfigError("--colors needs three comma-separated values")
        colors = parts
    out_dir = Path(args.output) if args.output else run_dir / "figures"
    written = save_population_figures(summary, dataset, out_dir, colors=colors)
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    scenario = (
        SimScenario.from_file(args.scenario) if args.scenario else SimScenario()
    )
    if args.seed is not None:
        from dataclasses import replace

        scenario = replace(scenario, seed=args.seed)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    dataset, _, phi = simulate_dataset(scenario)
    survey_path = out / "survey.csv"
    dataset.to_csv(survey_path)
    geo_path = out / "geography.csv"
    write_geography_csv(geo_path, dataset.geography)
    truth_path = out / "truth.csv"
    labels = dataset.populations()
    write_truth_csv(truth_path, scenario, phi, labels)
    scenario_path = out / "scenario.cfg"
    scenario.to_file(scenario_path)
    write_manifest(
        out,
        command="simulate",
        seed=scenario.seed,
        config={"scenario": str(args.scenario) if args.scenario else None,
                "seed": scenario.seed},
        inputs={},
        outputs=[survey_path, geo_path, truth_path, scenario_path],
    )
    print(f"wrote {out} ({len(dataset.observations)} rows)")
    return 0


# ---------------------------------------------------------------------------
# agreement (single- versus multi-population medians)


def cmd_agreement(args) -> int:
    single = load_estimates(Path(args.single) / "estimates.csv")
    multi = load_estimates(Path(args.multi) / "estimates.csv")
    if set(single.populations) <= set(multi.populations):
        multi = multi.restrict(single.populations)
    table = median_agreement(single, multi, band=args.band)
    for name, frac in table.items():
        print(f"{name}: {100 * frac:.1f}% of cells within ±{args.band}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="supplyshare",
        description="Estimate and project three-sector supply shares from survey data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and canonicalize survey data")
    p.add_argument("--input", default=None, help="CSV path or builtin tag")
    level = p.add_mutually_exclusive_group()
    level.add_argument("--national", dest="national", action="store_true", default=True)
    level.add_argument("--subnational", dest="national", action="store_false")
    p.add_argument("--local", action="store_true", help="single-country ingestion")
    p.add_argument("--country", default=None, help="country kept when --local is set")
    fp = p.add_mutually_exclusive_group()
    fp.add_argument("--fp2030", dest="fp2030", action="store_true", default=True)
    fp.add_argument("--no-fp2030", dest="fp2030", action="store_false")
    p.add_argument("--geography", default=None, help="geography CSV path or tag")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="fit a model and write draws + estimates")
    p.add_argument("--config", default=None, help="KEY = VALUE defaults file")
    p.add_argument("--data", required=True, help="ingest output directory")
    p.add_argument("--start", type=float, default=1990.0)
    p.add_argument("--end", type=float, default=2025.5)
    p.add_argument("--segments", type=int, default=12)
    p.add_argument(
        "--level",
        choices=("auto", "national", "subnational"),
        default="auto",
        help="must match the ingested data; 'auto' reads it from the run settings",
    )
    p.add_argument("--scope", choices=("multi", "single"), default="multi")
    p.add_argument(
        "--correlations",
        default="zero",
        help="'zero', 'fit' (two-stage), or a directory of per-sector matrices",
    )
    p.add_argument("--priors", default=None, help="informative-prior CSV (single scope)")
    p.add_argument("--iter", type=int, default=80000)
    p.add_argument("--burnin", type=int, default=10000)
    p.add_argument("--thin", type=int, default=35)
    p.add_argument("--chains", type=int, default=2)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--monitor", default=None, help="comma-separated parameter names")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("validate", help="holdout refit and report")
    p.add_argument("--run", nargs="+", required=True, help="one or two fit directories")
    p.add_argument("--rule", choices=("leave_last_survey", "random_fraction"),
                   default="leave_last_survey")
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("plot", help="one SVG per population from a fit directory")
    p.add_argument("--run", required=True)
    p.add_argument("--output", default=None)
    p.add_argument("--colors", default=None, help="three comma-separated colors")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--scenario", default=None, help="scenario KEY = VALUE file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("agreement", help="single- vs multi-population median agreement")
    p.add_argument("--single", required=True, help="single-population fit directory")
    p.add_argument("--multi", required=True, help="multi-population fit directory")
    p.add_argument("--band", type=float, default=0.05)
    p.set_defaults(func=cmd_agreement)

    return parser


def _apply_config_file(argv: list[str], parser: argparse.ArgumentParser) -> list[str]:
    """Inject KEY = VALUE defaults from --config as leading flags."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    path = argv[idx + 1]
    values = _load_kv_config(path)
    injected = []
    for key, raw in values.items():
        injected.extend([f"--{key.replace('_', '-')}", raw])
    # config-provided flags go first so explicit flags win on re-parse
    return argv[:1] + injected + argv[1:]


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if argv and argv[0] == "fit" and "--config" in argv:
        argv = _apply_config_file(argv, parser)
    try:
        args = parser.parse_args(argv)
        if getattr(args, "seed", None) is None and hasattr(args, "seed"):
            if args.command != "simulate":
                args.seed = _default_seed()
        return args.func(args)
    except (SchemaError, RangeError, UnknownCountryError, ConfigError, WindowError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return 3
    except InsufficientDataError as err:
        print(f"insufficient data: {err}", file=sys.stderr)
        return 4
    except SupplyShareError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
