# ---------------------- cli/commands.py ----------------------
# Batch command line: split | score | select | tune | bench
from __future__ import annotations

import json
import logging
from pathlib import Path

import click

from core.engine import estimate, tune_lambda, tune_nested
from core.errors import (
    ConfigError,
    CVSelectError,
    DataError,
    LossError,
    PlanError,
    ReportError,
)
from core.models import all_subsets_specs, nested_specs
from core.selection import normalize_rule, score_table, select
from core.splitters import SCHEMES, make_plan
from simulation.experiments import EXPERIMENTS, default_config, run_experiment
from utils.config import RunConfig, model_spec_from_dict, resolve_features
from utils.logging_setup import configure_logging
from utils.report import canonical_json, dumps_report, write_pointwise_csv, write_report, write_tidy_csv

logger = logging.getLogger(__name__)

# Exit codes
EXIT_OK = 0
EXIT_COMPUTATION = 1
EXIT_USAGE = 2

USAGE_ERRORS = (DataError, PlanError, ConfigError, LossError, ReportError, FileNotFoundError)


class CVSelectGroup(click.Group):
    """Maps toolkit errors onto the stable exit codes with a one-line message."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except USAGE_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(EXIT_USAGE)
        except CVSelectError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(EXIT_COMPUTATION)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_pairs(pairs, what: str, as_list: bool = False):
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"{what} '{pair}' is not of the form key=value")
        key, value = pair.split("=", 1)
        if as_list:
            out[key] = [_parse_value(v) for v in value.split(",")]
        else:
            out[key] = _parse_value(value)
    return out


def _csv_list(text):
    return None if text is None else [t.strip() for t in text.split(",") if t.strip()]


def dataset_options(f):
    options = [
        click.option("--dataset", help="CSV path or demo:<linear|classification|growth>."),
        click.option("--response", "schema_response_column", help="Response column."),
        click.option("--feature-columns", "schema_feature_columns", help="Comma-separated feature columns."),
        click.option("--task", "schema_task", type=click.Choice(["regression", "classification"])),
        click.option("--groups-column", "schema_group_column", help="Group column (logo)."),
        click.option("--strata-column", "schema_strata_column", help="Strata column (stratified-kfold)."),
        click.option("--coord-columns", "schema_coord_columns", help="Comma-separated coordinate columns (blocked)."),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def plan_options(f):
    options = [
        click.option("--scheme", type=click.Choice(SCHEMES)),
        click.option("--k", "k", type=int, help="Number of folds."),
        click.option("--repeats", type=int, help="Repetitions for repeated-kfold."),
        click.option("--d", "d", type=int, help="Test size for leave-d-out (default: consistent d)."),
        click.option("--iterations", type=int, help="Iterations for leave-d-out."),
        click.option("--h", "h", type=float, help="Blocking distance."),
        click.option("--base", help="Scheme wrapped by blocked."),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def model_options(f):
    options = [
        click.option("--family", help="ols | logistic | elastic-net | growth."),
        click.option("--features", help="Comma-separated model features (names or indices)."),
        click.option("--hp", multiple=True, help="Hyperparameter key=value (JSON values)."),
        click.option("--kind", help="Loss or metric name."),
        click.option("--threshold", type=float, help="Classification threshold c."),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _global_flag(ctx, param, value):
    """Subcommand copies of the group options override the group's values."""
    if value is None or (param.name == "verbose" and value == 0):
        return
    obj = ctx.ensure_object(dict)
    if param.name == "config_path":
        obj["config_path"] = value
    elif param.name == "verbose":
        configure_logging(value)
    else:
        obj.setdefault("flags", {})[param.name] = value


def global_options(f):
    options = [
        click.option("--config", "config_path", type=click.Path(), expose_value=False, callback=_global_flag,
                     help="JSON run configuration."),
        click.option("--seed", type=int, expose_value=False, callback=_global_flag,
                     help="Seed for every random choice."),
        click.option("--parallel", type=int, expose_value=False, callback=_global_flag,
                     help="Worker processes for split evaluation."),
        click.option("--out", type=click.Path(), expose_value=False, callback=_global_flag,
                     help="Run directory for reports and the resolved config."),
        click.option("-v", "--verbose", count=True, expose_value=False, callback=_global_flag,
                     help="-v info, -vv debug."),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _resolve(ctx, **flags) -> RunConfig:
    obj = ctx.ensure_object(dict)
    merged = dict(obj.get("flags", {}))
    for key, value in flags.items():
        merged[key.replace("schema_", "schema.", 1) if key.startswith("schema_") else key] = value
    return RunConfig.resolve(merged, obj.get("config_path"))


def _plan_for(cfg: RunConfig, data):
    return make_plan(
        cfg.scheme, data.n, seed=cfg.seed, K=cfg.k, R=cfg.repeats, d=cfg.d, iterations=cfg.iterations,
        groups=data.groups, strata=data.strata, coords=data.coords, h=cfg.h, base=cfg.base,
    )


def _kind_for(cfg: RunConfig, data) -> str:
    """log_loss replaces the regression default on classification data."""
    if data.task == "classification" and cfg.kind == "squared_error":
        return "log_loss"
    return cfg.kind


def _cli_model(cfg: RunConfig, data, family, features, hp) -> dict:
    if family is None and cfg.models:
        return cfg.models[0]
    entry = {"family": family or ("logistic" if data.task == "classification" else "ols")}
    if features is not None:
        entry["features"] = _csv_list(features)
    if hp:
        entry["hyperparameters"] = _parse_pairs(hp, "--hp")
    return entry


def _emit(cfg: RunConfig, payload, filename: str, **kwargs):
    """Write the report into the run directory, or to stdout when no --out is given."""
    kwargs.setdefault("config", cfg.to_dict(reproducible_only=True))
    if cfg.out:
        run_dir = Path(cfg.out)
        cfg.write(run_dir)
        path = write_report(payload, run_dir / filename, **kwargs)
        click.echo(f"wrote {path}", err=True)
    else:
        click.echo(dumps_report(payload, **kwargs), nl=False)


@click.group(cls=CVSelectGroup)
@click.option("--config", "config_path", type=click.Path(), help="JSON run configuration.")
@click.option("--seed", type=int, help="Seed for every random choice (default CVSELECT_SEED, then 0).")
@click.option("--parallel", type=int, help="Worker processes for split evaluation.")
@click.option("--out", type=click.Path(), help="Run directory for reports and the resolved config.")
@click.option("-v", "--verbose", count=True, help="-v info, -vv debug.")
@click.pass_context
def cli(ctx, config_path, seed, parallel, out, verbose):
    """Cross-validation and calibrated model selection."""
    configure_logging(verbose)
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["flags"] = {"seed": seed, "parallel": parallel, "out": out}


@cli.command()
@global_options
@click.option("--n", "n", type=int, help="Number of data (when no dataset is given).")
@dataset_options
@plan_options
@click.pass_context
def split(ctx, n, dataset, scheme, k, repeats, d, iterations, h, base, **schema):
    """Emit a train/test plan as JSON."""
    cfg = _resolve(ctx, dataset=dataset, scheme=scheme, k=k, repeats=repeats, d=d, iterations=iterations,
                   h=h, base=base, **schema)
    if cfg.dataset:
        data = cfg.load_dataset()
        plan = _plan_for(cfg, data)
    else:
        if n is None:
            raise ConfigError("split needs --n or --dataset")
        plan = make_plan(cfg.scheme, n, seed=cfg.seed, K=cfg.k, R=cfg.repeats, d=cfg.d,
                         iterations=cfg.iterations, h=cfg.h, base=cfg.base)
    text = canonical_json(plan.to_dict())
    if cfg.out:
        cfg.write(cfg.out)
        path = Path(cfg.out) / "plan.json"
        path.write_text(text, encoding="utf-8")
        click.echo(f"wrote {path}", err=True)
    else:
        click.echo(text, nl=False)
    click.echo(f"{plan.scheme}: {len(plan)} splits, fingerprint {plan.fingerprint()}", err=True)


@cli.command()
@global_options
@dataset_options
@plan_options
@model_options
@click.option("--bias-correct", is_flag=True, help="Add the additive bias correction.")
@click.option("--pointwise-csv", type=click.Path(), help="Write pointwise losses as CSV.")
@click.pass_context
def score(ctx, dataset, scheme, k, repeats, d, iterations, h, base, family, features, hp, kind, threshold,
          bias_correct, pointwise_csv, **schema):
    """Cross-validated score of one model."""
    cfg = _resolve(ctx, dataset=dataset, scheme=scheme, k=k, repeats=repeats, d=d, iterations=iterations,
                   h=h, base=base, kind=kind, threshold=threshold, bias_correct=bias_correct or None, **schema)
    data = cfg.load_dataset()
    spec = model_spec_from_dict(_cli_model(cfg, data, family, features, hp), data)
    plan = _plan_for(cfg, data)
    est = estimate(spec, data, plan, _kind_for(cfg, data), cfg.bias_correct, cfg.threshold, cfg.parallel)
    _emit(cfg, est, "score.json")
    if pointwise_csv:
        write_pointwise_csv(est, pointwise_csv)
    click.echo(f"{est.model_id}: {est.kind.name} = {est.mean:.6g} (se {est.se:.3g}, {est.se_method})", err=True)


@cli.command(name="select")
@global_options
@dataset_options
@plan_options
@model_options
@click.option("--rule", type=click.Choice(["best", "ose-mod", "ose-diff", "ose-orig"]))
@click.option("--subsets", is_flag=True, help="Candidates: every subset of --features.")
@click.option("--max-size", type=int, help="Largest subset size with --subsets.")
@click.option("--nested-models", is_flag=True, help="Candidates: the first k of --features, k = 0..p.")
@click.pass_context
def select_cmd(ctx, dataset, scheme, k, repeats, d, iterations, h, base, family, features, hp, kind, threshold,
               rule, subsets, max_size, nested_models, **schema):
    """Score several models on one plan and apply a selection rule."""
    cfg = _resolve(ctx, dataset=dataset, scheme=scheme, k=k, repeats=repeats, d=d, iterations=iterations,
                   h=h, base=base, kind=kind, threshold=threshold,
                   rule=None if rule is None else normalize_rule(rule), **schema)
    data = cfg.load_dataset()
    if subsets or nested_models:
        fam = (family or ("logistic" if data.task == "classification" else "ols")).replace("-", "_")
        pool = resolve_features(_csv_list(features), data) if features else tuple(range(data.p))
        hyper = _parse_pairs(hp, "--hp")
        specs = all_subsets_specs(fam, pool, max_size, hyper) if subsets else nested_specs(fam, pool, hyper)
    else:
        specs = cfg.model_specs(data)
    if len(specs) < 2:
        raise ConfigError(f"select needs at least 2 candidate models, got {len(specs)}")
    plan = _plan_for(cfg, data)
    table = score_table(specs, data, plan, _kind_for(cfg, data), threshold=cfg.threshold, n_jobs=cfg.parallel)
    result = select(table, cfg.rule)
    _emit(cfg, result, "selection.json",
          extra={"estimates": [e.estimate.to_dict(include_pointwise=False) for e in table.entries]})
    click.echo(f"{result.rule}: best {result.best_id}, selected {result.selected_id}", err=True)
    if result.small_sample_warning:
        click.echo("warning: " + "; ".join(result.notes), err=True)


@cli.command()
@global_options
@dataset_options
@plan_options
@model_options
@click.option("--alpha", type=float, help="Elastic-net mixing (1 lasso, 0 ridge).")
@click.option("--n-lambda", type=int, help="Lambda grid size.")
@click.option("--rule", type=click.Choice(["best", "one_se"]), default="one_se", show_default=True)
@click.option("--nested", is_flag=True, help="Nested CV over --grid (and thresholds).")
@click.option("--inner-k", type=int, help="Inner folds for --nested.")
@click.option("--grid", multiple=True, help="Hyperparameter grid key=v1,v2,... for --nested.")
@click.option("--tune-threshold", is_flag=True, help="Also tune c in nested CV.")
@click.pass_context
def tune(ctx, dataset, scheme, k, repeats, d, iterations, h, base, family, features, hp, kind, threshold,
         alpha, n_lambda, rule, nested, inner_k, grid, tune_threshold, **schema):
    """Tune the elastic-net lambda, or run nested CV over a hyperparameter grid."""
    cfg = _resolve(ctx, dataset=dataset, scheme=scheme, k=k, repeats=repeats, d=d, iterations=iterations,
                   h=h, base=base, kind=kind, threshold=threshold, alpha=alpha, n_lambda=n_lambda,
                   inner_k=inner_k, grid=_parse_pairs(grid, "--grid", as_list=True) or None,
                   tune_threshold=tune_threshold or None, **schema)
    data = cfg.load_dataset()
    plan = _plan_for(cfg, data)

    if nested:
        if family is None and cfg.models:
            specs = cfg.model_specs(data)
        else:
            specs = [model_spec_from_dict(_cli_model(cfg, data, family, features, hp), data)]
        result = tune_nested(specs, cfg.grid, data, plan, cfg.inner_k, _kind_for(cfg, data), cfg.tune_threshold,
                             cfg.threshold, cfg.seed, cfg.parallel)
        _emit(cfg, result, "nested.json", plan_fingerprint=plan.fingerprint())
        for mid, est in result.estimates.items():
            click.echo(f"{mid}: outer {est.kind.name} = {est.mean:.6g} (se {est.se:.3g})", err=True)
        return

    if family is not None and family.replace("-", "_") != "elastic_net":
        raise ConfigError(f"lambda tuning needs --family elastic-net (got {family}); use --nested otherwise")
    pool = resolve_features(_csv_list(features), data) if features else None
    result = tune_lambda(data, cfg.alpha, plan, _kind_for(cfg, data), rule, cfg.n_lambda, features=pool,
                         threshold=cfg.threshold, n_jobs=cfg.parallel)
    _emit(cfg, result, "tuning.json", plan_fingerprint=plan.fingerprint())
    click.echo(f"alpha={cfg.alpha:g}: best lambda {result.best_lambda:.6g}, "
               f"one-se lambda {result.one_se_lambda:.6g}", err=True)


@cli.command()
@global_options
@click.argument("name")
@click.option("--replicates", type=int, help="Monte Carlo replicates.")
@click.option("--n", "n", type=int, help="Training size.")
@click.option("--keep-raw", is_flag=True, help="Keep per-replicate raw values.")
@click.pass_context
def bench(ctx, name, replicates, n, keep_raw):
    """Run a named Monte Carlo study; writes JSON and a tidy CSV."""
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment '{name}'; available: {', '.join(sorted(EXPERIMENTS))}")
    cfg = _resolve(ctx)
    exp_cfg = default_config(name, replicates=replicates, n=n, keep_raw=keep_raw or None, seed=cfg.seed,
                             n_jobs=cfg.parallel)
    report = run_experiment(name, exp_cfg)
    run_dir = Path(cfg.out or Path("runs") / name)
    cfg.write(run_dir)
    write_report(report, run_dir / "report.json", config={k: v for k, v in exp_cfg.to_dict().items() if k != "n_jobs"})
    write_tidy_csv(report.to_frame(), run_dir / "report.csv")
    click.echo(f"{name}: {len(report.rows)} statistics over {len(report.cells)} cells written to {run_dir}",
               err=True)


def main():
    cli(obj={})
