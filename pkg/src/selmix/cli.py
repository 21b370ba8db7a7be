"""Batch front door: config-driven selection, inference, and simulation.

The analysis config is one YAML document; the candidate-model registry
lives inside it, so every selection procedure is reconstructible from the
file alone (required for congruency re-runs and for auditability).  Result
bundles are JSON with sorted keys and no environment-dependent fields, so
rerunning with the same seed yields byte-identical files at any worker
count.

Exit codes: 0 ok, 2 config or usage error, 3 low congruency, 4 numerical
failure.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources

import click
import jsonschema
import numpy as np
import pandas as pd
import yaml

from . import __version__
from .direction import conditional, group, lm_marginal, spline_pointwise
from .engine import (
    EngineError,
    LowCongruencyError,
    ci_mixture,
    draw_congruency,
    group_pvalue,
    oracle_suite,
    selective_ci,
    selective_pvalue,
)
from .mmfit import FitError, caic, fit_model, plugin_covariance
from .modelcore import DimensionError, ModelSpec, NotPositiveDefinite, RanefBlock
from .selection import backward_pvalue, caic_select
from .simharness import (
    Arm,
    _engine_seed,
    run_am52_study,
    run_lmm_study,
    summarize_am52,
    summarize_lmm,
)
from .splines import smooth_term

WORKERS_ENV = "SELMIX_WORKERS"


class ConfigError(click.ClickException):
    """Malformed config or data that contradicts it."""

    exit_code = 2


def _guarded(fn):
    """Map library failures onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except LowCongruencyError as exc:
            click.echo(f"low congruency: {exc}", err=True)
            raise SystemExit(3)
        except (FitError, EngineError, NotPositiveDefinite, DimensionError,
                np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            raise SystemExit(4)

    return wrapper


# ---------------------------------------------------------------------------
# config parsing


@dataclass(frozen=True)
class SmoothSpec:
    column: str
    d: int = 10
    degree: int = 3
    diff_order: int = 2


@dataclass(frozen=True)
class RandomSpec:
    group: str
    slopes: tuple = ()


@dataclass(frozen=True)
class CandidateSpec:
    name: str
    fixed: tuple = ()
    smooths: tuple = ()


@dataclass(frozen=True)
class TargetSpec:
    kind: str
    term: str
    locations: tuple = ()
    perspective: str = "conditional"
    unshrunken: bool = False
    if_selected: bool = False


@dataclass(frozen=True)
class EngineSpec:
    samples: int = 1000
    seed: int = 0
    alpha: float = 0.05
    kappa: str = "classical"
    plugin: str = "ModelEstimate"
    ci: bool = True


@dataclass(frozen=True)
class AnalysisConfig:
    data: str
    response: str
    fixed: tuple
    smooths: tuple
    random: tuple
    procedure: str
    procedure_alpha: float
    candidates: tuple
    expect_fixed: tuple | None
    expect_winner: str | None
    targets: tuple
    engine: EngineSpec
    output: str
    sha256: str = field(repr=False, default="")


def _require(mapping, key, where, kind=None):
    if key not in mapping:
        raise ConfigError(f"{where}: missing required key {key!r}")
    value = mapping[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(f"{where}: {key!r} must be {kind.__name__}")
    return value


def _check_keys(mapping, allowed, where):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _str_tuple(value, where):
    if value is None:
        return ()
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ConfigError(f"{where}: expected a list of column names")
    return tuple(value)


def load_config(path: str) -> AnalysisConfig:
    """Parse and validate the YAML analysis config."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}")
    try:
        cfg = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config does not parse as YAML: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a YAML mapping")
    _check_keys(cfg, ("data", "response", "fixed", "smooths", "random",
                      "procedure", "targets", "engine", "output"), "config")

    data = _require(cfg, "data", "config", str)
    if not os.path.isabs(data):
        data = os.path.join(os.path.dirname(os.path.abspath(path)), data)
    response = _require(cfg, "response", "config", str)

    smooths = []
    for i, entry in enumerate(cfg.get("smooths") or []):
        where = f"smooths[{i}]"
        _check_keys(entry, ("column", "d", "degree", "diff_order"), where)
        spec = SmoothSpec(
            column=_require(entry, "column", where, str),
            d=int(entry.get("d", 10)), degree=int(entry.get("degree", 3)),
            diff_order=int(entry.get("diff_order", 2)))
        if spec.d < spec.degree + 2 or spec.diff_order < 1:
            raise ConfigError(f"{where}: invalid basis sizes")
        smooths.append(spec)
    smooth_names = tuple(s.column for s in smooths)
    if len(set(smooth_names)) != len(smooth_names):
        raise ConfigError("smooths: duplicate columns")

    random = []
    for i, entry in enumerate(cfg.get("random") or []):
        where = f"random[{i}]"
        _check_keys(entry, ("group", "slopes"), where)
        random.append(RandomSpec(
            group=_require(entry, "group", where, str),
            slopes=_str_tuple(entry.get("slopes"), where)))

    proc = _require(cfg, "procedure", "config", dict)
    _check_keys(proc, ("kind", "alpha", "candidates", "expect"), "procedure")
    kind = _require(proc, "kind", "procedure", str)
    if kind not in ("backward", "caic"):
        raise ConfigError("procedure.kind must be 'backward' or 'caic'")
    proc_alpha = float(proc.get("alpha", 0.05))
    if not 0 < proc_alpha < 1:
        raise ConfigError("procedure.alpha must be in (0, 1)")

    candidates = []
    for i, entry in enumerate(proc.get("candidates") or []):
        where = f"procedure.candidates[{i}]"
        _check_keys(entry, ("name", "fixed", "smooths"), where)
        cand = CandidateSpec(
            name=_require(entry, "name", where, str),
            fixed=_str_tuple(entry.get("fixed"), where),
            smooths=_str_tuple(entry.get("smooths"), where))
        for s in cand.smooths:
            if s not in smooth_names:
                raise ConfigError(f"{where}: smooth {s!r} not declared")
        candidates.append(cand)
    names = [c.name for c in candidates]
    if len(set(names)) != len(names):
        raise ConfigError("procedure.candidates: duplicate names")
    if kind == "caic" and not candidates:
        raise ConfigError("procedure.kind 'caic' needs a candidate registry")

    expect_fixed = expect_winner = None
    if "expect" in proc:
        _check_keys(proc["expect"], ("fixed", "winner"), "procedure.expect")
        if "fixed" in proc["expect"]:
            expect_fixed = tuple(sorted(
                _str_tuple(proc["expect"]["fixed"], "procedure.expect")))
        if "winner" in proc["expect"]:
            expect_winner = str(proc["expect"]["winner"])

    fixed = _str_tuple(cfg.get("fixed"), "config")
    if not fixed and kind == "caic":
        # Union model for `fit`: smooth terms already carry their linear
        # part in the basis null space, so those columns stay out.
        seen: list = []
        for cand in candidates:
            seen += [t for t in cand.fixed
                     if t not in seen and t not in smooth_names]
        fixed = tuple(seen)
    if kind == "backward" and not (fixed or smooths):
        raise ConfigError("backward selection needs fixed terms")

    targets = []
    for i, entry in enumerate(cfg.get("targets") or []):
        where = f"targets[{i}]"
        _check_keys(entry, ("kind", "term", "locations", "perspective",
                            "unshrunken", "if_selected"), where)
        tkind = _require(entry, "kind", where, str)
        if tkind not in ("coefficient", "spline", "group"):
            raise ConfigError(f"{where}: unknown kind {tkind!r}")
        perspective = entry.get("perspective", "conditional")
        if perspective not in ("conditional", "marginal"):
            raise ConfigError(f"{where}: unknown perspective {perspective!r}")
        locations = entry.get("locations")
        if tkind == "spline":
            if not isinstance(locations, list) or not locations:
                raise ConfigError(f"{where}: spline targets need locations")
            locations = tuple(float(v) for v in locations)
        elif locations is not None:
            raise ConfigError(f"{where}: only spline targets take locations")
        targets.append(TargetSpec(
            kind=tkind, term=_require(entry, "term", where, str),
            locations=locations or (),
            perspective=perspective,
            unshrunken=bool(entry.get("unshrunken", False)),
            if_selected=bool(entry.get("if_selected", False))))

    eng = cfg.get("engine") or {}
    _check_keys(eng, ("samples", "seed", "alpha", "kappa", "plugin", "ci"),
                "engine")
    engine = EngineSpec(
        samples=int(eng.get("samples", 1000)), seed=int(eng.get("seed", 0)),
        alpha=float(eng.get("alpha", 0.05)),
        kappa=str(eng.get("kappa", "classical")),
        plugin=str(eng.get("plugin", "ModelEstimate")),
        ci=bool(eng.get("ci", True)))
    if engine.samples < 1:
        raise ConfigError("engine.samples must be positive")
    if not 0 < engine.alpha < 1:
        raise ConfigError("engine.alpha must be in (0, 1)")
    if engine.kappa not in ("classical", "bayes"):
        raise ConfigError("engine.kappa must be 'classical' or 'bayes'")
    if engine.plugin not in ("ModelEstimate", "ICM", "VarY"):
        raise ConfigError(
            "engine.plugin must be ModelEstimate, ICM, or VarY")

    return AnalysisConfig(
        data=data, response=response, fixed=fixed, smooths=tuple(smooths),
        random=tuple(random), procedure=kind, procedure_alpha=proc_alpha,
        candidates=tuple(candidates), expect_fixed=expect_fixed,
        expect_winner=expect_winner, targets=tuple(targets), engine=engine,
        output=str(cfg.get("output", "result.json")),
        sha256=hashlib.sha256(raw.encode()).hexdigest())


# ---------------------------------------------------------------------------
# data loading and model assembly


def load_frame(config: AnalysisConfig) -> pd.DataFrame:
    try:
        frame = pd.read_csv(config.data)
    except (OSError, pd.errors.ParserError) as exc:
        raise ConfigError(f"cannot load data: {exc}")
    numeric = {config.response, *config.fixed}
    numeric.update(s.column for s in config.smooths)
    for r in config.random:
        numeric.update(r.slopes)
    for cand in config.candidates:
        numeric.update(cand.fixed)
    referenced = numeric | {r.group for r in config.random}
    missing = sorted(referenced - set(frame.columns))
    if missing:
        raise ConfigError(f"data is missing columns {missing}")
    for col in sorted(numeric):
        values = pd.to_numeric(frame[col], errors="coerce")
        if values.isna().any():
            raise ConfigError(f"column {col!r} has missing or non-numeric values")
        frame[col] = values.astype(float)
    return frame


def _group_block(frame, spec: RandomSpec):
    """Level-major [indicator, indicator * slope, ...] columns for one group."""
    codes, levels = pd.factorize(frame[spec.group], sort=True)
    n, n_levels = len(frame), len(levels)
    dim = 1 + len(spec.slopes)
    z = np.zeros((n, n_levels * dim))
    rows = np.arange(n)
    z[rows, dim * codes] = 1.0
    for j, slope in enumerate(spec.slopes):
        z[rows, dim * codes + 1 + j] = frame[slope].to_numpy()
    # dim = 1 is still one variance per level, which RanefBlock encodes as
    # an unstructured 1 x 1 block repeated over levels
    block = RanefBlock(name=spec.group, kind="unstructured",
                       n_levels=n_levels, dim=dim)
    labels = tuple(f"{spec.group}.u{j}" for j in range(n_levels * dim))
    return z, block, labels


def assemble_model(frame, fixed, smooth_cols, random_specs,
                   smooth_terms) -> ModelSpec:
    """ModelSpec with intercept, linear terms, smooths, and group blocks."""
    n = len(frame)
    x_parts, labels = [np.ones((n, 1))], ["(Intercept)"]
    for term in fixed:
        x_parts.append(frame[term].to_numpy(float).reshape(n, 1))
        labels.append(term)
    z_parts, blocks, z_labels = [], [], []
    for spec in random_specs:
        z, block, zl = _group_block(frame, spec)
        z_parts.append(z)
        blocks.append(block)
        z_labels.extend(zl)
    for name in smooth_cols:
        term = smooth_terms[name]
        if term.x_cols.shape[1]:
            x_parts.append(term.x_cols)
            labels.extend([name] * term.x_cols.shape[1])
        z_parts.append(term.z_cols)
        blocks.append(RanefBlock(name=name, kind="iid", n_levels=1,
                                 dim=term.z_cols.shape[1]))
        z_labels.extend([name] * term.z_cols.shape[1])
    x = np.hstack(x_parts)
    z = np.hstack(z_parts) if z_parts else np.empty((n, 0))
    return ModelSpec(fixed_design=x, random_design=z,
                     column_labels=tuple(labels + z_labels),
                     ranef_blocks=tuple(blocks))


def build_smooth_terms(frame, config: AnalysisConfig) -> dict:
    return {
        s.column: smooth_term(s.column, frame[s.column].to_numpy(float),
                              d=s.d, degree=s.degree, diff_order=s.diff_order)
        for s in config.smooths
    }


def build_procedure(config: AnalysisConfig, frame, smooth_terms):
    """(procedure, winner name -> smooth column tuple) from the registry."""
    if config.procedure == "backward":
        smooth_cols = tuple(s.column for s in config.smooths)
        model = assemble_model(frame, config.fixed, smooth_cols,
                               config.random, smooth_terms)
        proc = backward_pvalue(
            model, alpha=config.procedure_alpha,
            protected=("(Intercept)",) + smooth_cols)
        return proc, {None: smooth_cols}
    models = tuple(
        assemble_model(frame, cand.fixed, cand.smooths, config.random,
                       smooth_terms)
        for cand in config.candidates)
    proc = caic_select(models, names=tuple(c.name for c in config.candidates))
    return proc, {c.name: c.smooths for c in config.candidates}


def _check_target_references(config: AnalysisConfig):
    """Every target must name a term some candidate can select.

    Group targets test the joint fixed-effect contribution of a term, so
    they must name a fixed term or a smooth (whose penalty null space
    contributes fixed columns); random grouping factors have no fixed
    columns to test.
    """
    smooth_names = {s.column for s in config.smooths}
    fixed_universe = {"(Intercept)", *config.fixed}
    for cand in config.candidates:
        fixed_universe.update(cand.fixed)
    for target in config.targets:
        if target.kind == "coefficient" and target.term not in fixed_universe:
            raise ConfigError(
                f"coefficient target {target.term!r} appears in no model")
        if target.kind == "spline" and target.term not in smooth_names:
            raise ConfigError(
                f"spline target {target.term!r} is not a declared smooth")
        if (target.kind == "group"
                and target.term not in fixed_universe | smooth_names):
            raise ConfigError(
                f"group target {target.term!r} names no fixed term")


# ---------------------------------------------------------------------------
# result bundles


def _load_schema() -> dict:
    text = resources.files("selmix").joinpath(
        "schemas/result.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _jsonable(value):
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    return value


def write_bundle(path: str, bundle: dict) -> str:
    """Validate against the shipped schema, then write deterministically."""
    bundle = _jsonable(bundle)
    jsonschema.validate(bundle, _load_schema())
    text = json.dumps(bundle, sort_keys=True, indent=2, allow_nan=False) + "\n"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return text


def _selection_block(outcome) -> dict:
    return {
        "fixed_set": list(outcome.fixed_set),
        "ranef_set": list(outcome.ranef_set),
        "winner": outcome.winner,
        "flag": outcome.flag,
        "fingerprint": outcome.fingerprint,
    }


def _provenance(config: AnalysisConfig, engine: EngineSpec) -> dict:
    return {
        "config_sha256": config.sha256,
        "seed": engine.seed,
        "samples": engine.samples,
        "alpha": engine.alpha,
        "plugin": engine.plugin,
        "kappa": engine.kappa,
    }


def _engine_overrides(config: AnalysisConfig, seed, samples, alpha) -> EngineSpec:
    eng = config.engine
    return EngineSpec(
        samples=eng.samples if samples is None else samples,
        seed=eng.seed if seed is None else seed,
        alpha=eng.alpha if alpha is None else alpha,
        kappa=eng.kappa, plugin=eng.plugin, ci=eng.ci)


# ---------------------------------------------------------------------------
# inference plumbing


def _check_expectation(config: AnalysisConfig, outcome):
    if config.expect_fixed is not None:
        actual = tuple(sorted(outcome.fixed_set))
        if actual != config.expect_fixed:
            raise ConfigError(
                f"selection mismatch: config declares fixed set "
                f"{list(config.expect_fixed)} but the data selects "
                f"{list(actual)}")
    if config.expect_winner is not None and outcome.winner != config.expect_winner:
        raise ConfigError(
            f"selection mismatch: config declares winner "
            f"{config.expect_winner!r} but the data selects "
            f"{outcome.winner!r}")


def _skip_record(target: TargetSpec, label: str, location=None) -> dict:
    return {
        "label": label, "kind": target.kind, "term": target.term,
        "location": location, "status": "skipped-not-selected",
    }


def _result_record(target: TargetSpec, label: str, res, location=None) -> dict:
    return {
        "label": label, "kind": target.kind, "term": target.term,
        "location": location, "status": "ok",
        "perspective": target.perspective if target.kind != "group" else None,
        "p_value": res.p_value, "t_obs": res.t_obs, "kappa": res.kappa,
        "alternative": res.alternative,
        "ci": list(res.ci) if res.ci is not None else None,
        "alpha": res.alpha,
        "n_samples": res.n_samples, "n_congruent": res.n_congruent,
        "ess": res.ess,
        "component_shares": [[lab, pct] for lab, pct in res.component_shares],
        "seed": res.seed_root, "warnings": list(res.warnings),
    }


def run_targets(config, engine, primed, outcome, selected, smooth_terms,
                winner_smooths, cov, y, workers):
    """One record per target (spline targets fan out per location)."""
    records, tables = [], []
    bayes = engine.kappa == "bayes"
    t_counter = 0
    for target in config.targets:
        if target.kind == "coefficient":
            seed = _engine_seed(engine.seed, t_counter)
            t_counter += 1
            if target.term not in outcome.fixed_set:
                if target.if_selected:
                    records.append(_skip_record(target, target.term))
                    continue
                raise ConfigError(
                    f"target {target.term!r} is not in the selected model; "
                    f"mark it if_selected to make it conditional on selection")
            if target.perspective == "conditional":
                d = conditional(selected, cov, target.term,
                                unshrunken=target.unshrunken)
            else:
                d = lm_marginal(selected, cov, target.term)
            records.append(_scalar_record(
                target, target.term, primed, d, y, engine, seed, workers,
                bayes, tables, location=None))
        elif target.kind == "spline":
            if target.term not in winner_smooths:
                t_counter += len(target.locations)
                if target.if_selected:
                    for loc in target.locations:
                        records.append(_skip_record(
                            target, f"{target.term}@{loc:g}", loc))
                    continue
                raise ConfigError(
                    f"target smooth {target.term!r} is not in the selected "
                    f"model; mark it if_selected")
            for loc in target.locations:
                seed = _engine_seed(engine.seed, t_counter)
                t_counter += 1
                d = spline_pointwise(selected, cov, smooth_terms[target.term],
                                     loc, unshrunken=target.unshrunken)
                records.append(_scalar_record(
                    target, f"{target.term}@{loc:g}", primed, d, y, engine,
                    seed, workers, bayes, tables, location=loc))
        else:
            seed = _engine_seed(engine.seed, t_counter)
            t_counter += 1
            if target.term not in outcome.fixed_set:
                if target.if_selected:
                    records.append(_skip_record(target, f"group:{target.term}"))
                    continue
                raise ConfigError(
                    f"group target {target.term!r} is not in the selected "
                    f"model; mark it if_selected")
            try:
                d = group(selected, target.term, cov)
            except KeyError as exc:
                raise ConfigError(str(exc))
            res = group_pvalue(primed, d, y, n_samples=engine.samples,
                               seed_root=seed, workers=workers)
            records.append(_result_record(target, f"group:{target.term}", res))
            tables.append((f"group:{target.term}", res))
    return records, tables


def _scalar_record(target, label, primed, d, y, engine, seed, workers,
                   bayes, tables, location=None) -> dict:
    proposal = ci_mixture(d.t_obs(y), d.kappa) if engine.ci else None
    draw = draw_congruency(primed, d, y, proposal=proposal,
                           n_samples=engine.samples, seed_root=seed,
                           workers=workers)
    if engine.ci:
        res = selective_ci(primed, d, y, alpha=engine.alpha, draw=draw,
                           bayes=bayes)
    else:
        res = selective_pvalue(primed, d, y, draw=draw, bayes=bayes)
    tables.append((label, res))
    return _result_record(target, label, res, location=location)


def _print_tables(tables):
    for label, res in tables:
        click.echo(f"\ntarget {label}")
        click.echo(res.format_table())
        if res.ci is not None:
            lo, hi = res.ci
            click.echo(f"{'ci':<9}  [{lo:.4g}, {hi:.4g}]")
        for message in res.warnings:
            click.echo(f"warning: {message}")


# ---------------------------------------------------------------------------
# commands


@click.group()
@click.version_option(version=__version__, prog_name="selmix")
def main():
    """Selective inference for mixed and additive models."""


_config_opt = click.option(
    "--config", "config_path", required=True,
    type=click.Path(exists=True, dir_okay=False), help="Analysis config YAML.")
_workers_opt = click.option(
    "--workers", type=click.IntRange(min=1), default=1, show_default=True,
    envvar=WORKERS_ENV, help=f"Process pool size (env {WORKERS_ENV}).")
_seed_opt = click.option("--seed", type=int, default=None,
                         help="Override engine.seed from the config.")
_samples_opt = click.option("--samples", type=click.IntRange(min=1),
                            default=None,
                            help="Override engine.samples from the config.")
_alpha_opt = click.option("--alpha", type=click.FloatRange(0, 1, min_open=True,
                                                           max_open=True),
                          default=None,
                          help="Override engine.alpha from the config.")
_out_opt = click.option("--out", "out_path", type=click.Path(dir_okay=False),
                        default=None, help="Result bundle path.")


@main.command()
@_config_opt
@_out_opt
@_guarded
def fit(config_path, out_path):
    """Fit the full declared model and report estimates."""
    config = load_config(config_path)
    frame = load_frame(config)
    smooth_terms = build_smooth_terms(frame, config)
    smooth_cols = tuple(s.column for s in config.smooths)
    model = assemble_model(frame, config.fixed, smooth_cols, config.random,
                           smooth_terms)
    y = frame[config.response].to_numpy(float)
    result = fit_model(model, y)
    score = caic(model, result.cov, y, fit=result)

    labels = model.column_labels[:model.p]
    estimates = {}
    for j, lab in enumerate(labels):
        key = lab if labels.count(lab) == 1 else f"{lab}[{j}]"
        estimates[key] = float(result.beta_hat[j])
    click.echo(f"n={model.n} p={model.p} q={model.q} "
               f"converged={result.converged}")
    width = max(len(k) for k in estimates)
    for key, value in estimates.items():
        click.echo(f"{key:<{width}}  {value:12.6g}")
    click.echo(f"edf={result.edf:.3f} loglik={result.loglik:.4f} "
               f"caic={score:.4f}")

    if out_path is not None:
        bundle = {
            "format_version": 1, "command": "fit",
            "package_version": __version__,
            "provenance": _provenance(config, config.engine),
            "estimates": {
                "fixed": estimates, "edf": result.edf,
                "loglik": result.loglik, "caic": score,
                "converged": bool(result.converged),
                "boundary": bool(result.boundary),
            },
        }
        write_bundle(out_path, bundle)
        click.echo(f"wrote {out_path}")


@main.command()
@_config_opt
@_out_opt
@_guarded
def select(config_path, out_path):
    """Run the declared selection procedure and report the outcome."""
    config = load_config(config_path)
    frame = load_frame(config)
    smooth_terms = build_smooth_terms(frame, config)
    proc, _ = build_procedure(config, frame, smooth_terms)
    y = frame[config.response].to_numpy(float)
    outcome, _, _ = proc.select_model(y)
    _check_expectation(config, outcome)

    click.echo(f"procedure: {proc.description}")
    click.echo(f"fixed_set: {', '.join(outcome.fixed_set) or '(none)'}")
    click.echo(f"ranef_set: {', '.join(outcome.ranef_set) or '(none)'}")
    if outcome.winner is not None:
        click.echo(f"winner: {outcome.winner}")
    click.echo(f"flag: {outcome.flag}")
    click.echo(f"fingerprint: {outcome.fingerprint}")

    if out_path is not None:
        bundle = {
            "format_version": 1, "command": "select",
            "package_version": __version__,
            "provenance": _provenance(config, config.engine),
            "selection": _selection_block(outcome),
        }
        write_bundle(out_path, bundle)
        click.echo(f"wrote {out_path}")


@main.command()
@_config_opt
@_out_opt
@_seed_opt
@_samples_opt
@_alpha_opt
@_workers_opt
@_guarded
def infer(config_path, out_path, seed, samples, alpha, workers):
    """Selection, then selective inference on the declared targets."""
    config = load_config(config_path)
    _check_target_references(config)
    engine = _engine_overrides(config, seed, samples, alpha)
    frame = load_frame(config)
    smooth_terms = build_smooth_terms(frame, config)
    proc, smooths_by_winner = build_procedure(config, frame, smooth_terms)
    y = frame[config.response].to_numpy(float)

    outcome, selected, _ = proc.select_model(y)
    _check_expectation(config, outcome)
    if outcome.flag != "ok" or selected is None:
        raise FitError(f"selection did not complete: flag={outcome.flag}")
    click.echo(f"selected fixed_set: {', '.join(outcome.fixed_set)}")
    if outcome.winner is not None:
        click.echo(f"winner: {outcome.winner}")
    click.echo(f"fingerprint: {outcome.fingerprint}")

    cov = plugin_covariance(engine.plugin, selected, y)
    primed = proc.primed(y)
    winner_smooths = {
        name: smooth_terms[name]
        for name in smooths_by_winner.get(outcome.winner, ())
    }
    records, tables = run_targets(
        config, engine, primed, outcome, selected, smooth_terms,
        winner_smooths, cov, y, workers)
    _print_tables(tables)

    bundle = {
        "format_version": 1, "command": "infer",
        "package_version": __version__,
        "provenance": _provenance(config, engine),
        "selection": _selection_block(outcome),
        "targets": records,
    }
    path = out_path or config.output
    write_bundle(path, bundle)
    click.echo(f"\nwrote {path}")


def _positive(name):
    def check(ctx, param, value):
        if value is not None and value <= 0:
            raise click.BadParameter(f"{name} must be positive")
        return value

    return check


LMM_ARM_CHOICES = {
    "truth-cond": Arm("truth-cond", plugin="Truth", perspective="conditional"),
    "truth-marg": Arm("truth-marg", plugin="Truth", perspective="marginal"),
    "me-cond": Arm("me-cond", plugin="ModelEstimate"),
    "icm-cond": Arm("icm-cond", plugin="ICM"),
    "vary-cond": Arm("vary-cond", plugin="VarY"),
    "me-g": Arm("me-g", plugin="ModelEstimate"),
    "me-0g": Arm("me-0g", plugin="ModelEstimate", unshrunken=True),
}


@main.group()
def simulate():
    """Simulation studies from the harness, written as tidy CSV."""


@simulate.command("lmm51")
@click.option("--snr", type=float, default=4.0, show_default=True,
              callback=_positive("snr"))
@click.option("--low-signal", is_flag=True, help="Weak-coefficient variant.")
@click.option("--arms", default="truth-cond,me-cond", show_default=True,
              help=f"Comma list from {sorted(LMM_ARM_CHOICES)}.")
@click.option("--signal-reps", type=click.IntRange(min=1), default=100,
              show_default=True)
@click.option("--noise-target", type=click.IntRange(min=0), default=150,
              show_default=True)
@click.option("--max-reps", type=click.IntRange(min=1), default=8000,
              show_default=True)
@click.option("--samples", type=click.IntRange(min=1), default=200,
              show_default=True)
@click.option("--seed", type=int, default=20260814, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False),
              default="lmm51_study.csv", show_default=True)
@_workers_opt
@_guarded
def simulate_lmm51(snr, low_signal, arms, signal_reps, noise_target, max_reps,
                   samples, seed, out_path, workers):
    """Grouped-design study: backward selection then per-term inference."""
    try:
        arm_objs = tuple(LMM_ARM_CHOICES[a.strip()] for a in arms.split(","))
    except KeyError as exc:
        raise click.BadParameter(f"unknown arm {exc.args[0]!r}")
    df = run_lmm_study(arm_objs, snr=snr, low_signal=low_signal,
                       n_samples=samples, seed_root=seed,
                       signal_reps=signal_reps, noise_target=noise_target,
                       max_reps=max_reps, workers=workers)
    df.to_csv(out_path, index=False)
    click.echo(f"wrote {out_path} ({len(df)} rows)")
    click.echo(json.dumps(_jsonable(summarize_lmm(df)), sort_keys=True,
                          indent=1))


@simulate.command("am52")
@click.option("--sigma2", type=float, default=1.0, show_default=True,
              callback=_positive("sigma2"))
@click.option("--replicates", type=click.IntRange(min=1), default=500,
              show_default=True)
@click.option("--samples", type=click.IntRange(min=1), default=200,
              show_default=True)
@click.option("--seed", type=int, default=20260814, show_default=True)
@click.option("--d", type=click.IntRange(min=5), default=10, show_default=True,
              help="Basis dimension per smooth.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False),
              default="am52_study.csv", show_default=True)
@_workers_opt
@_guarded
def simulate_am52(sigma2, replicates, samples, seed, d, out_path, workers):
    """Additive-design study: cAIC selection then pointwise inference."""
    df = run_am52_study(n_reps=replicates, sigma2=sigma2, n_samples=samples,
                        seed_root=seed, d=d, workers=workers)
    df.to_csv(out_path, index=False)
    click.echo(f"wrote {out_path} ({len(df)} rows)")
    click.echo(json.dumps(_jsonable(summarize_am52(df)), sort_keys=True,
                          indent=1))


@main.command("oracle-check")
@click.option("--samples", type=click.IntRange(min=1000), default=100_000,
              show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--configs-per-rule", type=click.IntRange(min=1), default=10,
              show_default=True)
@click.option("--dofs", default="2,3,5", show_default=True,
              help="Comma list of group dofs for the chi family.")
@click.option("--tol", type=float, default=0.005, show_default=True)
@_guarded
def oracle_check(samples, seed, configs_per_rule, dofs, tol):
    """Compare engine p-values with closed-form truncation oracles."""
    try:
        dof_list = tuple(int(v) for v in dofs.split(","))
    except ValueError:
        raise click.BadParameter("dofs must be a comma list of integers")
    records = oracle_suite(n_samples=samples, seed_root=seed,
                           configs_per_rule=configs_per_rule,
                           chi_dofs=dof_list)
    by_family: dict = {}
    for rec in records:
        by_family.setdefault(rec["family"], []).append(rec)
    click.echo(f"{'family':<12} {'configs':>7} {'worst |diff|':>13} "
               f"{'min congruent':>14}")
    worst = 0.0
    for family in sorted(by_family):
        group_recs = by_family[family]
        fam_worst = max(abs(r["diff"]) for r in group_recs)
        worst = max(worst, fam_worst)
        click.echo(f"{family:<12} {len(group_recs):>7} {fam_worst:>13.5f} "
                   f"{min(r['n_congruent'] for r in group_recs):>14}")
    click.echo(f"worst |engine - oracle| = {worst:.5f} (tolerance {tol})")
    if worst > tol:
        click.echo("oracle tolerance exceeded", err=True)
        raise SystemExit(4)


if __name__ == "__main__":
    main()
