"""Command-line pipeline with persisted, hash-checked stages.

Stages run in order ingest -> tune -> kfolds -> impute -> analyze, each
writing into one run directory.  ``manifest.json`` records the sha256 of
every stage's inputs and outputs; a stage refuses to start when a prior
stage is missing or its artifacts changed since it ran.  ``synth`` writes a
synthetic extract with a ready-to-use config, and ``evaluate`` scores
imputations against the synthetic ground truth.

Settings come from, in increasing precedence: built-in defaults, the YAML
file given by --config, WIGEM_* environment variables, command-line flags.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from . import applications, engine, ingest, metrics, simulate, synth
from .features import Encoder, MappingError, load_mapping
from .regressor import Hyperparams

logger = logging.getLogger("wigem")

MANIFEST = "manifest.json"
MANIFEST_FORMAT = 1

STAGE_DEPS = {
    "ingest": (),
    "tune": ("ingest",),
    "kfolds": ("ingest", "tune"),
    "impute": ("ingest", "kfolds"),
    "analyze": ("ingest", "impute"),
    "evaluate": ("impute",),
}

ENV_VARS = {
    "config": "WIGEM_CONFIG",
    "seed": "WIGEM_SEED",
    "n_sims": "WIGEM_SIMS",
    "soc": "WIGEM_SOC",
    "out": "WIGEM_OUT",
    "ci_method": "WIGEM_CI",
    "lenient": "WIGEM_LENIENT",
}


class UsageError(Exception):
    """Bad invocation or configuration; exit code 2."""


class StageError(Exception):
    """A stage could not run or failed; exit code 1."""


# -- configuration ---------------------------------------------------------------

@dataclass
class RunConfig:
    extract: Path | None = None
    mapping: Path | None = None
    truth: Path | None = None
    schema: dict = field(default_factory=dict)
    out: Path = Path("wigem-run")
    seed: int = 0
    n_sims: int = 10
    k: int = 10
    soc: str = "both"
    grid: list = field(default_factory=lambda: [
        {"nrounds": p.nrounds, "max_depth": p.max_depth, "eta": p.eta} for p in engine.default_grid()])
    threshold: float = engine.DEFAULT_THRESHOLD
    max_iters: int = engine.DEFAULT_MAX_ITERS
    ci_method: str = "normal"
    ci_level: float = 0.95
    ci_scale: str = "sd"
    bound_halfwidth: float = 1.0
    lenient: bool = False
    pooling: dict = field(default_factory=lambda: dict(applications.DEFAULT_POOLING))
    requirement_weights: dict = field(default_factory=dict)

    @property
    def soc_levels(self) -> tuple[int, ...]:
        return {"2": (2,), "3": (3,), "both": (2, 3)}[self.soc]

    def hyperparams(self) -> list[Hyperparams]:
        try:
            return [Hyperparams(**{**g, "seed": self.seed}) for g in self.grid]
        except (TypeError, ValueError) as err:
            raise UsageError(f"bad hyperparameter grid: {err}") from None

    def snapshot(self) -> dict:
        """Every setting except file locations, as recorded in the manifest."""
        out = {}
        for f in fields(self):
            if f.name not in _PATH_KEYS:
                v = getattr(self, f.name)
                out[f.name] = {str(k): v[k] for k in sorted(v, key=str)} if isinstance(v, dict) else v
        return out


_PATH_KEYS = ("extract", "mapping", "truth", "out")
_CI_METHODS = ("normal", "t", "percentile")


def _coerce(name: str, value):
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    try:
        if name in _PATH_KEYS:
            return None if value is None else Path(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(value)
                return low in ("1", "true", "yes")
            return bool(value)
        if kind == "str":
            return str(value)
    except (TypeError, ValueError):
        raise UsageError(f"setting {name!r}: cannot use {value!r}") from None
    return value


def _validate(cfg: RunConfig) -> RunConfig:
    if cfg.soc not in ("2", "3", "both"):
        raise UsageError(f"--soc must be 2, 3 or both, not {cfg.soc!r}")
    if cfg.ci_method not in _CI_METHODS:
        raise UsageError(f"--ci must be one of {_CI_METHODS}, not {cfg.ci_method!r}")
    if cfg.ci_scale not in ("sd", "se"):
        raise UsageError("ci_scale must be sd or se")
    if cfg.n_sims < 1:
        raise UsageError("--sims must be at least 1")
    if cfg.k < 2:
        raise UsageError("k must be at least 2")
    if not cfg.grid:
        raise UsageError("hyperparameter grid is empty")
    return cfg


def load_config(args: argparse.Namespace, environ: dict | None = None) -> RunConfig:
    """Merge defaults, config file, environment and flags (in that order)."""
    environ = os.environ if environ is None else environ
    values: dict = {}
    config_path = args.config or environ.get(ENV_VARS["config"])
    if config_path:
        path = Path(config_path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except OSError as err:
            raise UsageError(f"cannot read config {path}: {err.strerror}") from None
        except yaml.YAMLError as err:
            raise UsageError(f"config {path} is not valid YAML: {err}") from None
        if not isinstance(raw, dict):
            raise UsageError(f"config {path} must be a mapping")
        known = {f.name for f in fields(RunConfig)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        for k, v in raw.items():
            if k in _PATH_KEYS and v is not None:
                v = path.parent / v   # relative to the config file
            values[k] = v
    for name, var in ENV_VARS.items():
        if name != "config" and var in environ:
            values[name] = environ[var]
    flags = {"seed": args.seed, "n_sims": getattr(args, "sims", None), "soc": args.soc,
             "out": args.out, "ci_method": getattr(args, "ci", None),
             "lenient": True if getattr(args, "lenient", False) else None}
    values.update({k: v for k, v in flags.items() if v is not None})
    cfg = RunConfig()
    for k, v in values.items():
        setattr(cfg, k, _coerce(k, v))
    return _validate(cfg)


# -- manifest -------------------------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


class RunDir:
    def __init__(self, root: Path):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / name

    def manifest(self) -> dict:
        p = self.path(MANIFEST)
        if not p.exists():
            return {"format": MANIFEST_FORMAT, "stages": {}}
        data = json.loads(p.read_text(encoding="utf-8"))
        if data.get("format") != MANIFEST_FORMAT:
            raise StageError(f"{p} has an unsupported manifest format")
        return data

    def write_text(self, name: str, text: str) -> None:
        p = self.path(name)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(text, encoding="utf-8", newline="")
        tmp.replace(p)

    def record(self, stage: str, inputs: dict[str, str], outputs: Sequence[str], settings: dict) -> None:
        m = self.manifest()
        m["stages"][stage] = {
            "inputs": inputs,
            "outputs": {name: sha256_file(self.path(name)) for name in outputs},
            "settings": settings,
        }
        self.write_text(MANIFEST, _dump_json(m))

    def require(self, stage: str, external: dict[str, Path | None] | None = None) -> dict[str, str]:
        """Check every prior stage is present and untouched; return their output hashes.

        ``external`` maps placeholder input names such as ``<extract>`` to the
        files currently configured, so edits outside the run directory are
        caught too.
        """
        external = external or {}
        m = self.manifest()["stages"]
        hashes: dict[str, str] = {}
        seen = set()

        def check(dep: str):
            if dep in seen:
                return
            seen.add(dep)
            entry = m.get(dep)
            if entry is None:
                raise StageError(f"stage {dep!r} has not been run in {self.root}; run `wigem {dep}` first")
            for name, digest in entry["outputs"].items():
                p = self.path(name)
                if not p.exists() or sha256_file(p) != digest:
                    raise StageError(f"{name} changed since stage {dep!r} ran; re-run `wigem {dep}`")
                hashes[name] = digest
            for name, digest in entry["inputs"].items():
                p = external.get(name) if name.startswith("<") else self.path(name)
                if p is None:
                    continue
                if p.exists() and sha256_file(p) != digest:
                    raise StageError(f"stage {dep!r} is stale ({name} changed); re-run `wigem {dep}`")
            for up in STAGE_DEPS.get(dep, ()):
                check(up)

        for dep in STAGE_DEPS[stage]:
            check(dep)
        return hashes


# -- formatting helpers ----------------------------------------------------------------

def fmt(x) -> str:
    """Report numbers: 9 significant digits, empty for NaN."""
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return ""
    return format(x, ".9g")


def fmt_exact(x) -> str:
    x = float(x)
    return "" if math.isnan(x) else format(x, ".17g")


def _csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _json_float(x: float):
    x = float(x)
    return None if math.isnan(x) else float(format(x, ".9g"))


# -- stage helpers -----------------------------------------------------------------------

def _load_records(run: RunDir) -> list[ingest.SurveyRecord]:
    with open(run.path("records.csv"), encoding="utf-8", newline="") as fh:
        return ingest.read_records(fh)


def _load_corpus(run: RunDir) -> engine.Corpus:
    table = load_mapping(run.path("mapping.yaml"))
    encoder = Encoder.loads(run.path("encoder.json").read_text(encoding="utf-8"))
    return engine.Corpus.build(_load_records(run), table, encoder)


def _external(cfg: RunConfig) -> dict[str, Path | None]:
    return {"<extract>": cfg.extract, "<mapping>": cfg.mapping, "<truth>": cfg.truth}


def _params_from(d: dict) -> Hyperparams:
    return Hyperparams(**d)


def _params_dict(p: Hyperparams) -> dict:
    return {"nrounds": p.nrounds, "max_depth": p.max_depth, "eta": p.eta,
            "min_samples_leaf": p.min_samples_leaf, "seed": p.seed, "subsample": p.subsample}


# -- stages -----------------------------------------------------------------------------

def stage_synth(cfg: RunConfig, args: argparse.Namespace) -> None:
    run = RunDir(cfg.out)
    run.root.mkdir(parents=True, exist_ok=True)
    sv = synth.generate(n_occupations=args.occupations, n_requirements=args.requirements,
                        missing_rate=args.missing, se_scale=args.se_scale, seed=cfg.seed)
    run.write_text("extract.csv", sv.extract_csv())
    run.write_text("truth.csv", sv.truth_csv())
    run.write_text("mapping_source.yaml", yaml.safe_dump(sv.table.to_config(), sort_keys=False))
    run.write_text("config.yaml", yaml.safe_dump({
        "extract": "extract.csv", "mapping": "mapping_source.yaml", "truth": "truth.csv",
        "out": ".", "seed": cfg.seed,
    }, sort_keys=False))
    run.record("synth", {}, ["extract.csv", "truth.csv", "mapping_source.yaml", "config.yaml"],
               {"occupations": args.occupations, "requirements": args.requirements,
                "missing": args.missing, "se_scale": args.se_scale, "seed": cfg.seed})
    logger.info("synthetic survey written to %s", run.root)


def stage_ingest(cfg: RunConfig, args) -> None:
    if cfg.mapping is None:
        raise UsageError("no mapping config given (set 'mapping' in --config)")
    if cfg.extract is None:
        raise UsageError("no extract given (set 'extract' in --config)")
    for what, p in (("mapping config", cfg.mapping), ("extract", cfg.extract)):
        if not p.exists():
            raise UsageError(f"{what} {p} does not exist")
    try:
        table = load_mapping(cfg.mapping)
    except (MappingError, yaml.YAMLError) as err:
        raise UsageError(f"bad mapping config {cfg.mapping}: {err}") from None
    try:
        schema = ingest.Schema.from_mapping(cfg.schema)
    except (TypeError, ValueError) as err:
        raise UsageError(str(err)) from None

    with open(cfg.extract, encoding="utf-8", newline="") as fh:
        parsed = ingest.parse_survey(fh, schema, lenient=cfg.lenient)
    if not parsed:
        raise StageError(f"{cfg.extract} holds no percentage estimates")
    completed = ingest.complete_groups(parsed, table.level_catalog())
    groups = ingest.complete_n_minus_1(ingest.group_records(completed))
    records = ingest.flatten(groups)
    clamped, inside = simulate.clamp_tally(groups)

    run = RunDir(cfg.out)
    run.root.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    ingest.write_records(records, buf)
    run.write_text("records.csv", buf.getvalue())
    run.write_text("mapping.yaml", yaml.safe_dump(table.to_config(), sort_keys=False))
    corpus = engine.Corpus.build(records, table)
    run.write_text("encoder.json", corpus.encoder.dumps())
    origins = {o.value: sum(1 for r in records if r.origin is o) for o in ingest.Origin}
    census = {
        "occupations": len({r.occupation for r in records}),
        "requirements": len({table[r.level_key].requirement for r in records}),
        "groups": len(groups),
        "records": len(records),
        "known": sum(1 for r in records if r.known),
        "missing": sum(1 for r in records if not r.known),
        "origins": origins,
        "sigma_clamped": clamped,
        "sigma_inside_limit": inside,
    }
    run.write_text("census.json", _dump_json(census))
    run.record("ingest",
               {"<extract>": sha256_file(cfg.extract), "<mapping>": sha256_file(cfg.mapping)},
               ["records.csv", "mapping.yaml", "encoder.json", "census.json"],
               cfg.snapshot())
    logger.info("ingested %d records in %d groups (%d missing)", len(records), len(groups), census["missing"])


def stage_tune(cfg: RunConfig, args) -> None:
    run = RunDir(cfg.out)
    inputs = run.require("tune", _external(cfg))
    corpus = _load_corpus(run)
    result = engine.train_test_tune(corpus, cfg.hyperparams(), cfg.seed, threshold=cfg.threshold,
                                    max_iters=cfg.max_iters, bound_halfwidth=cfg.bound_halfwidth)
    doc = {
        "best": _params_dict(result.best),
        "candidates": [{
            "params": _params_dict(c.params),
            "convergence_iteration": c.convergence_iteration,
            "validation_mae": _json_float(c.validation_mae),
            "test_rmse": [_json_float(x) for x in c.test_rmse],
        } for c in result.candidates],
    }
    run.write_text("tune.json", _dump_json(doc))
    run.record("tune", inputs, ["tune.json"],
               cfg.snapshot())
    logger.info("tuned: %s", result.best.label())


def stage_kfolds(cfg: RunConfig, args) -> None:
    run = RunDir(cfg.out)
    inputs = run.require("kfolds", _external(cfg))
    corpus = _load_corpus(run)
    params = _params_from(json.loads(run.path("tune.json").read_text(encoding="utf-8"))["best"])
    rep = engine.kfolds_report(corpus, params, cfg.soc_levels, cfg.k, cfg.seed, threshold=cfg.threshold,
                               max_iters=cfg.max_iters, bound_halfwidth=cfg.bound_halfwidth)
    spec = rep.spec
    doc = {
        "params": _params_dict(params),
        "blend": {"ratio_a": spec.ratio_a, "soc_a": spec.soc_a, "soc_b": spec.soc_b,
                  "convergence_iter_a": spec.convergence_iter_a,
                  "convergence_iter_b": spec.convergence_iter_b},
        "converged_rmse": {k: _json_float(v) for k, v in rep.converged_rmse.items()},
        "k": cfg.k,
        "error_convention": metrics.ERROR_CONVENTION,
    }
    run.write_text("kfolds.json", _dump_json(doc))

    n_iter = max(len(r.rmse) for r in rep.runs)
    names = [f"soc{r.soc_digits}" for r in rep.runs]
    rows = []
    for i in range(n_iter):
        row = [i] + [fmt(r.rmse[i]) if i < len(r.rmse) else "" for r in rep.runs]
        row.append(fmt(rep.blended_rmse[i]) if i < len(rep.blended_rmse) else "")
        rows.append(row)
    run.write_text("kfolds_rmse.csv", _csv(["iteration", *names, "blended"], rows))
    run.write_text("kfolds_errors.csv", _csv(
        ["iteration", "rmse", "mae", "me", "sd_e", "r2", "n"],
        [[i, fmt(e.rmse), fmt(e.mae), fmt(e.me), fmt(e.sd_e), fmt(e.r2), e.n]
         for i, e in enumerate(rep.blended_errors)]))
    curve = rep.curve if rep.curve is not None else np.array([])
    run.write_text("blend_curve.csv", _csv(
        ["ratio_a", "rmse"], [[fmt(r), fmt(v)] for r, v in zip(engine.BLEND_GRID[:len(curve)], curve)]))
    run.record("kfolds", inputs, ["kfolds.json", "kfolds_rmse.csv", "kfolds_errors.csv", "blend_curve.csv"],
               cfg.snapshot())
    logger.info("k-folds: convergence %s, blend ratio %.2f",
                [r.convergence_iteration for r in rep.runs], spec.ratio_a)


def stage_impute(cfg: RunConfig, args) -> None:
    run = RunDir(cfg.out)
    inputs = run.require("impute", _external(cfg))
    corpus = _load_corpus(run)
    kf = json.loads(run.path("kfolds.json").read_text(encoding="utf-8"))
    params = _params_from(kf["params"])
    spec = engine.BlendSpec(**kf["blend"])
    sims = simulate.simulate(corpus.groups(), cfg.n_sims, cfg.seed)
    result = engine.impute(corpus, sims, params, spec, n_sims=cfg.n_sims,
                           bound_halfwidth=cfg.bound_halfwidth)

    rows = []
    for i, key in enumerate(sims.keys):
        if np.isnan(sims.values[i, 0]):
            continue
        for s in range(sims.n_sims):
            rows.append([*key, s, fmt_exact(sims.values[i, s]), int(sims.shocked[i])])
    run.write_text("simulations.csv", _csv(
        ["occupation", "additive_group", "element", "level", "sim", "value", "shocked"], rows))

    streams = [spec.soc_a] + ([spec.soc_b] if spec.soc_b is not None else [])
    rows = []
    for s, per_stream in enumerate(result.traces):
        for soc, tr in zip(streams, per_stream):
            for it, state in enumerate(tr.predictions):
                for r in result.missing_rows:
                    rec = corpus.records[r]
                    rows.append([s, soc, it, rec.occupation, rec.additive_group, rec.element, rec.level,
                                 fmt(state[r])])
    run.write_text("iterations.csv", _csv(
        ["sim", "soc", "iteration", "occupation", "additive_group", "element", "level", "value"], rows))

    cis = result.intervals(cfg.ci_level, cfg.ci_method, cfg.ci_scale)
    rows = []
    for r, ci, init in zip(result.missing_rows, cis, result.initial):
        rec = corpus.records[r]
        rows.append([rec.occupation, rec.soc_code, rec.additive_group, rec.element, rec.level,
                     fmt_exact(ci.mean), fmt(ci.lower), fmt(ci.upper), int(ci.degenerate), ci.n,
                     fmt_exact(init.mean())])
    run.write_text("imputations.csv", _csv(
        ["occupation", "soc_code", "additive_group", "element", "level",
         "mean", "lower", "upper", "degenerate", "n_sims", "initial"], rows))

    m_mae, m_me = engine.model_uncertainty(result)
    summary = {
        "model_uncertainty": {"mae": _json_float(m_mae), "me": _json_float(m_me)},
        "n_sims": cfg.n_sims,
        "missing_records": len(result.missing_rows),
        "degenerate_intervals": sum(1 for c in cis if c.degenerate),
        "zero_in_all_sims": int(np.sum(np.all(result.final == 0.0, axis=1))),
        "shocked_records": int(sims.shocked.sum()),
        "bounded_shocks": int(sims.range_limited.sum()),
        "ci": {"method": cfg.ci_method, "level": cfg.ci_level, "scale": cfg.ci_scale},
        "error_convention": metrics.ERROR_CONVENTION,
    }
    run.write_text("metrics.json", _dump_json(summary))
    run.record("impute", inputs,
               ["simulations.csv", "iterations.csv", "imputations.csv", "metrics.json"],
               cfg.snapshot())
    logger.info("imputed %d records over %d simulations", len(result.missing_rows), cfg.n_sims)


def _read_means(run: RunDir, column: str = "mean") -> dict[tuple, float]:
    out = {}
    with open(run.path("imputations.csv"), encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["occupation"], int(row["additive_group"]), row["element"], row["level"])
            out[key] = float(row[column])
    return out


def stage_analyze(cfg: RunConfig, args) -> None:
    run = RunDir(cfg.out)
    inputs = run.require("analyze", _external(cfg))
    table = load_mapping(run.path("mapping.yaml"))
    dists = applications.distributions(_load_records(run), _read_means(run), table)

    ov = applications.overlap_table(dists)
    run.write_text("overlap.csv", _csv(
        ["occupation_a", "occupation_b", "additive_group", "requirement", "overlap"],
        [[r.occupation_a, r.occupation_b, r.additive_group, r.requirement, fmt(r.overlap)] for r in ov]))
    weights = {int(k): float(v) for k, v in cfg.requirement_weights.items()}
    summ = applications.summarize_overlap(ov, weights or None)
    run.write_text("overlap_summary.csv", _csv(
        ["occupation_a", "occupation_b", "mean", "sd", "n"],
        [[s.occupation_a, s.occupation_b, fmt(s.mean), fmt(s.sd), s.n] for s in summ]))

    et = applications.ele_table(dists, table)
    st = applications.standardize_table(et)
    rows, zrows = [], []
    for j, ag in enumerate(et.additive_groups):
        for i, occ in enumerate(et.occupations):
            if np.isnan(et.values[i, j]):
                continue
            rows.append([occ, et.soc_codes[i], ag, et.requirements[j], fmt(et.values[i, j])])
            zrows.append([occ, et.soc_codes[i], ag, et.requirements[j], fmt(st.z[i, j]), int(st.degenerate[j])])
    run.write_text("ele.csv", _csv(["occupation", "soc_code", "additive_group", "requirement", "ele"], rows))
    run.write_text("ele_standardized.csv", _csv(
        ["occupation", "soc_code", "additive_group", "requirement", "z", "degenerate"], zrows))
    pooling = {int(k): str(v) for k, v in cfg.pooling.items()}
    run.write_text("ele_pooled.csv", _csv(
        ["label", "occupation", "additive_group", "z"],
        [[lab, occ, ag, fmt(z)] for lab, occ, ag, z in applications.pooled_scores(st, pooling)]))

    complete = ~np.any(np.isnan(st.z), axis=1)
    occs = [o for o, ok in zip(et.occupations, complete) if ok]
    socs = [s for s, ok in zip(et.soc_codes, complete) if ok]
    cm = applications.occupation_correlation(occs, socs, st.z[complete])
    run.write_text("correlation.csv", _csv(
        ["occupation", "soc2", *cm.occupations],
        [[o, s2, *(fmt(v) for v in row)] for o, s2, row in zip(cm.occupations, cm.soc2, cm.matrix)]))
    within, between = applications.mean_correlations(cm)
    run.write_text("analysis.json", _dump_json({
        "occupations": len(et.occupations),
        "correlated_occupations": len(cm.occupations),
        "undefined_correlations": int(cm.undefined.sum()),
        "degenerate_requirements": [ag for ag, d in zip(et.additive_groups, st.degenerate) if d],
        "mean_correlation_within_soc2": _json_float(within),
        "mean_correlation_between_soc2": _json_float(between),
    }))
    run.record("analyze", inputs,
               ["overlap.csv", "overlap_summary.csv", "ele.csv", "ele_standardized.csv",
                "ele_pooled.csv", "correlation.csv", "analysis.json"],
               cfg.snapshot())
    logger.info("analytics written for %d occupations", len(et.occupations))


def stage_evaluate(cfg: RunConfig, args) -> None:
    if cfg.truth is None or not cfg.truth.exists():
        raise UsageError("evaluate needs a 'truth' file (written by `wigem synth`)")
    run = RunDir(cfg.out)
    inputs = run.require("evaluate", _external(cfg))
    truth = {}
    with open(cfg.truth, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["occupation"], int(row["additive_group"]), row["element"], row["level"])
            truth[key] = float(row["value"])
    final, initial = _read_means(run, "mean"), _read_means(run, "initial")
    keys = sorted(k for k in final if k in truth)
    if not keys:
        raise StageError("no imputed record appears in the truth file")
    actual = np.array([truth[k] for k in keys])
    rep_f = metrics.error_report([final[k] for k in keys], actual)
    rep_i = metrics.error_report([initial[k] for k in keys], actual)
    doc = {
        "n": len(keys),
        "error_convention": metrics.ERROR_CONVENTION,
        "initial": {k: _json_float(v) for k, v in rep_i.to_dict().items() if k != "n"},
        "final": {k: _json_float(v) for k, v in rep_f.to_dict().items() if k != "n"},
        "rmse_reduction": _json_float(1.0 - rep_f.rmse / rep_i.rmse) if rep_i.rmse > 0 else None,
    }
    run.write_text("evaluation.json", _dump_json(doc))
    run.record("evaluate", {**inputs, "<truth>": sha256_file(cfg.truth)}, ["evaluation.json"], {})
    logger.info("rmse %.4f -> %.4f against ground truth", rep_i.rmse, rep_f.rmse)


STAGES: dict[str, Callable] = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "tune": stage_tune,
    "kfolds": stage_kfolds,
    "impute": stage_impute,
    "analyze": stage_analyze,
    "evaluate": stage_evaluate,
}


# -- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="run directory")
    common.add_argument("--soc", choices=("2", "3", "both"), help="SOC streams to run")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = argparse.ArgumentParser(prog="wigem", description="Weighted iterative imputation of survey distributions.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="write a synthetic extract with ground truth")
    s.add_argument("--occupations", type=int, default=50)
    s.add_argument("--requirements", type=int, default=10)
    s.add_argument("--missing", type=float, default=0.4, help="missingness rate")
    s.add_argument("--se-scale", type=float, default=0.1, help="standard error = se_scale * sqrt(p(1-p))")
    i = sub.add_parser("ingest", parents=[common], help="parse and complete an extract")
    i.add_argument("--lenient", action="store_true", help="skip bad rows with a warning")
    sub.add_parser("tune", parents=[common], help="train-test hyperparameter selection")
    sub.add_parser("kfolds", parents=[common], help="k-folds convergence and SOC blending")
    m = sub.add_parser("impute", parents=[common], help="simulate and impute with intervals")
    m.add_argument("--sims", type=int, help="number of simulations")
    m.add_argument("--ci", choices=_CI_METHODS, help="interval method")
    sub.add_parser("analyze", parents=[common], help="overlap, ELE and correlation tables")
    sub.add_parser("evaluate", parents=[common], help="score imputations against synthetic truth")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)   # exits with status 2 on bad usage
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        STAGES[args.command](cfg, args)
    except UsageError as err:
        print(f"wigem {args.command}: {err}", file=sys.stderr)
        return 2
    except (StageError, ingest.RecordError, ingest.ConstraintViolation, ingest.CatalogError,
            MappingError, engine.NonConvergence, ValueError, KeyError, OSError) as err:
        print(f"wigem {args.command}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
