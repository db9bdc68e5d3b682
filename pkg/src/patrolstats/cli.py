"""Command-line pipeline: ``patrolstats {normalize,analyze,report,synth}``.

Exit codes: 0 ok, 2 validation error (config, paths, schemas), 3 data-quality
bound exceeded (error-sink rate), 4 non-convergence (GLM or MCMC).

Configuration is an INI-style key-value file; see README for every key.
Outputs are deterministic given inputs and seed (no timestamps), and every
command writes a ``manifest.json`` listing the files it emitted with their
SHA-256 hashes.
"""

from __future__ import annotations

import argparse
import configparser
import datetime as dt
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from importlib import metadata as importlib_metadata
from pathlib import Path

import numpy as np
import pandas as pd

from . import disparity, policy, records, synth, threshold
from .glm import FitResult, RankDeficientError
from .inference import SamplerConfig

log = logging.getLogger("patrolstats")

EXIT_OK, EXIT_VALIDATION, EXIT_QUALITY, EXIT_CONVERGENCE = 0, 2, 3, 4
ANALYSES = ("outcome_test", "stop_rates", "poststop", "threshold", "did", "trends")


class ValidationError(Exception):
    pass


# -- hashing / manifest ------------------------------------------------------


def git_blob_hash(path: str | Path) -> str:
    """Content hash computed the way git names blobs."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(directory: Path) -> Path:
    """List every file under ``directory`` (except the manifest) with hashes."""
    files = sorted(p for p in directory.rglob("*") if p.is_file() and p.name != "manifest.json")
    entries = [{"path": p.relative_to(directory).as_posix(), "sha256": sha256(p), "bytes": p.stat().st_size} for p in files]
    path = directory / "manifest.json"
    path.write_text(json.dumps({"files": entries}, indent=2, sort_keys=True) + "\n")
    return path


def validate_manifest(directory: str | Path) -> list[str]:
    """Problems found when re-hashing a manifest's files (empty when valid)."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    problems = []
    listed = set()
    for entry in manifest["files"]:
        p = directory / entry["path"]
        listed.add(entry["path"])
        if not p.exists():
            problems.append(f"missing: {entry['path']}")
        elif sha256(p) != entry["sha256"]:
            problems.append(f"hash mismatch: {entry['path']}")
    for p in directory.rglob("*"):
        rel = p.relative_to(directory).as_posix()
        if p.is_file() and p.name != "manifest.json" and rel not in listed:
            problems.append(f"unlisted: {rel}")
    return problems


def _version() -> str:
    try:
        return importlib_metadata.version("patrolstats")
    except importlib_metadata.PackageNotFoundError:
        return "unknown"


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(threshold._jsonable(payload), indent=2, sort_keys=True, default=str) + "\n")


def _write_csv(path: Path, frame: pd.DataFrame) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")


# -- config ------------------------------------------------------------------


@dataclass
class PipelineConfig:
    base: Path
    output_dir: Path
    seed: int = 0
    max_error_rate: float = 0.05
    inputs: dict[str, Path] = field(default_factory=dict)
    schemas: dict[str, Path] = field(default_factory=dict)
    locations: Path | None = None
    violations: Path | None = None
    surnames: Path | None = None
    reclassify_states: list[str] = field(default_factory=list)
    census: Path | None = None
    district_map: Path | None = None
    analyses: list[str] = field(default_factory=list)
    section: dict[str, dict[str, str]] = field(default_factory=dict)

    def get(self, section: str, key: str, default=None):
        return self.section.get(section, {}).get(key, default)

    def constants(self) -> dict:
        return {
            "age_bins": list(disparity.AGE_BINS),
            "hour_bins": list(disparity.HOUR_BINS),
            "references": disparity.REFERENCES,
            "outcome_severity": list(records.OUTCOMES),
            "availability_threshold": disparity.AVAILABILITY,
            "rhat_bound": threshold.RHAT_BOUND,
            "procedural_searches": sorted(policy.PROCEDURAL_SEARCHES),
            "age_window": [records.AGE_MIN, records.AGE_MAX],
            "surname_cutoff": 0.75,
        }


def load_config(path: str | Path, overrides: dict | None = None) -> PipelineConfig:
    """Read and validate a pipeline config; raises ValidationError."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    base = path.parent.resolve()

    def resolve(value: str | None) -> Path | None:
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else base / p

    sections = {s: dict(parser[s].items()) for s in parser.sections()}
    for key, value in (overrides or {}).items():
        sec, _, name = key.rpartition(".")
        sections.setdefault(sec or "pipeline", {})[name] = str(value)
    pipe = sections.get("pipeline", {})
    try:
        cfg = PipelineConfig(
            base=base,
            output_dir=resolve(pipe.get("output_dir", "out")),
            seed=int(pipe.get("seed", 0)),
            max_error_rate=float(pipe.get("max_error_rate", 0.05)),
            inputs={s.upper(): resolve(v) for s, v in sections.get("inputs", {}).items()},
            locations=resolve(sections.get("reference", {}).get("locations")),
            violations=resolve(sections.get("reference", {}).get("violations")),
            surnames=resolve(sections.get("reference", {}).get("surnames")),
            reclassify_states=[
                s.strip().upper() for s in sections.get("reference", {}).get("reclassify_states", "").split(",") if s.strip()
            ],
            census=resolve(sections.get("analyze", {}).get("census")),
            district_map=resolve(sections.get("analyze", {}).get("district_map")),
            analyses=[a.strip() for a in sections.get("analyze", {}).get("analyses", "").split(",") if a.strip()],
            section=sections,
        )
    except ValueError as exc:
        raise ValidationError(f"bad value in config: {exc}") from exc
    schema_dir = resolve(pipe.get("schema_dir", "schemas"))
    for state in cfg.inputs:
        explicit = sections.get("schemas", {}).get(state) or sections.get("schemas", {}).get(state.lower())
        cfg.schemas[state] = resolve(explicit) if explicit else schema_dir / f"{state.lower()}.ini"
    unknown = [a for a in cfg.analyses if a not in ANALYSES]
    if unknown:
        raise ValidationError(f"unknown analyses {unknown}; expected some of {list(ANALYSES)}")
    return cfg


def _check_paths(paths: dict[str, Path | None]) -> None:
    missing = [f"{k}: {v}" for k, v in paths.items() if v is not None and not Path(v).exists()]
    if missing:
        raise ValidationError("missing paths: " + "; ".join(missing))


# -- normalize ---------------------------------------------------------------


def cmd_normalize(cfg: PipelineConfig) -> int:
    if not cfg.inputs:
        raise ValidationError("config lists no [inputs]")
    _check_paths({**{f"input {s}": p for s, p in cfg.inputs.items()}, **{f"schema {s}": p for s, p in cfg.schemas.items()}})
    _check_paths({"locations": cfg.locations, "violations": cfg.violations, "surnames": cfg.surnames})
    schemas = {}
    for state, path in sorted(cfg.schemas.items()):
        try:
            schema = records.StateSchema.load(path)
            if schema.state != state:
                raise records.SchemaError(f"schema {path} is for {schema.state}, not {state}")
            schema.validate_header(records.read_header(cfg.inputs[state], schema))
        except (records.SchemaError, records.SourceError) as exc:
            raise ValidationError(str(exc)) from exc
        schemas[state] = schema
    if cfg.reclassify_states and not cfg.surnames:
        raise ValidationError("reclassify_states set but no surname table given")
    refs = records.RefTables.load(cfg.locations, cfg.violations)
    surnames = records.load_surnames(cfg.surnames) if cfg.surnames else None

    out = cfg.output_dir / "standardized"
    out.mkdir(parents=True, exist_ok=True)
    total = records.Audit()
    per_state = {}
    for state, schema in schemas.items():
        result = records.normalize_source(cfg.inputs[state], schema, refs, surnames, cfg.reclassify_states)
        records.write_records(result.records, out / f"{state}.csv")
        per_state[state] = result.audit.to_dict()
        total.merge(result.audit)
        log.info("%s: %d records, %d errors", state, len(result.records), len(result.audit.errors))
    audit = {
        "total": total.to_dict()["counts"],
        "conservation_holds": total.conserved(),
        "states": per_state,
        "inputs": {s: git_blob_hash(p) for s, p in sorted(cfg.inputs.items())},
    }
    _write_json(out / "audit.json", audit)
    write_manifest(out)
    read = total.counts["rows_read"]
    rate = total.counts["error_sink"] / read if read else 0.0
    if rate > cfg.max_error_rate:
        log.error("error-sink rate %.3f exceeds bound %.3f", rate, cfg.max_error_rate)
        return EXIT_QUALITY
    return EXIT_OK


# -- analyze -----------------------------------------------------------------


def _load_standardized(cfg: PipelineConfig) -> tuple[pd.DataFrame, dict]:
    std = cfg.output_dir / "standardized"
    files = sorted(std.glob("*.csv"))
    if not files:
        raise ValidationError(f"no standardized files in {std}; run normalize first")
    frames = [records.read_standardized_frame(f) for f in files]
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    hashes = {f.name: git_blob_hash(f) for f in files}
    return frame, hashes


def _available_states(frame: pd.DataFrame, fields: list[str]) -> tuple[list[str], dict[str, str]]:
    avail = disparity.field_availability(frame, fields)
    keep, skipped = [], {}
    for state, row in avail.iterrows():
        short = [f for f in fields if row[f] < disparity.AVAILABILITY]
        if short:
            skipped[state] = "insufficient " + ", ".join(short)
        else:
            keep.append(state)
    return keep, skipped


def _parse_date(value: str) -> dt.date:
    return dt.date.fromisoformat(value)


def cmd_analyze(cfg: PipelineConfig) -> int:
    if not cfg.analyses:
        raise ValidationError("[analyze] analyses is empty")
    _check_paths({"census": cfg.census, "district_map": cfg.district_map})
    thr_data_path = cfg.get("threshold", "data")
    needs_records = any(a != "threshold" for a in cfg.analyses) or not thr_data_path
    frame, hashes = _load_standardized(cfg) if needs_records else (pd.DataFrame(), {})
    if thr_data_path:
        p = cfg.base / thr_data_path
        _check_paths({"threshold data": p})
        hashes[Path(thr_data_path).name] = git_blob_hash(p)
    if cfg.census:
        hashes[cfg.census.name] = git_blob_hash(cfg.census)
    out = cfg.output_dir / "results"
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "inputs": hashes,
        "seed": cfg.seed,
        "version": _version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "constants": cfg.constants(),
        "analyses": cfg.analyses,
    }
    skipped: dict[str, dict] = {}
    status = EXIT_OK
    if "stop_rates" in cfg.analyses and not cfg.census:
        raise ValidationError("stop_rates needs [analyze] census")

    if "outcome_test" in cfg.analyses:
        keep, skip = _available_states(frame, ["search_conducted", "contraband_found"])
        skipped["outcome_test"] = skip
        test = disparity.outcome_test(frame[frame["state"].isin(keep)])
        _write_csv(out / "outcome_test_locations.csv", test.locations)
        _write_csv(out / "outcome_test_aggregate.csv", test.aggregate)

    if "stop_rates" in cfg.analyses:
        census = pd.read_csv(cfg.census, dtype={"location": str})
        if cfg.district_map:
            dm = pd.read_csv(cfg.district_map, dtype=str)
            census = disparity.aggregate_census(census, dict(zip(dm["county"], dm["district"])))
        keep, skip = _available_states(frame, ["location", "driver_age", "driver_gender", "stop_date"])
        skipped["stop_rates"] = skip
        built = disparity.build_cells(frame[frame["state"].isin(keep)], census)
        _write_csv(out / "stop_rate_cells.csv", built.cells)
        _write_csv(out / "stop_rate_coverage.csv", built.coverage)
        families = [f.strip() for f in cfg.get("stop_rates", "families", "NegBin,Poisson,QuasiPoisson").split(",")]
        for family in families:
            sandwich = family == "Poisson"
            fit = disparity.stop_rate_analysis(built.cells, family, sandwich=sandwich)
            fit.metadata["run"] = meta
            fit.to_json(out / f"stop_rate_{family}.json")
            _write_csv(out / f"stop_rate_{family}_typical.csv", disparity.typical_driver_rates(fit))
            if not fit.converged:
                status = EXIT_CONVERGENCE

    if "poststop" in cfg.analyses:
        outcomes = [o.strip() for o in cfg.get("poststop", "outcomes", ",".join(disparity.OUTCOMES)).split(",")]
        specs = [s.strip() for s in cfg.get("poststop", "controls", "race+location+time+demo").split(",")]
        rows, skip = [], {}
        for outcome in outcomes:
            for spec in specs:
                key = f"{outcome}|{spec}"
                try:
                    res = disparity.poststop_analysis(frame, outcome, spec)
                except (disparity.CoverageError, RankDeficientError, ValueError) as exc:
                    skip[key] = str(exc)
                    continue
                res.fit.metadata["run"] = meta
                safe = spec.replace("+", "_")
                res.fit.to_json(out / f"poststop_{outcome}_{safe}.json")
                rows.append(res.race_coefficients())
                if res.dropped_states:
                    skip[key] = res.dropped_states
                if spec == "race+location+time+demo":
                    _write_csv(out / f"poststop_{outcome}_typical.csv", disparity.typical_driver_rates(res.fit))
                if not res.fit.converged:
                    status = EXIT_CONVERGENCE
        skipped["poststop"] = skip
        if rows:
            _write_csv(out / "poststop_race_coefficients.csv", pd.concat(rows, ignore_index=True))

    if "threshold" in cfg.analyses:
        sampler = SamplerConfig(
            chains=int(cfg.get("threshold", "chains", 5)),
            warmup=int(cfg.get("threshold", "warmup", 2500)),
            draws=int(cfg.get("threshold", "draws", 2500)),
            seed=cfg.seed,
        )
        if thr_data_path:
            data = threshold.ThresholdData.read_csv(cfg.base / thr_data_path)
        else:
            keep, skip = _available_states(frame, ["location", "search_conducted", "contraband_found"])
            skipped["threshold"] = skip
            sub = frame[frame["state"].isin(keep)]
            sub = sub.assign(location=sub["state"].astype(str) + ":" + sub["location"].astype(str))
            data = threshold.prepare(
                sub,
                min_stops=int(cfg.get("threshold", "min_stops", 1000)),
                max_locations=int(cfg.get("threshold", "max_locations", 100)),
            )
        fit = threshold.fit(data, sampler)
        tdir = out / "threshold"
        tdir.mkdir(parents=True, exist_ok=True)
        summary = fit.summary()
        summary["run"] = meta
        _write_json(tdir / "threshold_summary.json", summary)
        _write_csv(tdir / "threshold_aggregate.csv", fit.aggregate)
        _write_csv(tdir / "threshold_groups.csv", fit.groups)
        _write_csv(tdir / "threshold_ppc.csv", threshold.ppc(fit.draws, data, fit.model, seed=cfg.seed))
        _write_csv(
            tdir / "threshold_rhat.csv", pd.DataFrame({"parameter": fit.draws.names, "rhat": fit.rhat})
        )
        fit.draws.save(tdir / "draws")
        if not fit.converged:
            status = EXIT_CONVERGENCE

    if "did" in cfg.analyses or "trends" in cfg.analyses:
        treated = cfg.get("policy", "treated_states", "CO,WA")
        control = cfg.get("policy", "control_states", "")
        spec = policy.DidSpec(
            treated_states=frozenset(s.strip() for s in treated.split(",") if s.strip()),
            control_states=frozenset(s.strip() for s in control.split(",") if s.strip()) or None,
            legalization_date=_parse_date(cfg.get("policy", "legalization_date", "2012-12-31")),
            outcome=cfg.get("policy", "outcome", "search"),
            excluded_search_types=frozenset(
                s.strip() for s in cfg.get("policy", "excluded_search_types", "IncidentToArrest,Inventory,Warrant").split(",")
            ),
        )
        if "did" in cfg.analyses:
            try:
                res = policy.did_fit(frame, spec)
                res.fit.metadata["run"] = meta
                res.fit.to_json(out / "did.json")
                _write_csv(out / "did_table.csv", res.table())
                if not res.fit.converged:
                    status = EXIT_CONVERGENCE
            except (policy.PolicyDataError, RankDeficientError) as exc:
                skipped["did"] = {"reason": str(exc)}
            try:
                delta = policy.innocent_search_delta(frame, spec)
                _write_json(out / "innocent_search_delta.json", {"relative_change": delta})
            except policy.PolicyDataError as exc:
                skipped["innocent_search_delta"] = {"reason": str(exc)}
        if "trends" in cfg.analyses:
            tr = policy.trend_series(frame, spec)
            _write_csv(out / "trend_series.csv", tr.series)
            _write_csv(out / "trend_lines.csv", tr.trends)

    _write_json(out / "skipped.json", skipped)
    _write_json(out / "run.json", meta)
    write_manifest(out)
    return status


# -- report ------------------------------------------------------------------


def cmd_report(results: Path, out: Path | None = None, min_stops: int = 0) -> int:
    results = Path(results)
    if not results.is_dir():
        raise ValidationError(f"no results directory {results}")
    out = Path(out) if out else results.parent / "report"
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# Results summary", ""]
    emitted = []
    cells = results / "stop_rate_cells.csv"
    if cells.exists():
        data = disparity.stop_rate_plot_data(pd.read_csv(cells, dtype={"location": str}), min_stops=min_stops)
        _write_csv(out / "fig_stop_rates.csv", data)
        emitted.append("fig_stop_rates.csv")
    for family in ("NegBin", "Poisson", "QuasiPoisson"):
        p = results / f"stop_rate_{family}.json"
        if p.exists():
            fit = FitResult.from_json(p)
            lines.append(
                f"- Stop rate ({family}, {fit.cov_type} errors): Black {fit['race[Black]']:.3f} "
                f"({fit.stderr('race[Black]'):.3f}), Hispanic {fit['race[Hispanic]']:.3f} "
                f"({fit.stderr('race[Hispanic]'):.3f}); dispersion {fit.dispersion:.3g}"
            )
    coefs = results / "poststop_race_coefficients.csv"
    if coefs.exists():
        c = pd.read_csv(coefs)
        lines.append("")
        lines.append("| outcome | controls | race | estimate | s.e. |")
        lines.append("|---|---|---|---|---|")
        for r in c.itertuples(index=False):
            lines.append(f"| {r.outcome} | {r.controls} | {r.race} | {r.estimate:.3f} | {r.std_error:.3f} |")
        lines.append("")
    locs = results / "outcome_test_locations.csv"
    if locs.exists():
        loc_frame = pd.read_csv(locs, dtype={"location": str})
        test = disparity.OutcomeTest(loc_frame, pd.read_csv(results / "outcome_test_aggregate.csv"))
        _write_csv(out / "fig_hit_rates.csv", disparity.hit_rate_plot_data(test))
        emitted.append("fig_hit_rates.csv")
        for r in test.aggregate.itertuples(index=False):
            lines.append(f"- Aggregate hit rate, {r.race}: {r.hit_rate:.1%} of {r.searches} searches")
    tdir = results / "threshold"
    if (tdir / "threshold_groups.csv").exists():
        groups = pd.read_csv(tdir / "threshold_groups.csv", dtype={"location": str})
        white = groups[groups["race"] == "White"][["location", "period", "threshold", "stops"]]
        white = white.rename(columns={"threshold": "white_threshold", "stops": "white_stops"})
        scatter = groups[groups["race"] != "White"].merge(white, on=["location", "period"])
        _write_csv(out / "fig_thresholds.csv", scatter)
        _write_csv(out / "fig_ppc.csv", pd.read_csv(tdir / "threshold_ppc.csv", dtype={"location": str}))
        emitted += ["fig_thresholds.csv", "fig_ppc.csv"]
        agg = pd.read_csv(tdir / "threshold_aggregate.csv")
        summary = json.loads((tdir / "threshold_summary.json").read_text())
        lines.append(f"- Threshold model: max R-hat {summary['max_rhat']:.3f} (bound {summary['rhat_bound']})")
        for r in agg.itertuples(index=False):
            lines.append(f"- Threshold {r.race} ({r.period}): {r.threshold:.1%} [{r.ci_low:.1%}, {r.ci_high:.1%}]")
    if (results / "trend_series.csv").exists():
        _write_csv(out / "fig_trends.csv", pd.read_csv(results / "trend_series.csv"))
        _write_csv(out / "fig_trend_lines.csv", pd.read_csv(results / "trend_lines.csv"))
        emitted += ["fig_trends.csv", "fig_trend_lines.csv"]
    if (results / "did_table.csv").exists():
        lines.append("")
        lines.append("| term | coef | s.e. |")
        lines.append("|---|---|---|")
        for r in pd.read_csv(results / "did_table.csv").itertuples(index=False):
            lines.append(f"| {r.term} | {r.coef:.3f} | {r.std_error:.3f} |")
    if (results / "innocent_search_delta.json").exists():
        d = json.loads((results / "innocent_search_delta.json").read_text())["relative_change"]
        lines.append(f"- Searches finding no contraband, year after vs before: {d:+.1%}")
    lines += ["", "Generated files: " + (", ".join(emitted) if emitted else "none"), ""]
    (out / "summary.md").write_text("\n".join(lines))
    write_manifest(out)
    return EXIT_OK


# -- synth -------------------------------------------------------------------


def cmd_synth(kind: str, out: Path, seed: int, **kwargs) -> int:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "threshold":
        data, truth = synth.gen_threshold(seed=seed, **kwargs)
        data.to_csv(out / "threshold_data.csv")
        synth.write_truth(truth, out / "truth.json")
    elif kind == "counts":
        cells, truth = synth.gen_counts(seed=seed, **kwargs)
        _write_csv(out / "cells.csv", cells)
        truth = {k: v for k, v in truth.items() if k != "mean"}
        synth.write_truth(truth, out / "truth.json")
    elif kind == "binary":
        recs, truth = synth.gen_binary(seed=seed, **kwargs)
        recs = recs.assign(stop_date=recs["stop_date"].dt.strftime("%Y-%m-%d"))
        _write_csv(out / "records.csv", recs)
        synth.write_truth(truth, out / "truth.json")
    else:
        raise ValidationError(f"unknown synth kind {kind!r}")
    write_manifest(out)
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="patrolstats", description="Traffic-stop disparity analysis pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("normalize", "standardize raw exports"), ("analyze", "run selected analyses")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, type=Path)
        s.add_argument("--out", type=Path, help="override [pipeline] output_dir")
        s.add_argument("--seed", type=int, help="override [pipeline] seed")
        s.add_argument(
            "--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override any config value"
        )
    r = sub.add_parser("report", help="plot-data files and a markdown summary")
    r.add_argument("--results", required=True, type=Path)
    r.add_argument("--out", type=Path)
    r.add_argument("--min-stops", type=int, default=0)
    s = sub.add_parser("synth", help="generate synthetic data with its truth")
    s.add_argument("kind", choices=("threshold", "counts", "binary"))
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, help="binary: number of stops")
    s.add_argument("--locations", type=int, help="threshold/counts: number of locations")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command in ("normalize", "analyze"):
            overrides = {}
            for item in args.set:
                key, sep, value = item.partition("=")
                if not sep:
                    raise ValidationError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
                overrides[key.strip()] = value.strip()
            if args.out:
                overrides["pipeline.output_dir"] = str(args.out.resolve())
            if args.seed is not None:
                overrides["pipeline.seed"] = args.seed
            cfg = load_config(args.config, overrides)
            return cmd_normalize(cfg) if args.command == "normalize" else cmd_analyze(cfg)
        if args.command == "report":
            return cmd_report(args.results, args.out, args.min_stops)
        kwargs = {}
        if args.n is not None:
            if args.kind != "binary":
                raise ValidationError("--n applies to binary data only")
            kwargs["n"] = args.n
        if args.locations is not None:
            if args.kind == "binary":
                raise ValidationError("--locations applies to threshold/counts data")
            kwargs["n_locations"] = args.locations
        return cmd_synth(args.kind, args.out, args.seed, **kwargs)
    except ValidationError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
