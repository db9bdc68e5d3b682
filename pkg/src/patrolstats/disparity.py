"""Benchmark and post-stop disparity analyses, and the outcome test.

Inputs are tidy frames: stop-level records (``records.records_to_frame``
columns) and a census table with ``location, race, age_bin, gender, year,
population``.  Outputs are FitResults, tidy tables and plot-data frames
(one row per race x location).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .glm import Design, FitResult, fit_count, fit_logistic, predict_rate, sandwich_errors

log = logging.getLogger(__name__)

RACES = ("White", "Black", "Hispanic")
AGE_BINS = ("16-19", "20-29", "30-39", "40-49", "50+")
AGE_EDGES = (16, 20, 30, 40, 50, 100)
HOUR_BINS = tuple(f"{h:02d}-{h + 2:02d}" for h in range(0, 24, 3))
REFERENCES = {"driver_race": "White", "race": "White", "age_bin": "16-19", "driver_gender": "Female", "gender": "Female"}
OUTCOMES = ("citation_given_speeding", "search", "consent_search", "arrest")
CONTROL_SPECS = {
    "race": (),
    "race+location": ("location",),
    "race+location+time": ("location", "time"),
    "race+location+demo": ("location", "demo"),
    "race+location+time+demo": ("location", "time", "demo"),
}
CONSENT_STATES = frozenset({"CO", "FL", "MA", "MD", "NC", "TX", "WA"})
AVAILABILITY = 0.70
# fields each control group / outcome needs, checked per state
_CONTROL_FIELDS = {
    "location": ("location",),
    "time": ("stop_date", "stop_time"),
    "demo": ("driver_age", "driver_gender"),
}
_OUTCOME_FIELDS = {
    "citation_given_speeding": ("violations", "outcome"),
    "search": ("search_conducted",),
    "consent_search": ("search_conducted", "search_types"),
    "arrest": ("outcome",),
}


class CoverageError(ValueError):
    pass


def age_bin(age) -> pd.Series:
    """Bin ages into AGE_BINS; ages below 16 (or missing) give NaN."""
    return pd.cut(pd.Series(age, dtype="Float64").astype(float), AGE_EDGES, right=False, labels=AGE_BINS).astype(
        object
    )


def hour_bin(minute) -> pd.Series:
    m = pd.Series(minute, dtype="Float64").astype(float)
    idx = (m // 180).to_numpy()
    out = np.full(len(m), None, dtype=object)
    ok = np.isfinite(idx)
    out[ok] = np.array(HOUR_BINS, dtype=object)[idx[ok].astype(int)]
    return pd.Series(out, index=m.index)


def _present(frame: pd.DataFrame, column: str) -> pd.Series:
    col = frame[column]
    present = col.notna()
    if column in ("driver_gender", "driver_race"):
        present &= col != "Unknown"
    elif column == "outcome":
        present &= col != "Unknown"
    elif column in ("violations", "search_types"):
        present &= col.astype(str) != ""
    return present


def field_availability(records: pd.DataFrame, fields: Iterable[str]) -> pd.DataFrame:
    """Share of stops per state with each field present."""
    fields = list(fields)
    present = pd.DataFrame({f: _present(records, f) for f in fields})
    present["state"] = records["state"].to_numpy()
    return present.groupby("state").mean()


# -- stop rates ------------------------------------------------------------


def aggregate_census(census: pd.DataFrame, mapping: Mapping[str, str]) -> pd.DataFrame:
    """Sum county populations into districts (``mapping``: county -> district)."""
    out = census.copy()
    out["location"] = out["location"].map(lambda c: mapping.get(c, c))
    keys = ["location", "race", "age_bin", "gender", "year"]
    return out.groupby(keys, as_index=False)["population"].sum()


@dataclass
class CellBuild:
    cells: pd.DataFrame
    coverage: pd.DataFrame  # excluded stops by reason
    n_records: int

    @property
    def excluded(self) -> int:
        return int(self.coverage["stops"].sum()) if len(self.coverage) else 0


def build_cells(records: pd.DataFrame, census: pd.DataFrame) -> CellBuild:
    """Count stops per (race, age_bin, gender, location, year) cell.

    Every census stratum becomes a cell (zeros included).  Stops with an
    incomplete key, or whose key has no census row, go to the coverage
    report instead.
    """
    keys = ["race", "age_bin", "gender", "location", "year"]
    stops = pd.DataFrame(
        {
            "race": records["driver_race"].to_numpy(),
            "age_bin": age_bin(records["driver_age"]).to_numpy(),
            "gender": records["driver_gender"].to_numpy(),
            "location": records["location"].to_numpy(),
            "year": pd.to_datetime(records["stop_date"]).dt.year.to_numpy(),
        }
    )
    stops.loc[~stops["race"].isin(RACES), "race"] = None
    stops.loc[~stops["gender"].isin(("Male", "Female")), "gender"] = None
    complete = stops.notna().all(axis=1).to_numpy()
    reasons = np.where(complete, "", "incomplete key")
    stops = stops.assign(year=stops["year"].astype("float"))
    counts = stops[complete].assign(year=lambda f: f["year"].astype(int)).groupby(keys).size().rename("stops")
    census = census.copy()
    census["year"] = census["year"].astype(int)
    census = census.groupby(keys, as_index=False)["population"].sum()
    cells = census.merge(counts.reset_index(), on=keys, how="left")
    cells["stops"] = cells["stops"].fillna(0).astype(np.int64)
    cells = cells.rename(columns={"population": "benchmark_pop"})
    matched = counts.index.isin(pd.MultiIndex.from_frame(census[keys]))
    unmatched = counts[~matched]
    rows = []
    n_incomplete = int((reasons == "incomplete key").sum())
    if n_incomplete:
        rows.append({"reason": "incomplete key", "location": None, "stops": n_incomplete})
    if len(unmatched):
        by_loc = unmatched.groupby(level="location").sum()
        rows.extend({"reason": "no census row", "location": loc, "stops": int(n)} for loc, n in by_loc.items())
    coverage = pd.DataFrame(rows, columns=["reason", "location", "stops"])
    cells = cells.sort_values(keys, kind="mergesort").reset_index(drop=True)
    return CellBuild(cells, coverage, len(records))


def _cell_design(cells: pd.DataFrame) -> Design:
    zero = cells["benchmark_pop"].to_numpy() <= 0
    if zero.any():
        bad = cells.loc[zero, ["race", "age_bin", "gender", "location", "year"]].head(10).to_dict(orient="records")
        raise CoverageError(f"{int(zero.sum())} cells with zero benchmark population, e.g. {bad}")
    return Design.from_frame(
        cells.astype({"year": str}),
        "stops",
        {"race": "White", "age_bin": "16-19", "gender": "Female", "location": None, "year": None},
        offset=np.log(cells["benchmark_pop"].to_numpy(dtype=float)),
    )


def stop_rate_analysis(cells: pd.DataFrame, family: str = "NegBin", sandwich: bool = False) -> FitResult:
    """Stop counts against the driving-age population offset.

    ``family`` is NegBin, Poisson or QuasiPoisson; ``sandwich`` swaps the
    covariance for HC0 errors (used with Poisson).
    """
    design = _cell_design(cells)
    fit = fit_count(design, family)
    if sandwich:
        fit = sandwich_errors(fit, design)
    fit.metadata.update(
        {
            "analysis": "stop_rate",
            "family": family,
            "offset": "log(benchmark_pop)",
            "level_weights": _level_weights(cells, ["location", "year"], "stops"),
        }
    )
    return fit


def _level_weights(frame: pd.DataFrame, columns: Sequence[str], weight: str | None) -> dict:
    out = {}
    for c in columns:
        w = frame.groupby(frame[c].astype(str))[weight].sum() if weight else frame[c].astype(str).value_counts()
        out[c] = {str(k): float(v) for k, v in w.sort_index().items()}
    return out


# -- post-stop outcomes ----------------------------------------------------


@dataclass
class PoststopFit:
    fit: FitResult
    outcome: str
    controls: str
    states: list[str]
    dropped_states: dict[str, str] = field(default_factory=dict)
    dropped_rows: int = 0
    frame: pd.DataFrame | None = None

    def race_coefficients(self) -> pd.DataFrame:
        rows = []
        for race in RACES[1:]:
            name = f"race[{race}]"
            rows.append(
                {
                    "outcome": self.outcome,
                    "controls": self.controls,
                    "race": race,
                    "estimate": self.fit[name],
                    "std_error": self.fit.stderr(name),
                    "states": ",".join(self.states),
                }
            )
        return pd.DataFrame(rows)


def outcome_frame(records: pd.DataFrame, outcome: str) -> pd.DataFrame:
    """Rows eligible for ``outcome`` with a 0/1 ``y`` column."""
    r = records[records["driver_race"].isin(RACES)]
    if outcome == "citation_given_speeding":
        speeding = r["violations"].fillna("").astype(str).str.split("|").map(lambda v: "speeding" in v)
        eligible = r["outcome"].isin(("Citation", "WrittenWarning", "VerbalWarning", "None"))
        r = r[speeding & eligible]
        y = (r["outcome"] == "Citation").astype(float)
    elif outcome == "search":
        r = r[r["search_conducted"].notna()]
        y = r["search_conducted"].astype(bool).astype(float)
    elif outcome == "consent_search":
        r = r[r["state"].isin(CONSENT_STATES) & r["search_conducted"].notna()]
        types = r["search_types"].fillna("").astype(str).str.split("|")
        y = (r["search_conducted"].astype(bool) & types.map(lambda v: "Consent" in v)).astype(float)
    elif outcome == "arrest":
        r = r[r["outcome"] != "Unknown"]
        y = (r["outcome"] == "Arrest").astype(float)
    else:
        raise ValueError(f"unknown outcome {outcome!r}; expected one of {OUTCOMES}")
    return r.assign(y=y.to_numpy())


def poststop_analysis(
    records: pd.DataFrame, outcome: str, controls: str = "race+location+time+demo", keep_frame: bool = False
) -> PoststopFit:
    """Logistic regression of a post-stop outcome on race plus controls.

    States lacking a field required by the outcome or the control set
    (present for fewer than 70% of their stops) are dropped and reported;
    remaining rows with missing covariates are dropped and counted.
    """
    if controls not in CONTROL_SPECS:
        raise ValueError(f"unknown control spec {controls!r}; expected one of {list(CONTROL_SPECS)}")
    groups = CONTROL_SPECS[controls]
    needed = list(_OUTCOME_FIELDS[outcome]) + [f for g in groups for f in _CONTROL_FIELDS[g]]
    frame = outcome_frame(records, outcome)
    if frame.empty:
        raise CoverageError(f"no records eligible for {outcome}")
    avail = field_availability(records[records["state"].isin(frame["state"].unique())], needed)
    dropped = {}
    for state, row in avail.iterrows():
        short = [f for f in needed if row[f] < AVAILABILITY]
        if short:
            dropped[state] = "insufficient " + ", ".join(short)
    frame = frame[~frame["state"].isin(dropped)]
    if dropped:
        log.info("%s/%s: dropped states %s", outcome, controls, sorted(dropped))
    cov = pd.DataFrame({"y": frame["y"].to_numpy(), "race": frame["driver_race"].to_numpy()})
    factors: dict[str, str | None] = {"race": "White"}
    if "location" in groups:
        cov["location"] = (frame["state"].astype(str) + ":" + frame["location"].astype(str)).where(
            frame["location"].notna()
        ).to_numpy()
        factors["location"] = None
    if "time" in groups:
        dates = pd.to_datetime(frame["stop_date"])
        cov["year"] = dates.dt.year.astype("Int64").astype(str).where(dates.notna()).to_numpy()
        cov["quarter"] = ("Q" + dates.dt.quarter.astype("Int64").astype(str)).where(dates.notna()).to_numpy()
        cov["weekday"] = dates.dt.day_name().to_numpy()
        cov["hour"] = hour_bin(frame["stop_time"]).to_numpy()
        factors.update({"year": None, "quarter": None, "weekday": "Monday", "hour": HOUR_BINS[0]})
    if "demo" in groups:
        cov["age_bin"] = age_bin(frame["driver_age"]).to_numpy()
        cov["gender"] = frame["driver_gender"].where(frame["driver_gender"].isin(("Male", "Female"))).to_numpy()
        factors.update({"age_bin": "16-19", "gender": "Female"})
    complete = cov.notna().all(axis=1)
    n_drop = int((~complete).sum())
    cov = cov[complete]
    if cov.empty:
        raise CoverageError(f"no complete rows for {outcome} with {controls}")
    refs = {}
    for name, ref in factors.items():
        if ref is not None and ref not in set(cov[name]):
            ref = None
        refs[name] = ref
    design = Design.from_frame(cov, "y", refs, collapse=True)
    fit = fit_logistic(design)
    states = sorted(frame.loc[complete.to_numpy(), "state"].unique())
    fit.metadata.update(
        {
            "analysis": "poststop",
            "outcome": outcome,
            "controls": controls,
            "states": states,
            "dropped_states": dropped,
            "dropped_rows": n_drop,
            "level_weights": _level_weights(cov, [c for c in factors if c not in ("race", "age_bin", "gender")], None),
        }
    )
    return PoststopFit(fit, outcome, controls, states, dropped, n_drop, cov if keep_frame else None)


def typical_driver_rates(
    fit: FitResult, age: str = "20-29", gender: str = "Male", races: Sequence[str] = RACES
) -> pd.DataFrame:
    """Model rates for a typical driver of each race.

    Factors other than race/age/gender are averaged over their levels with
    the stop-count weights recorded in ``fit.metadata['level_weights']``
    (weighted average of the linear predictor).
    """
    weights = fit.metadata.get("level_weights", {})
    rows = []
    for race in races:
        profile: dict = {}
        for fac in fit.factors:
            if fac.name == "race":
                profile["race"] = race
            elif fac.name == "age_bin":
                profile["age_bin"] = age
            elif fac.name == "gender":
                profile["gender"] = gender
            else:
                w = weights.get(fac.name)
                if not w:
                    raise KeyError(f"no level weights recorded for {fac.name}")
                profile[fac.name] = w
        rows.append({"race": race, "rate": predict_rate(fit, profile)})
    out = pd.DataFrame(rows)
    out.attrs["marginalization"] = "stop-weighted average of the linear predictor over location/time levels"
    return out


# -- outcome test ----------------------------------------------------------


@dataclass
class OutcomeTest:
    locations: pd.DataFrame  # HitRateRow per (race, state, location)
    aggregate: pd.DataFrame  # by race


def outcome_test(records: pd.DataFrame, races: Sequence[str] = RACES) -> OutcomeTest:
    """Hit rates per (race, location) and aggregated by race.

    Location rows need a location; the aggregate uses every searched stop
    with a contraband value, including states without location data.
    A location with no searches of a race still gets a row, flagged
    ``undefined``.
    """
    r = records[records["driver_race"].isin(races) & records["search_conducted"].notna()]
    searched = r[r["search_conducted"].astype(bool) & r["contraband_found"].notna()]
    searched = searched.assign(hit=searched["contraband_found"].astype(bool).astype(np.int64))
    agg = searched.groupby("driver_race")["hit"].agg(searches="size", hits="sum").reindex(list(races), fill_value=0)
    agg = agg.reset_index().rename(columns={"driver_race": "race"})
    agg["hit_rate"] = np.where(agg["searches"] > 0, agg["hits"] / agg["searches"].clip(lower=1), np.nan)

    located = r[r["location"].notna()]
    grid = located[["state", "location"]].drop_duplicates()
    grid = grid.merge(pd.DataFrame({"race": list(races)}), how="cross")
    s = searched[searched["location"].notna()]
    counts = s.groupby(["driver_race", "state", "location"])["hit"].agg(searches="size", hits="sum").reset_index()
    counts = counts.rename(columns={"driver_race": "race"})
    loc = grid.merge(counts, on=["race", "state", "location"], how="left").fillna({"searches": 0, "hits": 0})
    loc[["searches", "hits"]] = loc[["searches", "hits"]].astype(np.int64)
    loc["undefined"] = loc["searches"] == 0
    loc["hit_rate"] = np.where(loc["undefined"], np.nan, loc["hits"] / loc["searches"].clip(lower=1))
    loc = loc.sort_values(["state", "location", "race"], kind="mergesort").reset_index(drop=True)
    return OutcomeTest(loc[["race", "state", "location", "searches", "hits", "hit_rate", "undefined"]], agg)


def weighted_hit_rate(rows: pd.DataFrame) -> Fraction:
    """Search-weighted mean of location hit rates, in exact arithmetic."""
    rows = rows[rows["searches"] > 0]
    total = sum(int(s) for s in rows["searches"])
    return sum(Fraction(int(h), int(s)) * Fraction(int(s), total) for h, s in zip(rows["hits"], rows["searches"]))


def infra_marginality(types: Mapping[str, Sequence[tuple[float, float]]], threshold: float) -> dict[str, float]:
    """Hit rates when every driver above a common threshold is searched.

    ``types`` maps race -> [(population share, probability of carrying
    contraband), ...]; drivers whose probability is at least ``threshold``
    are searched, and the hit rate is the share-weighted mean probability
    among them.
    """
    t = Fraction(threshold)
    out = {}
    for race, mix in types.items():
        # exact rational arithmetic on the binary values given
        searched = [(Fraction(s), Fraction(p)) for s, p in mix if Fraction(p) >= t]
        mass = sum(s for s, _ in searched)
        out[race] = float(sum(s * p for s, p in searched) / mass) if mass > 0 else float("nan")
    return out


# -- plot data ---------------------------------------------------------------


def stop_rate_plot_data(cells: pd.DataFrame, min_stops: int = 0) -> pd.DataFrame:
    """Stops per person of driving age by race and location."""
    g = cells.groupby(["location", "race"], as_index=False)[["stops", "benchmark_pop"]].sum()
    g["stop_rate"] = np.where(g["benchmark_pop"] > 0, g["stops"] / g["benchmark_pop"].clip(lower=1), np.nan)
    totals = g.groupby("location")["stops"].transform("sum")
    g = g[totals >= min_stops]
    return _widen(g, "stop_rate", "stops")


def poststop_rate_plot_data(records: pd.DataFrame, outcome: str = "search", min_stops: int = 0) -> pd.DataFrame:
    """Search or arrest rates among stopped drivers by race and location."""
    f = outcome_frame(records, outcome)
    f = f[f["location"].notna()]
    g = (
        f.groupby([f["state"].astype(str) + ":" + f["location"].astype(str), "driver_race"])["y"]
        .agg(stops="size", events="sum")
        .reset_index()
    )
    g.columns = ["location", "race", "stops", "events"]
    g[f"{outcome}_rate"] = g["events"] / g["stops"]
    totals = g.groupby("location")["stops"].transform("sum")
    g = g[totals >= min_stops]
    return _widen(g, f"{outcome}_rate", "stops")


def hit_rate_plot_data(test: OutcomeTest, min_searches: int = 0) -> pd.DataFrame:
    g = test.locations.assign(location=test.locations["state"].astype(str) + ":" + test.locations["location"].astype(str))
    g = g[~g["undefined"]]
    totals = g.groupby("location")["searches"].transform("sum")
    g = g[totals >= min_searches]
    return _widen(g[["location", "race", "hit_rate", "searches"]], "hit_rate", "searches")


def _widen(g: pd.DataFrame, value: str, size: str) -> pd.DataFrame:
    """One row per minority race x location with the white value alongside."""
    white = g[g["race"] == "White"][["location", value, size]].rename(
        columns={value: f"white_{value}", size: f"white_{size}"}
    )
    minority = g[g["race"] != "White"]
    out = minority.merge(white, on="location", how="inner")
    return out.sort_values(["race", "location"], kind="mergesort").reset_index(drop=True)
