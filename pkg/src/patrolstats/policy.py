"""Marijuana-legalization analyses: quarterly trends, difference-in-differences, innocent searches."""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .glm import Design, FitResult, fit_logistic

log = logging.getLogger(__name__)

RACES = ("White", "Black", "Hispanic")
PROCEDURAL_SEARCHES = frozenset({"IncidentToArrest", "Inventory", "Warrant"})
DID_OUTCOMES = ("search", "drug_misdemeanor")


class PolicyDataError(ValueError):
    pass


@dataclass(frozen=True)
class DidSpec:
    """Treated/control split around a legalization date.

    ``control_states=None`` uses every non-treated state in the data.
    """

    treated_states: frozenset = frozenset({"CO", "WA"})
    control_states: frozenset | None = None
    legalization_date: dt.date = dt.date(2012, 12, 31)
    outcome: str = "search"
    excluded_search_types: frozenset = PROCEDURAL_SEARCHES
    races: tuple[str, ...] = RACES

    def __post_init__(self):
        object.__setattr__(self, "treated_states", frozenset(s.upper() for s in self.treated_states))
        if self.control_states is not None:
            object.__setattr__(self, "control_states", frozenset(s.upper() for s in self.control_states))
            if self.treated_states & self.control_states:
                raise ValueError("treated and control states overlap")
        object.__setattr__(self, "excluded_search_types", frozenset(self.excluded_search_types))
        if self.outcome not in DID_OUTCOMES:
            raise ValueError(f"outcome must be one of {DID_OUTCOMES}")


def _years_since(dates: pd.Series, origin: dt.date) -> np.ndarray:
    return ((pd.to_datetime(dates) - pd.Timestamp(origin)).dt.days / 365.25).to_numpy()


def outcome_rows(records: pd.DataFrame, spec: DidSpec) -> pd.DataFrame:
    """Stops in the spec's states with a 0/1 ``y`` for the outcome.

    For the search outcome, stops whose searches are all of an excluded
    (procedural) type are removed; ``drug_misdemeanor`` must be a column
    prepared upstream with each state's definition.
    """
    states = spec.treated_states | (spec.control_states or frozenset(records["state"].unique()))
    r = records[records["state"].isin(states) & records["driver_race"].isin(spec.races) & records["stop_date"].notna()]
    if spec.outcome == "search":
        r = r[r["search_conducted"].notna()]
        if "search_types" in r and spec.excluded_search_types:
            types = r["search_types"].fillna("").astype(str).str.split("|")
            procedural = r["search_conducted"].astype(bool) & types.map(
                lambda v: bool(v) and v != [""] and set(v) <= spec.excluded_search_types
            )
            r = r[~procedural.to_numpy()]
        y = r["search_conducted"].astype(bool)
    else:
        if "drug_misdemeanor" not in r:
            raise PolicyDataError("records lack a drug_misdemeanor column")
        r = r[r["drug_misdemeanor"].notna()]
        y = r["drug_misdemeanor"].astype(bool)
    t = _years_since(r["stop_date"], spec.legalization_date)
    z = r["state"].isin(spec.treated_states).to_numpy() & (t > 0)
    return r.assign(y=y.astype(float).to_numpy(), t=t, z=z)


@dataclass
class DidResult:
    fit: FitResult
    spec: DidSpec
    n: int

    def table(self) -> pd.DataFrame:
        rows = []
        for race in self.spec.races:
            rows.append(self._row(f"Effect of legalization on {race} drivers", f"Z:{race}"))
        rows.append(self._row("Time (years)", "t"))
        for race in self.spec.races[1:]:
            rows.append(self._row(f"{race} driver", f"race[{race}]"))
        return pd.DataFrame(rows)

    def _row(self, label, name):
        return {"term": label, "name": name, "coef": self.fit[name], "std_error": self.fit.stderr(name)}

    def alpha(self, race: str) -> tuple[float, float]:
        name = f"Z:{race}"
        return self.fit[name], self.fit.stderr(name)


def did_fit(records: pd.DataFrame, spec: DidSpec | None = None) -> DidResult:
    """Logistic difference-in-differences fit.

    ``logit P(Y=1) = sum_s b_s I_s + sum_r b_r I_r + b_t t + sum_r a_r I_r Z``
    with no intercept, a fixed effect for every state, race effects for the
    non-reference races, ``t`` in years since legalization, and ``Z`` marking
    post-legalization stops in treated states.
    """
    spec = spec or DidSpec()
    rows = outcome_rows(records, spec)
    treated = rows["state"].isin(spec.treated_states)
    if not treated.any():
        raise PolicyDataError("no stops from treated states")
    if treated.all():
        raise PolicyDataError("no stops from control states")
    if not rows["z"].any():
        raise PolicyDataError(
            "treatment indicator is identically zero (legalization date outside the data window?); "
            "the race x treatment effects are not identified"
        )
    frame = pd.DataFrame(
        {"y": rows["y"].to_numpy(), "state": rows["state"].to_numpy(), "race": rows["driver_race"].to_numpy(), "t": rows["t"]}
    )
    for race in spec.races:
        col = (rows["z"] & (rows["driver_race"] == race).to_numpy()).astype(float)
        if not col.any():
            raise PolicyDataError(f"no post-legalization stops of {race} drivers in treated states")
        frame[f"Z:{race}"] = col
    zcols = [f"Z:{r}" for r in spec.races]
    design = Design.from_frame(
        frame,
        "y",
        {"state": None, "race": spec.races[0]},
        numeric=["t"] + zcols,
        intercept=False,
        collapse=True,
        levels={"race": list(spec.races)},
    )
    fit = fit_logistic(design)
    fit.metadata.update(
        {
            "analysis": "did",
            "treated_states": sorted(spec.treated_states),
            "control_states": sorted(set(rows["state"]) - spec.treated_states),
            "legalization_date": spec.legalization_date.isoformat(),
            "outcome": spec.outcome,
            "excluded_search_types": sorted(spec.excluded_search_types),
        }
    )
    return DidResult(fit, spec, len(rows))


@dataclass
class TrendResult:
    series: pd.DataFrame  # per (state, race, quarter)
    trends: pd.DataFrame  # per (state, race, period) OLS line


def _ols(t: np.ndarray, y: np.ndarray) -> dict:
    n = len(t)
    if n < 2:
        return {"intercept": np.nan, "slope": np.nan, "intercept_se": np.nan, "slope_se": np.nan, "n": n}
    X = np.column_stack([np.ones(n), t])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = n - 2
    sigma2 = float(resid @ resid) / dof if dof > 0 else np.nan
    cov = sigma2 * np.linalg.inv(X.T @ X)
    return {
        "intercept": float(coef[0]),
        "slope": float(coef[1]),
        "intercept_se": float(np.sqrt(cov[0, 0])),
        "slope_se": float(np.sqrt(cov[1, 1])),
        "n": n,
    }


def trend_series(records: pd.DataFrame, spec: DidSpec | None = None, outcome: str | None = None) -> TrendResult:
    """Quarterly outcome rates per state and race with pre/post OLS trend lines.

    Time is measured in years since legalization at each quarter's midpoint;
    the pre line uses quarters ending on or before the legalization date and
    the post line the quarters after it.  Intercepts are at ``t = 0``, so
    ``post.intercept - pre.intercept`` is the level change at legalization.
    """
    spec = spec or DidSpec()
    if outcome is not None:
        spec = DidSpec(**{**spec.__dict__, "outcome": outcome})
    rows = outcome_rows(records, spec)
    quarter = pd.to_datetime(rows["stop_date"]).dt.to_period("Q")
    g = (
        rows.assign(quarter=quarter)
        .groupby(["state", "driver_race", "quarter"])["y"]
        .agg(stops="size", events="sum")
        .reset_index()
        .rename(columns={"driver_race": "race"})
    )
    g["events"] = g["events"].astype(np.int64)
    g["rate"] = g["events"] / g["stops"]
    start = g["quarter"].dt.start_time
    end = g["quarter"].dt.end_time
    mid = start + (end - start) / 2
    g["t"] = _years_since(mid, spec.legalization_date)
    legal = pd.Timestamp(spec.legalization_date) + pd.Timedelta(days=1)
    g["period"] = np.where(end < legal, "pre", np.where(start >= legal, "post", "straddle"))
    g["panel"] = np.where(g["state"].isin(spec.treated_states), "treated", "control")
    g["quarter"] = g["quarter"].astype(str)
    trends = []
    for (state, race, period), part in g[g["period"] != "straddle"].groupby(["state", "race", "period"]):
        trends.append({"state": state, "race": race, "period": period, **_ols(part["t"].to_numpy(), part["rate"].to_numpy())})
    trend_frame = pd.DataFrame(trends)
    series = g.sort_values(["panel", "state", "race", "quarter"], kind="mergesort").reset_index(drop=True)
    return TrendResult(series, trend_frame)


def level_change(trends: pd.DataFrame, state: str, race: str) -> tuple[float, float]:
    """Post minus pre intercept at legalization, with its standard error."""
    part = trends[(trends["state"] == state) & (trends["race"] == race)].set_index("period")
    gap = part.loc["post", "intercept"] - part.loc["pre", "intercept"]
    se = float(np.hypot(part.loc["post", "intercept_se"], part.loc["pre", "intercept_se"]))
    return float(gap), se


def innocent_search_delta(records: pd.DataFrame, spec: DidSpec | None = None) -> float:
    """Relative change in searches that found no contraband, year after vs year before.

    Counts cover the treated states; procedural searches are excluded as in
    the search outcome.
    """
    spec = spec or DidSpec()
    if "contraband_found" not in records or records["contraband_found"].isna().all():
        raise PolicyDataError("contraband field missing")
    rows = outcome_rows(records, DidSpec(**{**spec.__dict__, "outcome": "search"}))
    rows = rows[rows["state"].isin(spec.treated_states) & (rows["y"] == 1)]
    rows = rows[rows["contraband_found"].notna()]
    innocent = ~rows["contraband_found"].astype(bool)
    day = pd.Timestamp(spec.legalization_date)
    dates = pd.to_datetime(rows["stop_date"])
    pre = int((innocent & (dates > day - pd.DateOffset(years=1)) & (dates <= day)).sum())
    post = int((innocent & (dates > day) & (dates <= day + pd.DateOffset(years=1))).sum())
    covered_pre = (pd.to_datetime(records["stop_date"]) <= day - pd.DateOffset(years=1) + pd.Timedelta(days=31)).any()
    covered_post = (pd.to_datetime(records["stop_date"]) >= day + pd.DateOffset(years=1) - pd.Timedelta(days=31)).any()
    if not (covered_pre and covered_post):
        raise PolicyDataError("need a full year of data on both sides of the legalization date")
    if pre == 0:
        raise PolicyDataError("no innocent searches in the year before legalization")
    return (post - pre) / pre
