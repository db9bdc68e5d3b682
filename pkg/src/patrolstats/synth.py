"""Synthetic data drawn from the models the analyses assume.

Every generator returns the data together with the truth used to produce
it, so recovery tests never re-derive expected values.  Each group (or
state) draws from its own random stream keyed on ``(seed, group)``.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from .numerics import make_rng
from .threshold import RACES, ThresholdData

AGE_BINS = ("16-19", "20-29", "30-39", "40-49", "50+")
_AGE_SPAN = {"16-19": (16, 19), "20-29": (20, 29), "30-39": (30, 39), "40-49": (40, 49), "50+": (50, 79)}


@dataclass
class ThresholdSynthConfig:
    seed: int = 0
    races: tuple[str, ...] = RACES
    n_locations: int = 20
    stops_per_group: int = 10_000
    signal_mean: tuple[float, ...] = (0.04, 0.05, 0.045)
    signal_count: tuple[float, ...] = (5.0, 4.0, 4.5)
    location_sd: float = 0.3
    threshold_range: tuple[float, float] = (0.1, 0.3)
    thresholds: np.ndarray | None = None
    post_threshold_shift: float | None = None
    replicate: int = 0  # same parameters, independent stop-level draws


@dataclass
class ThresholdTruth:
    races: list[str]
    locations: list[str]
    phi: np.ndarray
    lam: np.ndarray
    thresholds: np.ndarray
    post_thresholds: np.ndarray | None = None

    def aggregate(self, stops: np.ndarray | None = None, post: bool = False) -> dict[str, float]:
        """Stop-weighted race-level thresholds (weights: total stops per location)."""
        t = self.post_thresholds if post else self.thresholds
        w = np.ones(t.shape[1]) if stops is None else stops.sum(axis=0)
        return {race: float(t[r] @ w / w.sum()) for r, race in enumerate(self.races)}

    def to_json(self) -> dict:
        out = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        out["aggregate"] = self.aggregate()
        return out


def gen_threshold(config: ThresholdSynthConfig | None = None, **overrides) -> tuple[ThresholdData, ThresholdTruth]:
    """Simulate stops stop-by-stop: signal, search iff signal >= threshold, hit ~ Bernoulli(signal).

    With ``post_threshold_shift`` set, every group is simulated twice (periods
    'pre' and 'post'), the post threshold shifted by that amount.
    """
    config = config or ThresholdSynthConfig()
    if overrides:
        config = ThresholdSynthConfig(**{**config.__dict__, **overrides})
    R, D = len(config.races), config.n_locations
    rng = make_rng(config.seed, 0)
    loc_phi = rng.normal(0.0, config.location_sd, D)
    loc_lam = rng.normal(0.0, config.location_sd, D)
    phi = expit(logit(np.asarray(config.signal_mean))[:, None] + loc_phi[None, :])
    lam = np.exp(np.log(np.asarray(config.signal_count))[:, None] + loc_lam[None, :])
    if config.thresholds is not None:
        thresholds = np.broadcast_to(np.asarray(config.thresholds, dtype=float), (R, D)).copy()
    else:
        lo, hi = config.threshold_range
        thresholds = rng.uniform(lo, hi, (R, D))
    periods = [("pre", thresholds)]
    post = None
    if config.post_threshold_shift is not None:
        post = np.clip(thresholds + config.post_threshold_shift, 0.0, 1.0)
        periods.append(("post", post))
    rows = []
    g = 0
    for period, t in periods:
        for r in range(R):
            for d in range(D):
                stream = make_rng(config.seed, 1 + g + config.replicate * 2**32)
                g += 1
                p = stream.beta(phi[r, d] * lam[r, d], (1 - phi[r, d]) * lam[r, d], config.stops_per_group)
                searched = p >= t[r, d]
                hits = stream.random(config.stops_per_group) < p
                rows.append(
                    {
                        "race": config.races[r],
                        "location": f"L{d:03d}",
                        "period": period,
                        "stops": config.stops_per_group,
                        "searches": int(searched.sum()),
                        "hits": int((searched & hits).sum()),
                    }
                )
    frame = pd.DataFrame(rows)
    if post is None:
        frame = frame.drop(columns="period")
    data = ThresholdData.from_frame(frame, races=config.races)
    truth = ThresholdTruth(
        races=list(config.races),
        locations=[f"L{d:03d}" for d in range(D)],
        phi=phi,
        lam=lam,
        thresholds=thresholds,
        post_thresholds=post,
    )
    return data, truth


@dataclass
class CountSynthConfig:
    seed: int = 0
    intercept: float = -2.5
    race_effects: dict = field(default_factory=lambda: {"White": 0.0, "Black": 0.37, "Hispanic": -0.40})
    age_effects: dict = field(
        default_factory=lambda: {"16-19": 0.0, "20-29": 0.65, "30-39": 0.47, "40-49": 0.25, "50+": -0.53}
    )
    gender_effects: dict = field(default_factory=lambda: {"Female": 0.0, "Male": 0.72})
    n_locations: int = 30
    location_sd: float = 0.5
    years: tuple[int, ...] = (2011, 2012, 2013, 2014, 2015)
    year_sd: float = 0.1
    population_range: tuple[int, int] = (200, 5000)
    dispersion: float | None = 4.0


def gen_counts(config: CountSynthConfig | None = None, **overrides) -> tuple[pd.DataFrame, dict]:
    """Stop counts per (race, age, gender, location, year) cell.

    ``stops ~ NegBin(population * exp(eta), dispersion)`` with variance
    ``mu + mu^2 / dispersion``; ``dispersion=None`` gives Poisson counts.
    """
    config = config or CountSynthConfig()
    if overrides:
        config = CountSynthConfig(**{**config.__dict__, **overrides})
    rng = make_rng(config.seed, 0)
    locations = [f"L{d:03d}" for d in range(config.n_locations)]
    loc_eff = dict(zip(locations, np.r_[0.0, rng.normal(0, config.location_sd, config.n_locations - 1)]))
    year_eff = dict(zip(config.years, np.r_[0.0, rng.normal(0, config.year_sd, len(config.years) - 1)]))
    index = pd.MultiIndex.from_product(
        [list(config.race_effects), list(config.age_effects), list(config.gender_effects), locations, list(config.years)],
        names=["race", "age_bin", "gender", "location", "year"],
    )
    cells = index.to_frame(index=False)
    lo, hi = config.population_range
    cells["benchmark_pop"] = rng.integers(lo, hi + 1, len(cells))
    eta = (
        config.intercept
        + cells["race"].map(config.race_effects).to_numpy()
        + cells["age_bin"].map(config.age_effects).to_numpy()
        + cells["gender"].map(config.gender_effects).to_numpy()
        + cells["location"].map(loc_eff).to_numpy()
        + cells["year"].map(year_eff).to_numpy()
    )
    mu = cells["benchmark_pop"].to_numpy() * np.exp(eta)
    counts = np.empty(len(cells), dtype=np.int64)
    # one stream per location
    for d, loc in enumerate(locations):
        mask = (cells["location"] == loc).to_numpy()
        stream = make_rng(config.seed, 1 + d)
        if config.dispersion is None:
            counts[mask] = stream.poisson(mu[mask])
        else:
            k = config.dispersion
            counts[mask] = stream.negative_binomial(k, k / (k + mu[mask]))
    cells["stops"] = counts
    cells["year"] = cells["year"].astype(int)
    truth = {
        "intercept": config.intercept,
        "race": config.race_effects,
        "age_bin": config.age_effects,
        "gender": config.gender_effects,
        "location": {k: float(v) for k, v in loc_eff.items()},
        "year": {int(k): float(v) for k, v in year_eff.items()},
        "dispersion": config.dispersion,
        "mean": mu,
    }
    return cells, truth


@dataclass
class BinarySynthConfig:
    seed: int = 0
    n: int = 100_000
    outcome: str = "search_conducted"
    intercept: float = -3.0
    race_shares: dict = field(default_factory=lambda: {"White": 0.6, "Black": 0.2, "Hispanic": 0.2})
    race_effects: dict = field(default_factory=lambda: {"White": 0.0, "Black": 0.7, "Hispanic": 0.5})
    states: tuple[str, ...] = ("CO", "WA", "AZ", "CT", "FL", "IL", "MA", "MT")
    state_sd: float = 0.3
    locations_per_state: int = 3
    location_sd: float = 0.0
    gender_effects: dict = field(default_factory=lambda: {"Female": 0.0, "Male": 0.0})
    age_effects: dict = field(default_factory=lambda: {b: 0.0 for b in AGE_BINS})
    start: dt.date = dt.date(2011, 1, 1)
    end: dt.date = dt.date(2015, 12, 31)
    time_trend: float = 0.0
    treated_states: tuple[str, ...] = ()
    legalization_date: dt.date = dt.date(2012, 12, 31)
    treatment_effects: dict = field(default_factory=dict)


def years_since(dates: pd.Series, origin: dt.date) -> np.ndarray:
    return ((pd.to_datetime(dates) - pd.Timestamp(origin)).dt.days / 365.25).to_numpy()


def gen_binary(config: BinarySynthConfig | None = None, **overrides) -> tuple[pd.DataFrame, dict]:
    """Stop-level records with a Bernoulli outcome from a known logistic model.

    The linear predictor is intercept + state + location + race + gender + age
    + trend * (years since legalization) + treatment effect[race] * Z, where
    Z marks stops in treated states after the legalization date.
    """
    config = config or BinarySynthConfig()
    if overrides:
        config = BinarySynthConfig(**{**config.__dict__, **overrides})
    rng = make_rng(config.seed, 0)
    state_eff = dict(zip(config.states, rng.normal(0, config.state_sd, len(config.states))))
    races = list(config.race_shares)
    shares = np.array([config.race_shares[r] for r in races], dtype=float)
    shares /= shares.sum()
    days = (config.end - config.start).days + 1
    per_state = np.full(len(config.states), config.n // len(config.states))
    per_state[: config.n % len(config.states)] += 1
    frames = []
    for s, (state, m) in enumerate(zip(config.states, per_state)):
        stream = make_rng(config.seed, 1 + s)
        loc_eff = stream.normal(0, config.location_sd, config.locations_per_state) if config.location_sd else np.zeros(
            config.locations_per_state
        )
        race = np.array(races)[stream.choice(len(races), m, p=shares)]
        loc = stream.integers(0, config.locations_per_state, m)
        gender = np.array(list(config.gender_effects))[stream.integers(0, len(config.gender_effects), m)]
        bin_index = stream.integers(0, len(AGE_BINS), m)
        age_bin = np.array(AGE_BINS)[bin_index]
        span = np.array([_AGE_SPAN[b] for b in AGE_BINS])[bin_index]
        age = stream.integers(span[:, 0], span[:, 1] + 1)
        date = np.datetime64(config.start) + stream.integers(0, days, m).astype("timedelta64[D]")
        minute = stream.integers(0, 24 * 60, m)
        frame = pd.DataFrame(
            {
                "state": state,
                "stop_date": pd.to_datetime(date),
                "stop_time": minute,
                "location": [f"{state}-{k:02d}" for k in loc],
                "driver_race": race,
                "driver_gender": gender,
                "driver_age": age,
            }
        )
        t = years_since(frame["stop_date"], config.legalization_date)
        z = (state in config.treated_states) & (frame["stop_date"] > pd.Timestamp(config.legalization_date)).to_numpy()
        eta = (
            config.intercept
            + state_eff[state]
            + loc_eff[loc]
            + frame["driver_race"].map(config.race_effects).to_numpy()
            + frame["driver_gender"].map(config.gender_effects).to_numpy()
            + pd.Series(age_bin).map(config.age_effects).to_numpy()
            + config.time_trend * t
            + z * frame["driver_race"].map(lambda r: config.treatment_effects.get(r, 0.0)).to_numpy()
        )
        frame[config.outcome] = stream.random(m) < expit(eta)
        frames.append(frame)
    records = pd.concat(frames, ignore_index=True)
    truth = {
        "intercept": config.intercept,
        "state": {k: float(v) for k, v in state_eff.items()},
        "race": dict(config.race_effects),
        "time_trend": config.time_trend,
        "treatment": dict(config.treatment_effects),
        "treated_states": list(config.treated_states),
        "legalization_date": config.legalization_date.isoformat(),
    }
    return records, truth


def write_truth(truth, path: str | Path) -> None:
    """Serialize a truth record next to generated data."""

    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.integer, np.floating)):
            return o.item()
        if hasattr(o, "to_json"):
            return o.to_json()
        raise TypeError(type(o))

    payload = truth.to_json() if hasattr(truth, "to_json") else truth
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=default))
