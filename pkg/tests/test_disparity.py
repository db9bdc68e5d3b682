from fractions import Fraction

import numpy as np
import pandas as pd
import pytest

from patrolstats.disparity import (
    CONTROL_SPECS,
    CoverageError,
    age_bin,
    aggregate_census,
    build_cells,
    field_availability,
    hit_rate_plot_data,
    hour_bin,
    infra_marginality,
    outcome_frame,
    outcome_test,
    poststop_analysis,
    poststop_rate_plot_data,
    stop_rate_analysis,
    stop_rate_plot_data,
    typical_driver_rates,
    weighted_hit_rate,
)
from patrolstats.synth import gen_binary, gen_counts


def test_bins():
    bins = age_bin([15, 16, 19, 20, 49, 50, 99, None])
    assert list(bins.fillna("-")) == ["-", "16-19", "16-19", "20-29", "40-49", "50+", "50+", "-"]
    assert list(hour_bin([0, 179, 180, 1439, None])) == ["00-02", "00-02", "03-05", "21-23", None]


def test_infra_marginality_worked_example():
    # two easily distinguished types per race (5% or 75% white, 5% or 50% black), common 10% threshold
    for share in (0.1, 0.5, 0.9):
        types = {"White": [(1 - share, 0.05), (share, 0.75)], "Black": [(1 - share, 0.05), (share, 0.50)]}
        assert infra_marginality(types, threshold=0.10) == {"White": 0.75, "Black": 0.5}


def test_weighted_hit_rate_exact():
    rows = pd.DataFrame({"searches": [3, 0, 7], "hits": [1, 0, 2]})
    assert weighted_hit_rate(rows) == Fraction(3, 10)


def small_records():
    return pd.DataFrame(
        {
            "state": ["CO"] * 6 + ["WA"] * 2,
            "location": ["a", "a", "b", "b", "b", None, "w", "w"],
            "driver_race": ["White", "Black", "White", "Black", "Hispanic", "White", "White", "Black"],
            "search_conducted": pd.array([True, True, True, False, True, True, True, True], dtype="boolean"),
            "contraband_found": pd.array([True, False, False, False, True, True, None, True], dtype="boolean"),
        }
    )


def test_outcome_test_counts():
    res = outcome_test(small_records())
    agg = res.aggregate.set_index("race")
    # WA white search lacks a contraband value; the unlocated CO stop counts in the aggregate
    assert agg.loc["White", "searches"] == 3 and agg.loc["White", "hits"] == 2
    assert agg.loc["Black", "searches"] == 2 and agg.loc["Black", "hits"] == 1
    loc = res.locations.set_index(["race", "state", "location"])
    assert loc.loc[("Hispanic", "CO", "a"), "undefined"]
    assert loc.loc[("Hispanic", "CO", "b"), "hit_rate"] == 1.0
    plot = hit_rate_plot_data(res)
    assert set(plot.columns) >= {"location", "race", "hit_rate", "white_hit_rate"}
    assert "CO:a" in set(plot.location)


def test_stop_rate_recovers_effects():
    cells, truth = gen_counts(seed=11, n_locations=25)
    fit = stop_rate_analysis(cells, "NegBin")
    for race in ("Black", "Hispanic"):
        est, se = fit[f"race[{race}]"], fit.stderr(f"race[{race}]")
        assert abs(est - truth["race"][race]) < 3 * se
    assert fit.dispersion == pytest.approx(4.0, rel=0.25)
    typical = typical_driver_rates(fit).set_index("race")["rate"]
    assert typical["Black"] / typical["White"] == pytest.approx(np.exp(fit["race[Black]"]))
    # the typical-driver rate averages location/year effects by stops
    w = fit.metadata["level_weights"]["location"]
    assert sum(w.values()) == cells["stops"].sum()
    sandwich = stop_rate_analysis(cells, "Poisson", sandwich=True)
    assert sandwich.cov_type.startswith("sandwich")
    plot = stop_rate_plot_data(cells)
    assert len(plot) == 2 * 25
    assert len(stop_rate_plot_data(cells, min_stops=10**9)) == 0


def test_zero_population_is_a_coverage_error():
    cells, _ = gen_counts(seed=1, n_locations=3)
    cells.loc[0, "benchmark_pop"] = 0
    with pytest.raises(CoverageError):
        stop_rate_analysis(cells)


def test_build_cells_and_coverage():
    census = pd.DataFrame(
        [
            {"location": loc, "race": r, "age_bin": a, "gender": g, "year": 2014, "population": 100}
            for loc in ("X", "Y")
            for r in ("White", "Black", "Hispanic")
            for a in ("16-19", "20-29", "30-39", "40-49", "50+")
            for g in ("Female", "Male")
        ]
    )
    records = pd.DataFrame(
        {
            "state": "CO",
            "driver_race": ["White", "Black", "Black", "White", "White"],
            "driver_age": pd.array([25, 33, 12, 60, None], dtype="Int64"),
            "driver_gender": ["Male", "Female", "Male", "Male", "Female"],
            "location": ["X", "X", "X", "Z", "Y"],
            "stop_date": pd.to_datetime(["2014-01-01"] * 5),
        }
    )
    built = build_cells(records, census)
    assert len(built.cells) == len(census)
    assert built.cells["stops"].sum() == 2
    assert built.excluded == 3
    assert built.n_records == 5
    merged = aggregate_census(census, {"X": "D1", "Y": "D1"})
    assert set(merged.location) == {"D1"} and merged.population.iloc[0] == 200


def test_poststop_recovers_race_effects_and_drops_states():
    recs, truth = gen_binary(seed=3, n=60_000)
    # WA loses its stop times: dropped for the time controls, kept otherwise
    recs.loc[recs.state == "WA", "stop_time"] = np.nan
    res = poststop_analysis(recs, "search", "race+location+time+demo")
    assert "WA" in res.dropped_states and "WA" not in res.states
    coefs = res.race_coefficients().set_index("race")
    for race in ("Black", "Hispanic"):
        assert abs(coefs.loc[race, "estimate"] - truth["race"][race]) < 3 * coefs.loc[race, "std_error"]
    base = poststop_analysis(recs, "search", "race")
    assert "WA" in base.states and not base.dropped_states
    typical = typical_driver_rates(res.fit)
    assert list(typical.race) == ["White", "Black", "Hispanic"]
    with pytest.raises(ValueError):
        poststop_analysis(recs, "search", "race+weather")


def test_outcome_frame_definitions():
    recs = pd.DataFrame(
        {
            "state": ["CO", "CO", "NY", "CO"],
            "driver_race": ["White", "Black", "White", "Hispanic"],
            "violations": ["speeding", "speeding|equipment", "speeding", "dui"],
            "outcome": ["Citation", "WrittenWarning", "Arrest", "Arrest"],
            "search_conducted": pd.array([True, False, True, True], dtype="boolean"),
            "search_types": ["Consent", "", "Consent", "K9"],
        }
    )
    cit = outcome_frame(recs, "citation_given_speeding")
    assert list(cit.y) == [1.0, 0.0]
    consent = outcome_frame(recs, "consent_search")
    assert list(consent.state) == ["CO", "CO", "CO"] and list(consent.y) == [1.0, 0.0, 0.0]
    assert list(outcome_frame(recs, "arrest").y) == [0.0, 0.0, 1.0, 1.0]
    with pytest.raises(ValueError):
        outcome_frame(recs, "frisk")


def test_field_availability_and_plot_data():
    recs, _ = gen_binary(seed=2, n=4000)
    recs.loc[recs.index[:200], "driver_gender"] = "Unknown"
    avail = field_availability(recs, ["driver_gender", "location"])
    assert avail.loc["CO", "driver_gender"] == pytest.approx(1 - 200 / (recs.state == "CO").sum())
    assert (avail["location"] == 1.0).all()
    plot = poststop_rate_plot_data(recs, "search")
    assert {"search_rate", "white_search_rate"} <= set(plot.columns)


def test_stop_rate_null_race_effects():
    cells, _ = gen_counts(seed=12, n_locations=20, race_effects={"White": 0.0, "Black": 0.0, "Hispanic": 0.0})
    fit = stop_rate_analysis(cells, "NegBin")
    for race in ("Black", "Hispanic"):
        assert abs(fit[f"race[{race}]"]) < 2 * fit.stderr(f"race[{race}]")


def test_poststop_null_and_label_swap():
    null = {"White": 0.0, "Black": 0.0, "Hispanic": 0.0}
    recs, _ = gen_binary(seed=13, n=10_000, intercept=-1.0, race_effects=null)
    swap = {"White": "Black", "Black": "White", "Hispanic": "Hispanic"}
    swapped = recs.assign(driver_race=recs.driver_race.map(swap))
    for spec in CONTROL_SPECS:
        coefs = poststop_analysis(recs, "search", spec).race_coefficients().set_index("race")
        for race in ("Black", "Hispanic"):
            assert abs(coefs.loc[race, "estimate"]) < 2 * coefs.loc[race, "std_error"], (spec, race)
        # relabelling White <-> Black only flips the sign of the Black coefficient
        back = poststop_analysis(swapped, "search", spec).race_coefficients().set_index("race")
        assert abs(back.loc["Black", "estimate"]) == pytest.approx(abs(coefs.loc["Black", "estimate"]), rel=1e-6)


def test_aggregate_hit_rate_is_search_weighted_location_mean():
    recs, _ = gen_binary(seed=14, n=6000, outcome="search_conducted", intercept=-1.5)
    recs["contraband_found"] = pd.array(np.arange(len(recs)) % 3 == 0, dtype="boolean")
    res = outcome_test(recs)
    for race, rows in res.locations.groupby("race"):
        searched = rows[rows.searches > 0]
        weighted = sum(Fraction(int(s)) * Fraction(int(h), int(s)) for s, h in zip(searched.searches, searched.hits))
        agg = res.aggregate.set_index("race").loc[race]
        assert weighted / int(searched.searches.sum()) == Fraction(int(agg.hits), int(agg.searches))
