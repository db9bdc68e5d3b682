import json

import numpy as np
import pandas as pd
import pytest

from patrolstats.numerics import beta_tail_rates
from patrolstats.synth import gen_binary, gen_counts, gen_threshold, write_truth


def test_threshold_generator_reproducible():
    a, ta = gen_threshold(seed=4, n_locations=5, stops_per_group=1000)
    b, tb = gen_threshold(seed=4, n_locations=5, stops_per_group=1000)
    pd.testing.assert_frame_equal(a.to_frame(), b.to_frame())
    np.testing.assert_array_equal(ta.thresholds, tb.thresholds)
    c, _ = gen_threshold(seed=5, n_locations=5, stops_per_group=1000)
    assert not a.to_frame().equals(c.to_frame())


def test_threshold_generator_matches_model_rates():
    data, truth = gen_threshold(seed=0, n_locations=6, stops_per_group=50_000)
    search, hit, _ = beta_tail_rates(truth.phi, truth.lam, truth.thresholds)
    frame = data.to_frame()
    for g, row in frame.iterrows():
        r = truth.races.index(row.race)
        d = truth.locations.index(row.location)
        p = search[r, d]
        assert abs(row.searches / row.stops - p) < 5 * np.sqrt(p * (1 - p) / row.stops)
        if row.searches > 100:
            q = hit[r, d]
            assert abs(row.hits / row.searches - q) < 5 * np.sqrt(q * (1 - q) / row.searches)


def test_threshold_periods():
    data, truth = gen_threshold(seed=1, n_locations=3, stops_per_group=500, post_threshold_shift=-0.05)
    assert data.periods == ["pre", "post"] and data.n_groups == 18
    np.testing.assert_allclose(truth.post_thresholds, truth.thresholds - 0.05)
    agg = truth.aggregate()
    assert set(agg) == {"White", "Black", "Hispanic"}


def test_counts_generator():
    cells, truth = gen_counts(seed=2, n_locations=4)
    assert len(cells) == 3 * 5 * 2 * 4 * 5
    assert (cells.stops >= 0).all() and (cells.benchmark_pop >= 200).all()
    np.testing.assert_array_equal(cells.stops, gen_counts(seed=2, n_locations=4)[0].stops)
    assert truth["race"]["Black"] == 0.37
    ratio = cells.stops.sum() / truth["mean"].sum()
    assert 0.8 < ratio < 1.2


def test_binary_generator(tmp_path):
    recs, truth = gen_binary(seed=3, n=9_000, treated_states=("CO",), treatment_effects={"White": -1.0})
    assert len(recs) == 9_000 and set(recs.state) == set(truth["state"])
    assert recs.driver_age.between(16, 79).all()
    assert recs.search_conducted.dtype == bool
    write_truth(truth, tmp_path / "t.json")
    back = json.loads((tmp_path / "t.json").read_text())
    assert back["treatment"] == {"White": -1.0} and back["legalization_date"] == "2012-12-31"


def test_threshold_boundaries():
    data, _ = gen_threshold(seed=6, n_locations=2, stops_per_group=2000, thresholds=0.0)
    np.testing.assert_array_equal(data.searches, data.stops)
    data, _ = gen_threshold(seed=6, n_locations=2, stops_per_group=2000, thresholds=1.0)
    assert (data.searches == 0).all()


def test_threshold_generator_single_group_large_n():
    data, truth = gen_threshold(
        seed=8, races=("White",), n_locations=1, signal_mean=(0.3,), signal_count=(5.0,),
        location_sd=0.0, thresholds=0.2, stops_per_group=1_000_000,
    )
    search, hit, _ = beta_tail_rates(0.3, 5.0, 0.2)
    n, s, h = data.stops[0], data.searches[0], data.hits[0]
    assert abs(s / n - search) < 3 * np.sqrt(search * (1 - search) / n)
    assert abs(h / s - hit) < 3 * np.sqrt(hit * (1 - hit) / s)


def flat_counts(**kw):
    # every cell has mean 0.02 * 1000 = 20
    effects = dict(
        intercept=np.log(0.02), population_range=(1000, 1000), location_sd=0.0, year_sd=0.0,
        race_effects={"White": 0.0, "Black": 0.0, "Hispanic": 0.0},
        age_effects={"a": 0.0, "b": 0.0, "c": 0.0, "d": 0.0, "e": 0.0},
        gender_effects={"Female": 0.0, "Male": 0.0},
    )
    return gen_counts(**{**effects, **kw})


def test_counts_constant_mean_when_effects_vanish():
    cells, truth = flat_counts(n_locations=3)
    np.testing.assert_allclose(truth["mean"], 20.0, rtol=1e-12)


def test_counts_negbin_moment_identity():
    cells, _ = flat_counts(n_locations=667, dispersion=4.0)
    assert len(cells) >= 100_000
    y = cells.stops.to_numpy()
    ratio = y.var(ddof=1) / y.mean()
    assert ratio == pytest.approx(1 + y.mean() / 4, rel=0.10)


def test_counts_large_dispersion_is_poisson():
    cells, _ = flat_counts(n_locations=100, dispersion=1e9)
    y = cells.stops.to_numpy()
    assert y.var(ddof=1) / y.mean() == pytest.approx(1.0, abs=0.05)


def test_binary_intercept_only_half_positive():
    recs, _ = gen_binary(
        seed=9, n=100_000, intercept=0.0, state_sd=0.0,
        race_effects={"White": 0.0, "Black": 0.0, "Hispanic": 0.0},
    )
    assert abs(recs.search_conducted.mean() - 0.5) < 3 * np.sqrt(0.25 / len(recs))


def test_binary_odds_ratio_large_n():
    recs, _ = gen_binary(
        seed=10, n=1_000_000, intercept=0.0, state_sd=0.0,
        race_shares={"White": 0.5, "Black": 0.5}, race_effects={"White": 0.0, "Black": np.log(2.0)},
    )
    tab = pd.crosstab(recs.driver_race, recs.search_conducted)
    a, b = tab.loc["Black", True], tab.loc["Black", False]
    c, d = tab.loc["White", True], tab.loc["White", False]
    log_or = np.log(a * d / (b * c))
    se = np.sqrt(1 / a + 1 / b + 1 / c + 1 / d)
    assert abs(log_or - np.log(2.0)) < 3 * se
