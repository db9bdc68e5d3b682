"""Hierarchical Bayesian threshold test.

Each stop yields a signal ``p ~ beta(phi_rd, lambda_rd)`` (mean / total-count
parameterization); a search happens iff ``p >= t_rd`` and a searched driver
carries contraband with probability ``p``.  Aggregated per (race, location)
group, the three outcomes (not searched, searched with hit, searched without
hit) are multinomial with probabilities

    I_t(a, b),   phi * (1 - I_t(a + 1, b)),   (1 - phi) * (1 - I_t(a, b + 1))

where ``a = phi * lambda`` and ``b = (1 - phi) * lambda``.  Gradients come
from the differentiated continued fraction in :mod:`patrolstats.numerics`.

Location effects and per-group thresholds use non-centered
parameterizations (``phi_d = sigma_phi * z``), which leaves the implied
priors unchanged but lets NUTS move through the hierarchy.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from numba import njit
from scipy.special import expit, gammaln

from .inference import LogDensityModel, PosteriorDraws, SamplerConfig, nuts_sample, rhat
from .numerics import _log_betainc_kernel, beta_tail_rates, log_reg_inc_beta, make_rng

log = logging.getLogger(__name__)

RACES = ("White", "Black", "Hispanic")
PERIODS = ("pre", "post")
RHAT_BOUND = 1.05


class ThresholdDataError(ValueError):
    pass


@dataclass
class ThresholdData:
    """Stop, search and hit counts per (race, location[, period]) group."""

    races: list[str]
    locations: list[str]
    race: np.ndarray
    location: np.ndarray
    stops: np.ndarray
    searches: np.ndarray
    hits: np.ndarray
    periods: list[str] = field(default_factory=lambda: ["all"])
    period: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.race = np.asarray(self.race, dtype=np.int64)
        self.location = np.asarray(self.location, dtype=np.int64)
        self.stops = np.asarray(self.stops, dtype=np.int64)
        self.searches = np.asarray(self.searches, dtype=np.int64)
        self.hits = np.asarray(self.hits, dtype=np.int64)
        if self.period is None:
            self.period = np.zeros_like(self.race)
        self.period = np.asarray(self.period, dtype=np.int64)
        n = self.race.shape[0]
        if not all(v.shape == (n,) for v in (self.location, self.stops, self.searches, self.hits, self.period)):
            raise ThresholdDataError("group arrays must share one length")
        if np.any(self.hits < 0) or np.any(self.hits > self.searches) or np.any(self.searches > self.stops):
            raise ThresholdDataError("counts must satisfy 0 <= hits <= searches <= stops")
        keys = set(zip(self.race.tolist(), self.location.tolist(), self.period.tolist()))
        if len(keys) != n:
            raise ThresholdDataError("groups must be unique on (race, location, period)")

    @property
    def n_groups(self) -> int:
        return self.race.shape[0]

    @property
    def has_periods(self) -> bool:
        return len(self.periods) > 1

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            {
                "race": [self.races[i] for i in self.race],
                "location": [self.locations[i] for i in self.location],
                "period": [self.periods[i] for i in self.period],
                "stops": self.stops,
                "searches": self.searches,
                "hits": self.hits,
            }
        )
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, races=RACES) -> "ThresholdData":
        """Build from columns race, location, [period], stops, searches, hits."""
        missing = {"race", "location", "stops", "searches", "hits"} - set(frame.columns)
        if missing:
            raise ThresholdDataError(f"count table lacks columns {sorted(missing)}")
        frame = frame[frame["race"].isin(races)]
        present = [r for r in races if r in set(frame["race"])]
        locations = sorted(frame["location"].astype(str).unique())
        if "period" in frame.columns and set(frame["period"]) != {"all"}:
            labels = set(frame["period"])
            periods = [p for p in PERIODS if p in labels]
            if len(periods) != len(labels):
                raise ThresholdDataError("period values must be 'pre' or 'post'")
        else:
            periods = ["all"]
        loc_index = {loc: i for i, loc in enumerate(locations)}
        return cls(
            races=present,
            locations=locations,
            race=frame["race"].map({r: i for i, r in enumerate(present)}).to_numpy(),
            location=frame["location"].astype(str).map(loc_index).to_numpy(),
            stops=frame["stops"].to_numpy(),
            searches=frame["searches"].to_numpy(),
            hits=frame["hits"].to_numpy(),
            periods=periods,
            period=(
                frame["period"].map({p: i for i, p in enumerate(periods)}).to_numpy() if len(periods) > 1 else None
            ),
        )

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def read_csv(cls, path) -> "ThresholdData":
        return cls.from_frame(pd.read_csv(path, dtype={"location": str}))


def prepare(
    records: pd.DataFrame,
    min_stops: int = 1000,
    max_locations: int = 100,
    races=RACES,
    period_column: str | None = None,
) -> ThresholdData:
    """Aggregate stop records into threshold-test groups.

    Locations with fewer than ``min_stops`` stops are dropped; if more than
    ``max_locations`` remain, only those with the most stops are kept.
    """
    cols = ["driver_race", "location", "search_conducted"]
    frame = records[records["driver_race"].isin(races)].dropna(subset=cols)
    frame = frame.assign(
        location=frame["location"].astype(str),
        searched=frame["search_conducted"].astype(bool),
    )
    frame = frame.assign(hit=frame["searched"] & frame["contraband_found"].fillna(False).astype(bool))
    totals = frame.groupby("location").size()
    kept = totals[totals >= min_stops]
    if len(kept) > max_locations:
        kept = kept.sort_values(ascending=False, kind="mergesort").iloc[:max_locations]
    if len(kept) < 2:
        raise ThresholdDataError(
            f"only {len(kept)} location(s) with at least {min_stops} stops; the hierarchy needs two or more"
        )
    frame = frame[frame["location"].isin(kept.index)]
    keys = ["driver_race", "location"] + ([period_column] if period_column else [])
    grouped = frame.groupby(keys, sort=True).agg(
        stops=("searched", "size"), searches=("searched", "sum"), hits=("hit", "sum")
    )
    table = grouped.reset_index().rename(columns={"driver_race": "race"})
    if period_column:
        table = table.rename(columns={period_column: "period"})
    data = ThresholdData.from_frame(table, races=races)
    sparse = []
    for r, race in enumerate(data.races):
        mask = data.race == r
        if np.mean(data.searches[mask] < 10) > 0.5:
            sparse.append(race)
    if sparse:
        msg = f"very few searches for {', '.join(sparse)} in most locations; inferences lean on the prior"
        data.warnings.append(msg)
        log.warning(msg)
    return data


@dataclass(frozen=True)
class Priors:
    """Prior scales (normal / half-normal standard deviations)."""

    race_scale: float = 2.0
    hyper_scale: float = 2.0
    threshold_mean_scale: float = 2.0
    extension_scale: float = 1.0

    def describe(self) -> dict:
        return {
            "phi_r, lambda_r": f"normal(0, {self.race_scale})",
            "phi_d, lambda_d": "normal(0, sigma_phi), normal(0, sigma_lambda)",
            "sigma_phi, sigma_lambda, sigma_t": f"half-normal(0, {self.hyper_scale})",
            "logit t_rd": "normal(t_mu_r, sigma_t)",
            "t_mu_r": f"normal(0, {self.threshold_mean_scale})",
            "phi_rt, lambda_rt, t_rt (post period)": f"normal(0, {self.extension_scale})",
            "parameterization": "non-centered location effects and thresholds",
            "aggregation weights": "total stops per location (all races)",
            "point estimate": "posterior mean",
        }


@njit(cache=True, nogil=True)
def _group_loglik(t, tc, phi, phic, log_phi, log_phic, lam, n, s, h, d_phi, d_lam, d_t):
    """Sum of group log-likelihoods (without binomial constants) and d/d(eta)."""
    buf = np.empty(8)
    total = 0.0
    for g in range(t.shape[0]):
        if not (0.0 < t[g] < 1.0) or not (lam[g] > 0.0) or not (phi[g] > 0.0) or not (phic[g] > 0.0):
            return np.nan
        a = phi[g] * lam[g]
        b = phic[g] * lam[g]
        if not (a > 0.0) or not (b > 0.0):
            return np.nan
        not_searched = n[g] - s[g]
        misses = s[g] - h[g]
        da = 0.0
        db = 0.0
        dt = 0.0
        dphi = 0.0
        if not_searched > 0:
            _log_betainc_kernel(t[g], a, b, buf)
            total += not_searched * buf[0]
            da += not_searched * buf[2]
            db += not_searched * buf[3]
            dt += not_searched * buf[6]
        if h[g] > 0:
            _log_betainc_kernel(t[g], a + 1.0, b, buf)
            total += h[g] * (log_phi[g] + buf[1])
            da += h[g] * buf[4]
            db += h[g] * buf[5]
            dt += h[g] * buf[7]
            dphi += h[g] * phic[g]
        if misses > 0:
            _log_betainc_kernel(t[g], a, b + 1.0, buf)
            total += misses * (log_phic[g] + buf[1])
            da += misses * buf[4]
            db += misses * buf[5]
            dt += misses * buf[7]
            dphi -= misses * phi[g]
        d_phi[g] = dphi + lam[g] * (da - db) * phi[g] * phic[g]
        d_lam[g] = (phi[g] * da + phic[g] * db) * lam[g]
        d_t[g] = dt * t[g] * tc[g]
    return total


@njit(cache=True, nogil=True)
def _log_density_kernel(x, layout, scales, index, n, s, h, grad):
    """Log posterior (without binomial constants); fills ``grad`` in place."""
    o_phr, o_lar, o_phd, o_lad, o_sph, o_sla, o_tmu, o_st, o_traw = layout[0:9]
    o_phrt, o_lart, o_trt = layout[9], layout[10], layout[11]
    R, D, C = layout[12], layout[13], layout[14]
    prepost = o_phrt >= 0
    G = n.shape[0]
    sig_phi, sig_lam, sig_t = x[o_sph], x[o_sla], x[o_st]
    t = np.empty(G)
    tc = np.empty(G)
    phi = np.empty(G)
    phic = np.empty(G)
    lphi = np.empty(G)
    lphic = np.empty(G)
    lam = np.empty(G)
    for g in range(G):
        r, d, c = index[0, g], index[1, g], index[2, g]
        e_phi = x[o_phr + r] + sig_phi * x[o_phd + d]
        e_lam = x[o_lar + r] + sig_lam * x[o_lad + d]
        e_t = x[o_tmu + r] + sig_t * x[o_traw + c]
        if prepost and index[3, g] == 1:
            e_phi += x[o_phrt + r]
            e_lam += x[o_lart + r]
            e_t += x[o_trt + r]
        if e_lam > 700.0:
            return np.nan
        lam[g] = math.exp(e_lam)
        t[g] = 1.0 / (1.0 + math.exp(-e_t))
        tc[g] = 1.0 / (1.0 + math.exp(e_t))
        phi[g] = 1.0 / (1.0 + math.exp(-e_phi))
        phic[g] = 1.0 / (1.0 + math.exp(e_phi))
        lphi[g] = -math.log1p(math.exp(-e_phi)) if e_phi > -30.0 else e_phi
        lphic[g] = -math.log1p(math.exp(e_phi)) if e_phi < 30.0 else -e_phi
    g_phi = np.empty(G)
    g_lam = np.empty(G)
    g_t = np.empty(G)
    lp = _group_loglik(t, tc, phi, phic, lphi, lphic, lam, n, s, h, g_phi, g_lam, g_t)
    if not math.isfinite(lp):
        return np.nan
    for g in range(G):
        r, d, c = index[0, g], index[1, g], index[2, g]
        grad[o_phr + r] += g_phi[g]
        grad[o_lar + r] += g_lam[g]
        grad[o_tmu + r] += g_t[g]
        grad[o_phd + d] += sig_phi * g_phi[g]
        grad[o_lad + d] += sig_lam * g_lam[g]
        grad[o_traw + c] += sig_t * g_t[g]
        grad[o_sph] += g_phi[g] * x[o_phd + d]
        grad[o_sla] += g_lam[g] * x[o_lad + d]
        grad[o_st] += g_t[g] * x[o_traw + c]
        if prepost and index[3, g] == 1:
            grad[o_phrt + r] += g_phi[g]
            grad[o_lart + r] += g_lam[g]
            grad[o_trt + r] += g_t[g]
    blocks = [
        (o_phr, R, scales[0]),
        (o_lar, R, scales[0]),
        (o_tmu, R, scales[1]),
        (o_phd, D, 1.0),
        (o_lad, D, 1.0),
        (o_traw, C, 1.0),
        (o_sph, 1, scales[2]),
        (o_sla, 1, scales[2]),
        (o_st, 1, scales[2]),
    ]
    if prepost:
        blocks.append((o_phrt, R, scales[3]))
        blocks.append((o_lart, R, scales[3]))
        blocks.append((o_trt, R, scales[3]))
    for start, size, scale in blocks:
        v = 1.0 / (scale * scale)
        for i in range(start, start + size):
            lp -= 0.5 * x[i] * x[i] * v
            grad[i] -= x[i] * v
    return lp


class ThresholdModel:
    """Log posterior of the threshold model over a flat parameter vector.

    With period-tagged data the post-period extension terms (race-level
    shifts of the signal mean, signal count and logit threshold) are added.
    """

    def __init__(self, data: ThresholdData, priors: Priors | None = None, prepost: bool | None = None):
        self.data = data
        self.priors = priors or Priors()
        self.prepost = data.has_periods if prepost is None else prepost
        if self.prepost and data.periods != list(PERIODS):
            raise ThresholdDataError("pre/post model needs periods ['pre', 'post']")
        R, D = len(data.races), len(data.locations)
        cells = sorted(set(zip(data.race.tolist(), data.location.tolist())))
        cell_index = {c: i for i, c in enumerate(cells)}
        self.cell = np.array([cell_index[c] for c in zip(data.race.tolist(), data.location.tolist())], dtype=np.int64)
        self.cell_race = np.array([c[0] for c in cells], dtype=np.int64)
        self.cell_location = np.array([c[1] for c in cells], dtype=np.int64)
        self.post = (data.period == 1) if self.prepost else np.zeros(data.n_groups, dtype=bool)
        C = len(cells)
        blocks = [
            ("phi_r", R),
            ("lambda_r", R),
            ("phi_d_raw", D),
            ("lambda_d_raw", D),
            ("sigma_phi", 1),
            ("sigma_lambda", 1),
            ("t_mu", R),
            ("sigma_t", 1),
            ("t_raw", C),
        ]
        if self.prepost:
            blocks += [("phi_rt", R), ("lambda_rt", R), ("t_rt", R)]
        self.slices: dict[str, slice] = {}
        names: list[str] = []
        transforms: list[str] = []
        start = 0
        for name, size in blocks:
            self.slices[name] = slice(start, start + size)
            start += size
            if name.endswith("_r") or name == "t_mu" or name.endswith("_rt"):
                labels = data.races
            elif name.endswith("_d_raw"):
                labels = data.locations
            elif name == "t_raw":
                labels = [f"{data.races[r]}|{data.locations[d]}" for r, d in cells]
            else:
                labels = None
            if labels is None:
                names.append(name)
            else:
                names.extend(f"{name}[{lab}]" for lab in labels)
            transforms.extend(["log" if name.startswith("sigma") else "identity"] * size)
        self.dimension = start
        self.names = names
        self.transforms = transforms
        n, s, h = data.stops, data.searches, data.hits
        self._const = float(
            np.sum(gammaln(n + 1) - gammaln(s + 1) - gammaln(n - s + 1) + gammaln(s + 1) - gammaln(h + 1) - gammaln(s - h + 1))
        )
        self._n, self._s, self._h = n.astype(np.int64), s.astype(np.int64), h.astype(np.int64)
        order = ["phi_r", "lambda_r", "phi_d_raw", "lambda_d_raw", "sigma_phi", "sigma_lambda", "t_mu", "sigma_t", "t_raw"]
        if self.prepost:
            order += ["phi_rt", "lambda_rt", "t_rt"]
        offsets = [self.slices[k].start for k in order] + [-1] * (12 - len(order))
        self._layout = np.array(offsets + [R, D, C], dtype=np.int64)
        p = self.priors
        self._scales = np.array([p.race_scale, p.threshold_mean_scale, p.hyper_scale, p.extension_scale])
        self._index = np.stack(
            [data.race, data.location, self.cell, self.post.astype(np.int64)]
        ).astype(np.int64)

    def _get(self, x, name):
        return x[..., self.slices[name]]

    def linear_predictors(self, x: np.ndarray):
        """(eta_phi, eta_lambda, eta_t) per group; x may be (..., dimension)."""
        d = self.data
        eta_phi = self._get(x, "phi_r")[..., d.race] + self._get(x, "sigma_phi") * self._get(x, "phi_d_raw")[..., d.location]
        eta_lam = (
            self._get(x, "lambda_r")[..., d.race]
            + self._get(x, "sigma_lambda") * self._get(x, "lambda_d_raw")[..., d.location]
        )
        eta_t = self._get(x, "t_mu")[..., d.race] + self._get(x, "sigma_t") * self._get(x, "t_raw")[..., self.cell]
        if self.prepost:
            post = self.post
            eta_phi = eta_phi + self._get(x, "phi_rt")[..., d.race] * post
            eta_lam = eta_lam + self._get(x, "lambda_rt")[..., d.race] * post
            eta_t = eta_t + self._get(x, "t_rt")[..., d.race] * post
        return eta_phi, eta_lam, eta_t

    def group_parameters(self, x: np.ndarray) -> dict[str, np.ndarray]:
        """Signal mean, signal count and threshold per group."""
        eta_phi, eta_lam, eta_t = self.linear_predictors(x)
        return {"phi": expit(eta_phi), "lambda": np.exp(eta_lam), "threshold": expit(eta_t)}

    def log_density(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        x = np.ascontiguousarray(x, dtype=float)
        grad = np.zeros(self.dimension)
        lp = _log_density_kernel(x, self._layout, self._scales, self._index, self._n, self._s, self._h, grad)
        if not np.isfinite(lp):
            return -np.inf, np.zeros(self.dimension)
        return lp + self._const, grad

    def log_density_model(self) -> LogDensityModel:
        return LogDensityModel(self.dimension, self.log_density, self.transforms, self.names)

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        """Constrained starting point near the empirical search and hit rates."""
        d = self.data
        x = np.zeros(self.dimension)
        n = np.bincount(d.race, d.stops, len(d.races))
        s = np.bincount(d.race, d.searches, len(d.races))
        h = np.bincount(d.race, d.hits, len(d.races))
        search = np.clip(s / np.maximum(n, 1), 1e-4, 0.5)
        hit = np.clip(h / np.maximum(s, 1), 0.02, 0.9)
        x[self.slices["phi_r"]] = np.log(search * hit) - np.log1p(-search * hit) + rng.uniform(-0.3, 0.3, len(n))
        x[self.slices["lambda_r"]] = rng.uniform(0.5, 2.0, len(n))
        x[self.slices["t_mu"]] = np.log(hit * 0.6) - np.log1p(-hit * 0.6) + rng.uniform(-0.3, 0.3, len(n))
        for name in ("phi_d_raw", "lambda_d_raw", "t_raw"):
            x[self.slices[name]] = rng.uniform(-0.5, 0.5, self.slices[name].stop - self.slices[name].start)
        for name in ("sigma_phi", "sigma_lambda", "sigma_t"):
            x[self.slices[name]] = rng.uniform(0.2, 0.6)
        return x


def group_log_likelihood(data: ThresholdData, phi, lam, threshold) -> np.ndarray:
    """Per-group log-likelihood, binomial constants included.

    s ~ Binomial(n, S) and h ~ Binomial(s, H), with S and H the upper-tail
    search and hit rates of beta(phi*lam, (1-phi)*lam) at the threshold.
    Thresholds on [0, 1] are accepted: at t = 0 every stop is searched, so
    a group is possible only if s = n.
    """
    G = data.n_groups
    phi, lam, t = (np.broadcast_to(np.asarray(v, dtype=float), (G,)) for v in (phi, lam, threshold))
    a, b = phi * lam, (1 - phi) * lam
    log_none, log_search = log_reg_inc_beta(t, a, b)
    _, log_s1 = log_reg_inc_beta(t, a + 1, b)
    _, log_s2 = log_reg_inc_beta(t, a, b + 1)
    n, s, h = (v.astype(float) for v in (data.stops, data.searches, data.hits))
    with np.errstate(invalid="ignore", divide="ignore"):
        log_hit = np.log(phi) + log_s1 - log_search
        log_miss = np.log1p(-phi) + log_s2 - log_search

    def term(k, logp):
        # 0 * log(0) counts as 0
        with np.errstate(invalid="ignore"):
            return np.where(k > 0, k * logp, 0.0)

    const = gammaln(n + 1) - gammaln(n - s + 1) - gammaln(h + 1) - gammaln(s - h + 1)
    return const + term(n - s, log_none) + term(s, log_search) + term(h, log_hit) + term(s - h, log_miss)


def log_posterior(params, data: ThresholdData, priors: Priors | None = None) -> tuple[float, np.ndarray]:
    """Log posterior (up to a constant) and gradient at a constrained vector."""
    model = ThresholdModel(data, priors)
    if isinstance(params, ThresholdParams):
        params = params.vector
    return model.log_density(np.asarray(params, dtype=float))


@dataclass
class ThresholdParams:
    """Named view of one parameter vector."""

    vector: np.ndarray
    names: list[str]

    def __getitem__(self, name):
        return self.vector[self.names.index(name)]


def _summarize(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return values.mean(axis=0), np.quantile(values, 0.025, axis=0), np.quantile(values, 0.975, axis=0)


def aggregate_thresholds(draws: PosteriorDraws, data: ThresholdData, model: ThresholdModel | None = None) -> pd.DataFrame:
    """Stop-weighted race-level thresholds per draw, summarized by mean and 95% interval.

    Weights are total stops (all races) per location, within period.
    """
    model = model or ThresholdModel(data)
    flat = draws.params.reshape(-1, draws.dimension)
    t = model.group_parameters(flat)["threshold"]
    rows = []
    for p, period in enumerate(data.periods):
        in_period = data.period == p
        loc_weight = np.bincount(data.location[in_period], data.stops[in_period], len(data.locations))
        for r, race in enumerate(data.races):
            mask = in_period & (data.race == r)
            if not mask.any():
                continue
            w = loc_weight[data.location[mask]].astype(float)
            if w.sum() == 0:
                w = np.ones_like(w)
            agg = t[:, mask] @ (w / w.sum())
            mean, lo, hi = _summarize(agg)
            rows.append(
                {"race": race, "period": period, "threshold": float(mean), "ci_low": float(lo), "ci_high": float(hi)}
            )
    return pd.DataFrame(rows)


def group_thresholds(draws: PosteriorDraws, data: ThresholdData, model: ThresholdModel | None = None) -> pd.DataFrame:
    model = model or ThresholdModel(data)
    flat = draws.params.reshape(-1, draws.dimension)
    gp = model.group_parameters(flat)
    frame = data.to_frame()
    for key in ("threshold", "phi", "lambda"):
        mean, lo, hi = _summarize(gp[key])
        frame[key] = mean
        frame[f"{key}_low"] = lo
        frame[f"{key}_high"] = hi
    return frame


def ppc(
    draws: PosteriorDraws,
    data: ThresholdData,
    model: ThresholdModel | None = None,
    observed: ThresholdData | None = None,
    seed: int = 0,
) -> pd.DataFrame:
    """Posterior predictive search and hit rates per group.

    For every draw the analytic search and hit rates are computed and
    averaged.  Replicated counts drawn per draw give 95% posterior predictive
    intervals for the observed rates.  ``observed`` defaults to ``data``;
    pass a replicate with identical group layout to check calibration on
    fresh data.
    """
    model = model or ThresholdModel(data)
    observed = observed or data
    flat = draws.params.reshape(-1, draws.dimension)
    gp = model.group_parameters(flat)
    search, hit, _ = beta_tail_rates(gp["phi"], gp["lambda"], gp["threshold"])
    rng = make_rng(seed, 7)
    n = data.stops
    s_rep = rng.binomial(n, search)
    h_rep = rng.binomial(s_rep, hit)
    search_rep = s_rep / np.maximum(n, 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        hit_rep = np.where(s_rep > 0, h_rep / s_rep, np.nan)
    frame = observed.to_frame()
    obs_search = observed.searches / np.maximum(observed.stops, 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        obs_hit = np.where(observed.searches > 0, observed.hits / observed.searches, np.nan)
    frame["observed_search_rate"] = obs_search
    frame["observed_hit_rate"] = obs_hit
    frame["hit_rate_undefined"] = observed.searches == 0
    frame["predicted_search_rate"] = search.mean(axis=0)
    frame["predicted_hit_rate"] = hit.mean(axis=0)
    frame["search_rate_error"] = frame["predicted_search_rate"] - obs_search
    frame["hit_rate_error"] = frame["predicted_hit_rate"] - obs_hit
    frame["search_ppi_low"] = np.quantile(search_rep, 0.025, axis=0)
    frame["search_ppi_high"] = np.quantile(search_rep, 0.975, axis=0)
    frame["hit_ppi_low"] = np.nanquantile(hit_rep, 0.025, axis=0)
    frame["hit_ppi_high"] = np.nanquantile(hit_rep, 0.975, axis=0)
    frame["search_in_ppi"] = (obs_search >= frame["search_ppi_low"]) & (obs_search <= frame["search_ppi_high"])
    frame["hit_in_ppi"] = (obs_hit >= frame["hit_ppi_low"]) & (obs_hit <= frame["hit_ppi_high"])
    return frame


@dataclass
class ThresholdFit:
    data: ThresholdData
    model: ThresholdModel
    draws: PosteriorDraws
    rhat: np.ndarray
    aggregate: pd.DataFrame
    groups: pd.DataFrame
    warnings: list[str] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        finite = self.rhat[np.isfinite(self.rhat)]
        return bool(finite.size and np.all(finite < RHAT_BOUND))

    @property
    def max_rhat(self) -> float:
        return float(np.nanmax(self.rhat))

    def summary(self) -> dict:
        return {
            "converged": self.converged,
            "max_rhat": self.max_rhat,
            "rhat_bound": RHAT_BOUND,
            "divergences": self.draws.divergence_count,
            "chains": self.draws.chains,
            "draws_per_chain": self.draws.draws_per_chain,
            "warmup": self.draws.warmup,
            "seed": self.draws.seed,
            "priors": self.model.priors.describe(),
            "aggregate": self.aggregate.to_dict(orient="records"),
            "groups": self.groups.to_dict(orient="records"),
            "warnings": self.warnings,
        }

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "threshold_summary.json").write_text(json.dumps(_jsonable(self.summary()), indent=2))
        self.groups.to_csv(directory / "threshold_groups.csv", index=False)
        self.aggregate.to_csv(directory / "threshold_aggregate.csv", index=False)
        self.draws.save(directory / "draws")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if not math.isfinite(obj) else float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def fit(
    data: ThresholdData,
    config: SamplerConfig | None = None,
    priors: Priors | None = None,
    prepost: bool | None = None,
) -> ThresholdFit:
    """Sample the threshold model and summarize thresholds.

    Defaults to 5 chains of 2,500 warmup plus 2,500 sampling iterations.
    """
    config = config or SamplerConfig()
    model = ThresholdModel(data, priors, prepost=prepost)
    rng = make_rng(config.seed, 10_000)
    inits = np.stack([model.initial_point(rng) for _ in range(config.chains)])
    lmodel = model.log_density_model()
    draws = nuts_sample(lmodel, config, init=lmodel.unconstrain(inits))
    r = rhat(draws)
    warnings = list(data.warnings) + list(draws.warnings)
    result = ThresholdFit(
        data=data,
        model=model,
        draws=draws,
        rhat=r,
        aggregate=aggregate_thresholds(draws, data, model),
        groups=group_thresholds(draws, data, model),
        warnings=warnings,
    )
    if not result.converged:
        msg = f"not converged: max R-hat {result.max_rhat:.3f} >= {RHAT_BOUND}"
        result.warnings.append(msg)
        log.warning(msg)
    return result


def fit_prepost(data: ThresholdData, config: SamplerConfig | None = None, priors: Priors | None = None) -> ThresholdFit:
    """Threshold test with race-specific post-period shifts.

    Signal mean, signal count and (logit) threshold each get an additive
    race-level term that is zero before the policy change and has a
    normal(0, 1) prior after it.  Run once per state.  Data tagged only
    'pre' gives exactly the static fit.
    """
    if data.periods == ["pre"]:
        # nothing after the change: the extension terms never enter the likelihood
        return fit(data, config, priors, prepost=False)
    if not data.has_periods:
        raise ThresholdDataError("fit_prepost needs groups tagged 'pre' and 'post'")
    for p, period in enumerate(data.periods):
        for r, race in enumerate(data.races):
            mask = (data.period == p) & (data.race == r)
            if data.searches[mask].sum() == 0:
                data.warnings.append(f"no searches of {race} drivers in the {period} period; interval is prior-driven")
    return fit(data, config, priors, prepost=True)


def fit_prepost_by_state(frames: dict[str, ThresholdData], config: SamplerConfig | None = None) -> dict[str, ThresholdFit]:
    return {state: fit_prepost(data, config) for state, data in sorted(frames.items())}
