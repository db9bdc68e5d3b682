"""Gradient-based MCMC: multinomial NUTS with windowed adaptation, and R-hat.

The sampler follows the usual recipe: dual-averaging step-size adaptation
targeting a mean acceptance statistic, diagonal mass matrix estimated over
doubling slow windows bracketed by fast init/terminal buffers, trajectories
built by iterated doubling with multinomial sampling and the generalized
no-U-turn criterion (including the checks across merged sub-trees).
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .numerics import make_rng

log = logging.getLogger(__name__)

TRANSFORMS = ("identity", "log", "logit")
DIVERGENCE_THRESHOLD = 1000.0


class InitializationError(RuntimeError):
    pass


class LogDensityModel:
    """A log density with gradient, sampled on unconstrained space.

    ``log_density`` takes a vector in the constrained parameterization and
    returns ``(value, gradient)``.  ``transforms`` gives one of ``identity``,
    ``log`` (positive) or ``logit`` (unit interval) per coordinate; the
    log-Jacobian of the map from unconstrained space is added automatically.
    """

    def __init__(
        self,
        dimension: int,
        log_density: Callable[[np.ndarray], tuple[float, np.ndarray]],
        transforms: Sequence[str] | None = None,
        names: Sequence[str] | None = None,
    ):
        self.dimension = int(dimension)
        self.log_density = log_density
        if transforms is None:
            transforms = ["identity"] * self.dimension
        transforms = list(transforms)
        if len(transforms) != self.dimension or any(t not in TRANSFORMS for t in transforms):
            raise ValueError("transforms must name one of identity/log/logit per coordinate")
        self.transforms = transforms
        self._log = np.array([t == "log" for t in transforms])
        self._logit = np.array([t == "logit" for t in transforms])
        self.names = list(names) if names is not None else [f"theta[{i}]" for i in range(self.dimension)]

    def constrain(self, u: np.ndarray) -> np.ndarray:
        x = np.array(u, dtype=float, copy=True)
        with np.errstate(over="ignore"):  # far-out proposals become inf and are rejected
            x[..., self._log] = np.exp(x[..., self._log])
        x[..., self._logit] = expit(x[..., self._logit])
        return x

    def unconstrain(self, x: np.ndarray) -> np.ndarray:
        u = np.array(x, dtype=float, copy=True)
        u[..., self._log] = np.log(u[..., self._log])
        v = u[..., self._logit]
        u[..., self._logit] = np.log(v) - np.log1p(-v)
        return u

    def value_and_gradient(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        """Log density (with Jacobian) and gradient at unconstrained ``u``."""
        x = self.constrain(u)
        value, grad = self.log_density(x)
        grad = np.array(grad, dtype=float)
        if self._log.any():
            value += float(np.sum(u[self._log]))
            with np.errstate(invalid="ignore", over="ignore"):
                grad[self._log] = grad[self._log] * x[self._log] + 1.0
        if self._logit.any():
            p = x[self._logit]
            value += float(np.sum(np.log(p) + np.log1p(-p)))
            grad[self._logit] = grad[self._logit] * p * (1.0 - p) + (1.0 - 2.0 * p)
        return float(value), grad


def finite_difference_gradient(fn: Callable[[np.ndarray], float], u: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Fourth-order central differences of a scalar function."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    for i in range(u.size):
        h = step * max(1.0, abs(u[i]))
        e = np.zeros_like(u)
        e[i] = h
        f2p, f1p, f1m, f2m = fn(u + 2 * e), fn(u + e), fn(u - e), fn(u - 2 * e)
        out[i] = (-f2p + 8 * f1p - 8 * f1m + f2m) / (12 * h)
    return out


def gradient_error(model: LogDensityModel, u: np.ndarray) -> float:
    """Norm-wise relative error between model and finite-difference gradients."""
    _, grad = model.value_and_gradient(u)
    fd = finite_difference_gradient(lambda v: model.value_and_gradient(v)[0], u)
    return float(np.linalg.norm(fd - grad) / max(np.linalg.norm(grad), 1e-12))


def check_gradient(model: LogDensityModel, points: np.ndarray, rtol: float = 1e-5) -> float:
    """Worst gradient error over ``points``; raises ValueError above ``rtol``."""
    worst = max(gradient_error(model, p) for p in np.atleast_2d(points))
    if not worst <= rtol:
        raise ValueError(f"model gradient disagrees with finite differences (relative error {worst:.3g})")
    return worst


@dataclass
class SamplerConfig:
    chains: int = 5
    warmup: int = 2500
    draws: int = 2500
    seed: int = 0
    target_accept: float = 0.8
    max_depth: int = 10
    init_radius: float = 2.0
    init_tries: int = 100
    check_gradients: bool = True
    n_jobs: int = 1


@dataclass
class PosteriorDraws:
    """Post-warmup draws in the constrained parameterization.

    ``params`` has shape (chains, draws, dimension).
    """

    params: np.ndarray
    names: list[str]
    step_sizes: np.ndarray
    inv_metric: np.ndarray
    divergences: np.ndarray
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    seed: int = 0
    warmup: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def chains(self) -> int:
        return self.params.shape[0]

    @property
    def draws_per_chain(self) -> int:
        return self.params.shape[1]

    @property
    def dimension(self) -> int:
        return self.params.shape[2]

    @property
    def divergence_count(self) -> int:
        return int(self.divergences.sum())

    def column(self, name: str) -> np.ndarray:
        return self.params[:, :, self.names.index(name)]

    def metadata(self) -> dict:
        return {
            "chains": self.chains,
            "draws_per_chain": self.draws_per_chain,
            "warmup": self.warmup,
            "dimension": self.dimension,
            "seed": self.seed,
            "names": self.names,
            "step_sizes": self.step_sizes.tolist(),
            "divergence_count": self.divergence_count,
            "divergences_per_chain": self.divergences.sum(axis=1).tolist(),
            "mean_accept_stat": self.accept_stat.mean(axis=1).tolist(),
            "max_tree_depth": int(self.tree_depth.max()) if self.tree_depth.size else 0,
            "warnings": list(self.warnings),
        }

    def save(self, directory: str | Path) -> None:
        """Write ``draws.npz`` (one chains x draws array per parameter) and ``draws.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        columns = {f"p{i:05d}": self.params[:, :, i] for i in range(self.dimension)}
        columns.update(
            __step_sizes=self.step_sizes,
            __inv_metric=self.inv_metric,
            __divergences=self.divergences,
            __accept_stat=self.accept_stat,
            __tree_depth=self.tree_depth,
            __n_leapfrog=self.n_leapfrog,
        )
        with open(directory / "draws.npz", "wb") as fh:
            np.savez(fh, **columns)
        with open(directory / "draws.json", "w") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory: str | Path) -> "PosteriorDraws":
        directory = Path(directory)
        meta = json.loads((directory / "draws.json").read_text())
        with np.load(directory / "draws.npz") as data:
            params = np.stack([data[f"p{i:05d}"] for i in range(meta["dimension"])], axis=-1)
            return cls(
                params=params,
                names=meta["names"],
                step_sizes=data["__step_sizes"],
                inv_metric=data["__inv_metric"],
                divergences=data["__divergences"],
                accept_stat=data["__accept_stat"],
                tree_depth=data["__tree_depth"],
                n_leapfrog=data["__n_leapfrog"],
                seed=meta["seed"],
                warmup=meta["warmup"],
                warnings=meta["warnings"],
            )

    def to_csv(self, path: str | Path) -> None:
        """Long CSV: chain, draw, then one column per parameter."""
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["chain", "draw", *self.names])
            for c in range(self.chains):
                for d in range(self.draws_per_chain):
                    writer.writerow([c, d, *(repr(float(v)) for v in self.params[c, d])])


class _DualAveraging:
    def __init__(self, step_size: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.restart(step_size)

    def restart(self, step_size: float) -> None:
        self.mu = math.log(10.0 * step_size)
        self.h_bar = 0.0
        self.x_bar = 0.0
        self.count = 0

    def update(self, accept_stat: float) -> float:
        self.count += 1
        eta = 1.0 / (self.count + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_stat)
        x = self.mu - math.sqrt(self.count) / self.gamma * self.h_bar
        w = self.count ** (-self.kappa)
        self.x_bar = w * x + (1.0 - w) * self.x_bar
        return math.exp(x)

    @property
    def final(self) -> float:
        return math.exp(self.x_bar)


def _metric_windows(warmup: int) -> list[tuple[int, int]]:
    """Slow adaptation windows (start, end) over warmup iterations."""
    if warmup < 20:
        return []
    init, term, base = 75, 50, 25
    if init + term + base > warmup:
        init = int(0.15 * warmup)
        term = int(0.1 * warmup)
        base = warmup - init - term
    end_slow = warmup - term
    windows = []
    start, size = init, base
    while start < end_slow:
        end = start + size
        if end + 2 * size > end_slow:
            end = end_slow
        windows.append((start, end))
        start, size = end, 2 * size
    return windows


class _Tree:
    __slots__ = (
        "minus",
        "plus",
        "sample",
        "log_w",
        "rho",
        "turning",
        "divergent",
        "sum_accept",
        "n_leapfrog",
    )


class _Chain:
    """One NUTS chain; states are (position, momentum, gradient, logp)."""

    def __init__(self, fn, dim, rng, target_accept, max_depth):
        self.fn = fn
        self.dim = dim
        self.rng = rng
        self.max_depth = max_depth
        self.inv_metric = np.ones(dim)
        self.adapt = _DualAveraging(1.0, target_accept)

    def _leapfrog(self, state, eps):
        q, p, g, _ = state
        p_half = p + 0.5 * eps * g
        q_new = q + eps * self.inv_metric * p_half
        lp, g_new = self.fn(q_new)
        if not np.isfinite(lp) or not np.all(np.isfinite(g_new)):
            return (q_new, p_half, np.zeros_like(q), -np.inf)
        return (q_new, p_half + 0.5 * eps * g_new, g_new, lp)

    def _hamiltonian(self, state):
        _, p, _, lp = state
        h = -lp + 0.5 * float(np.dot(p * self.inv_metric, p))
        return h if np.isfinite(h) else np.inf

    def sample_momentum(self):
        return self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)

    def find_step_size(self, q, lp, g, eps):
        direction = 0
        for _ in range(100):
            state = (q, self.sample_momentum(), g, lp)
            h0 = self._hamiltonian(state)
            h = self._hamiltonian(self._leapfrog(state, eps))
            new_direction = 1 if h0 - h > math.log(0.8) else -1
            if direction and new_direction != direction:
                break
            direction = new_direction
            eps = 2.0 * eps if direction == 1 else 0.5 * eps
            if eps > 1e7 or eps < 1e-300:
                raise RuntimeError("step size search failed; posterior may be improper")
        return eps

    @staticmethod
    def _criterion(p_sharp_minus, p_sharp_plus, rho):
        return np.dot(p_sharp_plus, rho) > 0 and np.dot(p_sharp_minus, rho) > 0

    def _merge_turning(self, left, right, rho):
        im = self.inv_metric
        if not self._criterion(im * left.minus[1], im * right.plus[1], rho):
            return True
        if not self._criterion(im * left.minus[1], im * right.minus[1], left.rho + right.minus[1]):
            return True
        return not self._criterion(im * left.plus[1], im * right.plus[1], right.rho + left.plus[1])

    def _build(self, state, direction, depth, eps, h0):
        if depth == 0:
            new = self._leapfrog(state, direction * eps)
            h = self._hamiltonian(new)
            t = _Tree()
            t.minus = t.plus = t.sample = new
            t.log_w = h0 - h
            t.rho = new[1].copy()
            t.turning = False
            t.divergent = (h - h0) > DIVERGENCE_THRESHOLD
            t.sum_accept = math.exp(min(0.0, h0 - h)) if np.isfinite(h) else 0.0
            t.n_leapfrog = 1
            return t
        first = self._build(state, direction, depth - 1, eps, h0)
        if first.turning or first.divergent:
            return first
        frontier = first.plus if direction == 1 else first.minus
        second = self._build(frontier, direction, depth - 1, eps, h0)
        t = _Tree()
        t.n_leapfrog = first.n_leapfrog + second.n_leapfrog
        t.sum_accept = first.sum_accept + second.sum_accept
        t.divergent = second.divergent
        t.turning = second.turning
        if t.turning or t.divergent:
            return t
        t.log_w = np.logaddexp(first.log_w, second.log_w)
        t.sample = second.sample if math.log(self.rng.random()) < second.log_w - t.log_w else first.sample
        left, right = (first, second) if direction == 1 else (second, first)
        t.minus, t.plus = left.minus, right.plus
        t.rho = left.rho + right.rho
        t.turning = self._merge_turning(left, right, t.rho)
        return t

    def transition(self, q, lp, g, eps):
        p0 = self.sample_momentum()
        root = (q, p0, g, lp)
        h0 = self._hamiltonian(root)
        whole = _Tree()
        whole.minus = whole.plus = whole.sample = root
        whole.log_w = 0.0
        whole.rho = p0.copy()
        n_leapfrog, sum_accept, divergent, depth = 0, 0.0, False, 0
        while depth < self.max_depth:
            direction = 1 if self.rng.random() < 0.5 else -1
            start = whole.plus if direction == 1 else whole.minus
            sub = self._build(start, direction, depth, eps, h0)
            depth += 1
            n_leapfrog += sub.n_leapfrog
            sum_accept += sub.sum_accept
            if sub.divergent:
                divergent = True
                break
            if sub.turning:
                break
            if math.log(self.rng.random()) < sub.log_w - whole.log_w:
                whole.sample = sub.sample
            whole.log_w = np.logaddexp(whole.log_w, sub.log_w)
            left, right = (whole, sub) if direction == 1 else (sub, whole)
            rho = left.rho + right.rho
            turning = self._merge_turning(left, right, rho)
            whole.minus, whole.plus, whole.rho = left.minus, right.plus, rho
            if turning:
                break
        q_new, _, g_new, lp_new = whole.sample
        accept = sum_accept / max(n_leapfrog, 1)
        return q_new, lp_new, g_new, accept, depth, n_leapfrog, divergent


def _initial_point(model, rng, config, init):
    if init is not None:
        u = np.asarray(init, dtype=float)
        lp, g = model.value_and_gradient(u)
        if np.isfinite(lp) and np.all(np.isfinite(g)):
            return u, lp, g
    for _ in range(config.init_tries):
        u = rng.uniform(-config.init_radius, config.init_radius, model.dimension)
        try:
            lp, g = model.value_and_gradient(u)
        except (FloatingPointError, ValueError, ZeroDivisionError):
            continue
        if np.isfinite(lp) and np.all(np.isfinite(g)):
            return u, lp, g
    raise InitializationError(
        f"log density not finite at any of {config.init_tries} random initial points"
    )


def _run_chain(model: LogDensityModel, config: SamplerConfig, chain: int, init):
    rng = make_rng(config.seed, chain)
    u, lp, g = _initial_point(model, rng, config, init)
    if config.check_gradients:
        check_gradient(model, u)
    sampler = _Chain(model.value_and_gradient, model.dimension, rng, config.target_accept, config.max_depth)
    eps = sampler.find_step_size(u, lp, g, 1.0)
    sampler.adapt.restart(eps)
    windows = _metric_windows(config.warmup)
    window_ends = {end: start for start, end in windows}
    window_draws: list[np.ndarray] = []
    in_window = lambda it: any(s <= it < e for s, e in windows)

    for it in range(config.warmup):
        u, lp, g, accept, *_ = sampler.transition(u, lp, g, eps)
        eps = sampler.adapt.update(accept)
        if in_window(it):
            window_draws.append(u)
        if it + 1 in window_ends:
            w = np.array(window_draws)
            n = w.shape[0]
            var = w.var(axis=0, ddof=1) if n > 1 else np.ones(model.dimension)
            sampler.inv_metric = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            window_draws = []
            eps = sampler.find_step_size(u, lp, g, eps)
            sampler.adapt.restart(eps)
    if config.warmup > 0:
        eps = sampler.adapt.final

    n = config.draws
    out = np.empty((n, model.dimension))
    stats = np.empty((4, n))
    for it in range(n):
        u, lp, g, accept, depth, n_lf, divergent = sampler.transition(u, lp, g, eps)
        out[it] = u
        stats[:, it] = accept, depth, n_lf, divergent
    return model.constrain(out), eps, sampler.inv_metric, stats


def nuts_sample(model: LogDensityModel, config: SamplerConfig | None = None, init=None, **overrides) -> PosteriorDraws:
    """Draw from ``model`` with NUTS; one independent random stream per chain."""
    config = config or SamplerConfig()
    if overrides:
        config = SamplerConfig(**{**config.__dict__, **overrides})
    if config.chains < 1 or config.draws < 1 or config.warmup < 0:
        raise ValueError("need at least one chain and one draw")
    inits = [None] * config.chains if init is None else list(np.atleast_2d(init))
    if len(inits) == 1 and config.chains > 1:
        inits = inits * config.chains

    if config.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=config.n_jobs) as pool:
            results = list(pool.map(lambda c: _run_chain(model, config, c, inits[c]), range(config.chains)))
    else:
        results = [_run_chain(model, config, c, inits[c]) for c in range(config.chains)]

    stats = np.stack([r[3] for r in results])
    draws = PosteriorDraws(
        params=np.stack([r[0] for r in results]),
        names=list(model.names),
        step_sizes=np.array([r[1] for r in results]),
        inv_metric=np.stack([r[2] for r in results]),
        divergences=stats[:, 3].astype(bool),
        accept_stat=stats[:, 0],
        tree_depth=stats[:, 1].astype(int),
        n_leapfrog=stats[:, 2].astype(int),
        seed=config.seed,
        warmup=config.warmup,
    )
    rate = draws.divergence_count / draws.divergences.size
    if rate > 0.10:
        draws.warnings.append(f"divergence rate {rate:.1%} exceeds 10%")
    if (draws.tree_depth >= config.max_depth).mean() > 0.10:
        draws.warnings.append("more than 10% of transitions hit the maximum tree depth")
    for w in draws.warnings:
        log.warning(w)
    return draws


def rhat(draws) -> np.ndarray:
    """Split-chain potential scale reduction factor per parameter.

    Accepts PosteriorDraws or an array (chains, draws[, dimension]).  Constant
    parameters get NaN.
    """
    x = draws.params if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
    chains, n = x.shape[:2]
    if chains < 2 or n < 10:
        raise ValueError("R-hat needs at least 2 chains with at least 10 draws each")
    half = n // 2
    split = np.concatenate([x[:, :half], x[:, n - half :]], axis=0)
    means = split.mean(axis=1)
    within = split.var(axis=1, ddof=1).mean(axis=0)
    between = half * means.var(axis=0, ddof=1)
    var_plus = (half - 1) / half * within + between / half
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.sqrt(var_plus / within)
    out = np.where(within > 0, out, np.nan)
    return out[0] if squeeze else out
