"""Generalized linear models fitted by IRLS on sparse designs.

Families: logistic (binomial with replication weights), Poisson,
quasi-Poisson and negative binomial (``Var = mu + mu^2 / phi``), all with
optional offsets.  Factors enter as treatment-coded sparse columns so that
high-cardinality location effects keep a full covariance matrix.

Rows are put in a canonical order before fitting, so outputs do not depend
on the order of the input rows.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.special import digamma, expit, gammaln, polygamma, xlogy

from .numerics import NotPositiveDefiniteError, solve_spd, spd_inverse

log = logging.getLogger(__name__)

FAMILIES = ("Binomial", "Poisson", "QuasiPoisson", "NegBin")
MAX_ITER = 100
GRAD_TOL = 1e-8
LOGLIK_RTOL = 1e-10
PHI_MAX = 1e8


class RankDeficientError(ValueError):
    pass


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class Factor:
    name: str
    levels: tuple[str, ...]  # reference first
    reference: str

    @property
    def columns(self) -> list[str]:
        return [f"{self.name}[{lev}]" for lev in self.levels[1:]]


@dataclass
class Design:
    """Model matrix plus response, offset and replication weights.

    For the binomial family ``response`` is the success fraction of each row
    and ``weights`` the number of trials it stands for.
    """

    X: sp.csr_matrix
    response: np.ndarray
    names: list[str]
    factors: list[Factor] = field(default_factory=list)
    numeric: list[str] = field(default_factory=list)
    offset: np.ndarray | None = None
    weights: np.ndarray | None = None
    intercept: bool = True
    row_ids: np.ndarray | None = None

    def __post_init__(self):
        self.X = sp.csr_matrix(self.X, dtype=float)
        self.response = np.asarray(self.response, dtype=float)
        n = self.X.shape[0]
        if self.response.shape != (n,):
            raise DesignError("response length does not match design rows")
        self.offset = np.zeros(n) if self.offset is None else np.asarray(self.offset, dtype=float)
        self.weights = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=float)
        if self.row_ids is None:
            self.row_ids = np.arange(n)
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise DesignError("weights must be finite and non-negative")
        if not np.all(np.isfinite(self.offset)):
            bad = self.row_ids[~np.isfinite(self.offset)][:10].tolist()
            raise DesignError(f"non-finite offset (zero exposure?) in rows {bad}")
        if len(self.names) != self.X.shape[1]:
            raise DesignError("one name per design column required")

    @property
    def rows(self) -> int:
        return self.X.shape[0]

    @property
    def nobs(self) -> float:
        return float(self.weights.sum())

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        response: str | np.ndarray,
        factors: Mapping[str, str | None] | Sequence[str] = (),
        numeric: Sequence[str] = (),
        offset: str | np.ndarray | None = None,
        weights: str | np.ndarray | None = None,
        intercept: bool = True,
        collapse: bool = False,
        levels: Mapping[str, Sequence[str]] | None = None,
    ) -> "Design":
        """Build a treatment-coded design from a data frame.

        ``factors`` maps column -> reference level (None: first sorted level).
        Factors without an intercept keep every level only for the first
        factor.  ``collapse`` merges rows that share covariates, offset and
        response, summing weights (a large speed-up for binary stop-level
        data).  Row order is canonicalized.
        """
        if not isinstance(factors, Mapping):
            factors = {f: None for f in factors}
        levels = levels or {}
        n = len(frame)
        y = frame[response].to_numpy(dtype=float) if isinstance(response, str) else np.asarray(response, float)
        off = (
            np.zeros(n)
            if offset is None
            else (frame[offset].to_numpy(dtype=float) if isinstance(offset, str) else np.asarray(offset, float))
        )
        w = (
            np.ones(n)
            if weights is None
            else (frame[weights].to_numpy(dtype=float) if isinstance(weights, str) else np.asarray(weights, float))
        )
        codes, facs = [], []
        for i, (name, ref) in enumerate(factors.items()):
            col = frame[name].astype(str)
            levs = list(levels.get(name) or sorted(col.unique()))
            if ref is None:
                ref = levs[0]
            if ref not in levs:
                raise DesignError(f"reference level {ref!r} not observed for {name}")
            levs = [ref] + [lv for lv in levs if lv != ref]
            code = pd.Categorical(col, categories=levs).codes.astype(np.int64)
            if np.any(code < 0):
                raise DesignError(f"{name} has levels outside {levs}")
            codes.append(code)
            facs.append(Factor(name, tuple(levs), ref))
        num = np.column_stack([frame[c].to_numpy(dtype=float) for c in numeric]) if numeric else np.zeros((n, 0))
        if not np.all(np.isfinite(num)):
            raise DesignError("non-finite numeric covariate")
        cat = np.column_stack(codes) if codes else np.zeros((n, 0), dtype=np.int64)
        row_ids = np.arange(n)
        if collapse and n:
            key = pd.DataFrame(np.column_stack([cat, num, off, y]))
            grp = key.groupby(list(key.columns), sort=True)
            first = grp.ngroup().to_numpy()
            m = first.max() + 1
            wsum = np.bincount(first, w, m)
            pick = np.zeros(m, dtype=np.int64)
            pick[first[::-1]] = np.arange(n)[::-1]
            cat, num, off, y, w, row_ids = cat[pick], num[pick], off[pick], y[pick], wsum, row_ids[pick]
        # canonical row order
        order = np.lexsort(tuple(np.column_stack([cat, num, off[:, None], y[:, None], w[:, None]]).T[::-1]))
        cat, num, off, y, w, row_ids = cat[order], num[order], off[order], y[order], w[order], row_ids[order]
        return cls._assemble(cat, num, facs, list(numeric), y, off, w, intercept, row_ids)

    @classmethod
    def _assemble(cls, cat, num, facs, numeric, y, off, w, intercept, row_ids) -> "Design":
        n = len(y)
        blocks, names = [], []
        if intercept:
            blocks.append(sp.csr_matrix(np.ones((n, 1))))
            names.append("(Intercept)")
        for j, fac in enumerate(facs):
            keep_all = not intercept and j == 0
            k = len(fac.levels)
            code = cat[:, j]
            start = 0 if keep_all else 1
            mask = code >= start
            mat = sp.csr_matrix(
                (np.ones(mask.sum()), (np.nonzero(mask)[0], code[mask] - start)), shape=(n, k - start)
            )
            blocks.append(mat)
            names.extend(f"{fac.name}[{lev}]" for lev in fac.levels[start:])
        if num.shape[1]:
            blocks.append(sp.csr_matrix(num))
            names.extend(numeric)
        X = sp.hstack(blocks, format="csr") if blocks else sp.csr_matrix((n, 0))
        return cls(X, y, names, facs, numeric, off, w, intercept, row_ids)


@dataclass
class FitResult:
    family: str
    names: list[str]
    coef: np.ndarray
    covariance: np.ndarray
    dispersion: float
    converged: bool
    iterations: int
    loglik: float
    nobs: float
    df_resid: float
    dispersion_se: float | None = None
    cov_type: str = "model"
    factors: list[Factor] = field(default_factory=list)
    numeric: list[str] = field(default_factory=list)
    intercept: bool = True
    flags: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def coefficients(self) -> pd.Series:
        return pd.Series(self.coef, index=self.names)

    @property
    def se(self) -> pd.Series:
        return pd.Series(self.std_errors, index=self.names)

    def __getitem__(self, name: str) -> float:
        return float(self.coef[self.names.index(name)])

    def stderr(self, name: str) -> float:
        return float(self.std_errors[self.names.index(name)])

    def table(self) -> pd.DataFrame:
        se = self.std_errors
        with np.errstate(divide="ignore", invalid="ignore"):
            z = self.coef / se
        return pd.DataFrame({"term": self.names, "estimate": self.coef, "std_error": se, "z": z})

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or not math.isfinite(v) else float(v)

        return {
            "family": self.family,
            "coefficients": [
                {"term": n, "estimate": clean(c), "std_error": clean(s)}
                for n, c, s in zip(self.names, self.coef, self.std_errors)
            ],
            "covariance": [[clean(v) for v in row] for row in self.covariance],
            "dispersion": clean(self.dispersion),
            "dispersion_se": clean(self.dispersion_se),
            "cov_type": self.cov_type,
            "convergence": {
                "converged": self.converged,
                "iterations": self.iterations,
                "loglik": clean(self.loglik),
                "flags": list(self.flags),
            },
            "nobs": self.nobs,
            "df_resid": self.df_resid,
            "factors": [{"name": f.name, "levels": list(f.levels), "reference": f.reference} for f in self.factors],
            "numeric": list(self.numeric),
            "intercept": self.intercept,
            "metadata": self.metadata,
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        nan = float("nan")
        conv = d["convergence"]
        return cls(
            family=d["family"],
            names=[c["term"] for c in d["coefficients"]],
            coef=np.array([nan if c["estimate"] is None else c["estimate"] for c in d["coefficients"]]),
            covariance=np.array([[nan if v is None else v for v in row] for row in d["covariance"]], dtype=float),
            dispersion=nan if d["dispersion"] is None else d["dispersion"],
            dispersion_se=d.get("dispersion_se"),
            converged=conv["converged"],
            iterations=conv["iterations"],
            loglik=nan if conv["loglik"] is None else conv["loglik"],
            flags=list(conv.get("flags", [])),
            nobs=d["nobs"],
            df_resid=d["df_resid"],
            cov_type=d.get("cov_type", "model"),
            factors=[Factor(f["name"], tuple(f["levels"]), f["reference"]) for f in d.get("factors", [])],
            numeric=list(d.get("numeric", [])),
            intercept=d.get("intercept", True),
            metadata=d.get("metadata", {}),
        )

    @classmethod
    def from_json(cls, text_or_path) -> "FitResult":
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            text = Path(text_or_path).read_text()
        return cls.from_dict(json.loads(text))


# -- family pieces -------------------------------------------------------


def _mean(family: str, eta: np.ndarray) -> np.ndarray:
    if family == "Binomial":
        return expit(eta)
    return np.exp(np.minimum(eta, 700.0))


def _variance(family: str, mu: np.ndarray, phi: float) -> np.ndarray:
    if family == "Binomial":
        return mu * (1.0 - mu)
    if family == "NegBin":
        return mu + mu * mu / phi
    return mu


def loglik(family: str, y: np.ndarray, mu: np.ndarray, w: np.ndarray, phi: float = math.inf) -> float:
    """Weighted log-likelihood (quasi-Poisson uses the Poisson likelihood)."""
    if family == "Binomial":
        return float(np.sum(w * (xlogy(y, mu) + xlogy(1.0 - y, 1.0 - mu))))
    if family == "NegBin" and math.isfinite(phi):
        ll = (
            gammaln(y + phi)
            - gammaln(phi)
            - gammaln(y + 1.0)
            + phi * (np.log(phi) - np.log(phi + mu))
            + xlogy(y, mu)
            - xlogy(y, phi + mu)
        )
        return float(np.sum(w * ll))
    return float(np.sum(w * (xlogy(y, mu) - mu - gammaln(y + 1.0))))


def _score_and_info(family, X, y, mu, w, phi):
    # log/logit links: d mu / d eta = var for canonical, mu for log-link NegBin
    dmu = mu * (1.0 - mu) if family == "Binomial" else mu
    var = _variance(family, mu, phi)
    wt = w * dmu * dmu / var
    score = X.T @ (w * (y - mu) * dmu / var)
    info = (X.T @ sp.diags(wt) @ X).toarray()
    return score, info, wt, dmu, var


def _check_columns(design: Design) -> None:
    used = np.asarray((abs(design.X).T @ (design.weights > 0).astype(float))).ravel()
    empty = [n for n, u in zip(design.names, used) if u == 0]
    if empty:
        raise RankDeficientError(f"design columns with no observations: {empty[:10]}")


def _irls(
    design: Design, family: str, phi: float = math.inf, beta0: np.ndarray | None = None, max_iter: int = MAX_ITER
):
    X, y, w, off = design.X, design.response, design.weights, design.offset
    p = X.shape[1]
    if beta0 is None:
        beta = np.zeros(p)
        ybar = np.sum(w * y) / max(np.sum(w), 1e-300)
        if design.intercept and p:
            if family == "Binomial":
                beta[0] = math.log(max(ybar, 1e-6) / max(1 - ybar, 1e-6))
            else:
                exposure = np.sum(w * np.exp(off)) / max(np.sum(w), 1e-300)
                beta[0] = math.log(max(ybar, 1e-10) / exposure)
    else:
        beta = beta0.copy()
    eta = X @ beta + off
    mu = _mean(family, eta)
    ll = loglik(family, y, mu, w, phi)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        score, info, *_ = _score_and_info(family, X, y, mu, w, phi)
        try:
            step = solve_spd(info, score)
        except NotPositiveDefiniteError as exc:
            raise RankDeficientError(f"information matrix not positive definite ({exc}); collinear design?") from exc
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            eta_c = X @ cand + off
            mu_c = _mean(family, eta_c)
            ll_c = loglik(family, y, mu_c, w, phi)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            break
        change = abs(ll_c - ll) / max(abs(ll_c), 1.0)
        beta, mu, ll = cand, mu_c, ll_c
        grad = np.max(np.abs(score)) if p else 0.0
        if grad <= GRAD_TOL or (change <= LOGLIK_RTOL and np.max(np.abs(t * step)) <= 1e-8):
            score, *_ = _score_and_info(family, X, y, mu, w, phi)
            if np.max(np.abs(score), initial=0.0) <= 1e-6:
                converged = True
                break
    score, info, *_ = _score_and_info(family, X, y, mu, w, phi)
    return beta, mu, ll, info, converged, it, score


def _finish(design, family, beta, info, ll, converged, it, dispersion=1.0, flags=None, **extra) -> FitResult:
    try:
        cov = spd_inverse(info)
    except NotPositiveDefiniteError as exc:
        raise RankDeficientError(str(exc)) from exc
    p = len(beta)
    return FitResult(
        family=family,
        names=list(design.names),
        coef=beta,
        covariance=cov * dispersion if family == "QuasiPoisson" else cov,
        dispersion=dispersion,
        converged=converged,
        iterations=it,
        loglik=ll,
        nobs=design.nobs,
        df_resid=design.nobs - p,
        factors=list(design.factors),
        numeric=list(design.numeric),
        intercept=design.intercept,
        flags=list(flags or []),
        **extra,
    )


def fit_logistic(design: Design, max_iter: int = MAX_ITER) -> FitResult:
    """Logistic regression by IRLS; flags separation as non-convergence."""
    y = design.response
    if np.any((y < 0) | (y > 1)):
        raise DesignError("logistic response must be a success fraction in [0, 1]")
    _check_columns(design)
    beta, mu, ll, info, converged, it, _ = _irls(design, "Binomial", max_iter=max_iter)
    flags = []
    fitted_edge = np.any((mu < 1e-10) | (mu > 1 - 1e-10))
    if np.max(np.abs(beta), initial=0.0) > 20 or fitted_edge:
        flags.append("separation: fitted probabilities at 0 or 1, coefficients diverging")
        converged = False
        log.warning("logistic fit: quasi-complete separation detected")
    if not converged and "separation" not in " ".join(flags):
        flags.append(f"IRLS did not converge in {it} iterations")
    return _finish(design, "Binomial", beta, info, ll, converged, it, flags=flags)


def _nb_phi_derivs(y, mu, w, phi):
    s = np.sum(w * (digamma(y + phi) - digamma(phi) + np.log(phi) - np.log(phi + mu) + 1.0 - (y + phi) / (phi + mu)))
    h = np.sum(
        w
        * (
            polygamma(1, y + phi)
            - polygamma(1, phi)
            + 1.0 / phi
            - 2.0 / (phi + mu)
            + (y + phi) / (phi + mu) ** 2
        )
    )
    return float(s), float(h)


def _nb_update_phi(y, mu, w, phi, iters: int = 50):
    """Newton on log(phi) with step halving."""
    ll = loglik("NegBin", y, mu, w, phi)
    for _ in range(iters):
        s, h = _nb_phi_derivs(y, mu, w, phi)
        g = phi * s
        H = phi * phi * h + phi * s
        step = -g / H if H < 0 else math.copysign(1.0, g)
        step = max(min(step, 5.0), -5.0)
        t = 1.0
        while t > 1e-8:
            cand = phi * math.exp(t * step)
            ll_c = loglik("NegBin", y, mu, w, cand)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            break
        moved = abs(math.log(cand) - math.log(phi))
        phi, ll = cand, ll_c
        if moved < 1e-10 or phi > PHI_MAX:
            break
    return phi, ll


def fit_count(design: Design, family: str = "NegBin", max_iter: int = MAX_ITER) -> FitResult:
    """Poisson, quasi-Poisson or negative binomial regression with log link."""
    if family not in ("Poisson", "QuasiPoisson", "NegBin"):
        raise ValueError(f"unknown count family {family!r}")
    y = design.response
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise DesignError("count response must be non-negative integers")
    _check_columns(design)
    beta, mu, ll, info, converged, it, _ = _irls(design, "Poisson", max_iter=max_iter)
    w = design.weights
    if family == "Poisson":
        return _finish(design, "Poisson", beta, info, ll, converged, it)
    if family == "QuasiPoisson":
        p = len(beta)
        chi2 = float(np.sum(w * (y - mu) ** 2 / mu))
        disp = chi2 / max(design.nobs - p, 1.0)
        return _finish(design, "QuasiPoisson", beta, info, ll, converged, it, dispersion=disp)

    # negative binomial: alternate IRLS (phi fixed) and Newton on log phi
    excess = np.sum(w * ((y - mu) ** 2 - mu))
    phi = float(np.sum(w * mu * mu) / excess) if excess > 0 else 1e6
    phi = min(max(phi, 1e-3), 1e6)
    total_it = it
    ll_old = -math.inf
    converged = False
    for outer in range(MAX_ITER):
        beta, mu, ll, info, inner_ok, it, _ = _irls(design, "NegBin", phi, beta0=beta, max_iter=max_iter)
        total_it += it
        phi_new, ll = _nb_update_phi(y, mu, w, phi)
        dphi = abs(math.log(phi_new) - math.log(phi))
        phi = phi_new
        if phi > PHI_MAX:
            break
        if inner_ok and dphi < 1e-8 and abs(ll - ll_old) <= LOGLIK_RTOL * max(abs(ll), 1.0):
            converged = True
            break
        ll_old = ll
    if phi > PHI_MAX:
        log.warning("negative binomial dispersion diverged; data look equidispersed, returning Poisson fit")
        fit = fit_count(design, "Poisson", max_iter)
        fit.flags.append("dispersion diverged (phi -> infinity); Poisson fit returned")
        fit.dispersion = math.inf
        return fit
    beta, mu, ll, info, inner_ok, it, _ = _irls(design, "NegBin", phi, beta0=beta, max_iter=max_iter)
    _, h = _nb_phi_derivs(y, mu, w, phi)
    phi_se = math.sqrt(-1.0 / h) if h < 0 else math.nan
    flags = [] if converged else ["negative binomial alternation did not converge"]
    return _finish(
        design, "NegBin", beta, info, ll, converged and inner_ok, total_it, dispersion=phi, flags=flags, dispersion_se=phi_se
    )


def sandwich_errors(fit: FitResult, design: Design) -> FitResult:
    """Replace the covariance by the HC0 sandwich ``H^-1 (sum g_i g_i') H^-1``.

    ``H`` is the information at the estimate and ``g_i`` the per-observation
    score; rows standing for ``w`` identical observations contribute ``w``
    times their squared score.  Coefficients are unchanged.
    """
    if list(design.names) != list(fit.names):
        raise DesignError("design does not match the fit")
    family = "Binomial" if fit.family == "Binomial" else ("NegBin" if fit.family == "NegBin" else "Poisson")
    phi = fit.dispersion if family == "NegBin" else math.inf
    X, y, w = design.X, design.response, design.weights
    mu = _mean(family, X @ fit.coef + design.offset)
    _, info, _, dmu, var = _score_and_info(family, X, y, mu, w, phi)
    u = (y - mu) * dmu / var
    meat = (X.T @ sp.diags(w * u * u) @ X).toarray()
    try:
        bread = spd_inverse(info)
    except NotPositiveDefiniteError as exc:
        raise RankDeficientError(f"singular information matrix: {exc}") from exc
    cov = bread @ meat @ bread
    cov = 0.5 * (cov + cov.T)
    return replace(fit, covariance=cov, cov_type="sandwich (HC0)", flags=list(fit.flags))


def score(fit: FitResult, design: Design) -> np.ndarray:
    """Score vector of the log-likelihood at the fitted coefficients."""
    family = "Binomial" if fit.family == "Binomial" else ("NegBin" if fit.family == "NegBin" else "Poisson")
    phi = fit.dispersion if family == "NegBin" else math.inf
    mu = _mean(family, design.X @ fit.coef + design.offset)
    g, *_ = _score_and_info(family, design.X, design.response, mu, design.weights, phi)
    return np.asarray(g)


def linear_predictor(fit: FitResult, profile: Mapping[str, object]) -> float:
    """Linear predictor at a profile (offset excluded).

    Each factor takes a level, or a mapping level -> weight, in which case
    the factor's contribution is the weighted average of its level effects.
    Numeric covariates take a number (missing ones default to 0).
    """
    coef = fit.coefficients
    eta = float(coef.get("(Intercept)", 0.0)) if fit.intercept else 0.0
    for fac in fit.factors:
        if fac.name not in profile:
            raise KeyError(f"profile does not assign a level to {fac.name}")
        value = profile[fac.name]
        spec = dict(value) if isinstance(value, Mapping) else {value: 1.0}
        total = sum(spec.values())
        if total <= 0:
            raise ValueError(f"weights for {fac.name} must sum to a positive value")
        for level, wt in spec.items():
            level = str(level)
            if level not in fac.levels:
                raise KeyError(f"unknown level {level!r} for {fac.name}")
            name = f"{fac.name}[{level}]"
            eta += wt / total * float(coef.get(name, 0.0))
    for name in fit.numeric:
        eta += float(profile.get(name, 0.0)) * float(coef[name])
    return eta


def predict_rate(fit: FitResult, profile: Mapping[str, object]) -> float:
    """Inverse link of the linear predictor at ``profile`` (rate per unit exposure)."""
    eta = linear_predictor(fit, profile)
    return float(expit(eta)) if fit.family == "Binomial" else math.exp(eta)
