"""Special functions, SPD solves and reproducible random streams.

The regularized incomplete beta function is evaluated with a continued
fraction (switching to the symmetric form when ``x > (a+1)/(a+b+2)``).  The
same recurrence is differentiated in forward mode so that the threshold
model can get exact gradients of ``log I_x(a, b)`` and ``log(1 - I_x(a, b))``
with respect to ``a``, ``b`` and ``x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from numba import njit

_CF_MAXIT = 50_000
_CF_EPS = 1e-16


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix expected to be SPD fails factorization."""


@njit(cache=True, nogil=True)
def _digamma(x):
    result = 0.0
    while x < 10.0:
        result -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (
        1.0 / 12
        - inv2
        * (
            1.0 / 120
            - inv2
            * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760 - inv2 / 12))))
        )
    )
    return result + math.log(x) - 0.5 * inv - series


@njit(cache=True, nogil=True)
def _betacf(a, b, x):
    """Continued fraction K with I_x(a,b) = x^a (1-x)^b / (a B(a,b)) * K.

    Returns (K, dK/da, dK/db).  Converges fast for x < (a+1)/(a+b+2).
    """
    am2 = 0.0
    am1 = 1.0
    bm2 = 1.0
    bm1 = 1.0
    am2_a = 0.0
    am2_b = 0.0
    am1_a = 0.0
    am1_b = 0.0
    bm2_a = 0.0
    bm2_b = 0.0
    bm1_a = 0.0
    bm1_b = 0.0
    k_prev = 1.0
    ka_prev = 0.0
    kb_prev = 0.0
    settled = 0
    for j in range(1, _CF_MAXIT):
        if j % 2 == 1:
            m = (j - 1) // 2
            c1 = a + m
            c2 = a + b + m
            c3 = a + 2 * m
            c4 = c3 + 1.0
            d = -c1 * c2 * x / (c3 * c4)
            d_a = d * (1.0 / c1 + 1.0 / c2 - 1.0 / c3 - 1.0 / c4)
            d_b = d / c2
        else:
            m = j // 2
            c3 = a + 2 * m - 1.0
            c4 = c3 + 1.0
            den = c3 * c4
            d = m * (b - m) * x / den
            d_a = -d * (1.0 / c3 + 1.0 / c4)
            d_b = m * x / den
        an = am1 + d * am2
        bn = bm1 + d * bm2
        an_a = am1_a + d_a * am2 + d * am2_a
        an_b = am1_b + d_b * am2 + d * am2_b
        bn_a = bm1_a + d_a * bm2 + d * bm2_a
        bn_b = bm1_b + d_b * bm2 + d * bm2_b
        if bn != 0.0:
            s = 1.0 / bn
            an *= s
            an_a *= s
            an_b *= s
            bn_a *= s
            bn_b *= s
            bn = 1.0
            am1 *= s
            am1_a *= s
            am1_b *= s
            bm1 *= s
            bm1_a *= s
            bm1_b *= s
        am2, am1 = am1, an
        bm2, bm1 = bm1, bn
        am2_a, am1_a = am1_a, an_a
        am2_b, am1_b = am1_b, an_b
        bm2_a, bm1_a = bm1_a, bn_a
        bm2_b, bm1_b = bm1_b, bn_b
        k = an / bn
        ka = (an_a * bn - an * bn_a) / (bn * bn)
        kb = (an_b * bn - an * bn_b) / (bn * bn)
        scale = abs(k)
        if (
            abs(k - k_prev) <= _CF_EPS * scale
            and abs(ka - ka_prev) <= 1e-15 * (abs(ka) + scale)
            and abs(kb - kb_prev) <= 1e-15 * (abs(kb) + scale)
        ):
            settled += 1
            if settled >= 2:
                return k, ka, kb
        else:
            settled = 0
        k_prev = k
        ka_prev = ka
        kb_prev = kb
    return np.nan, np.nan, np.nan


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@njit(cache=True, nogil=True)
def _stirling_corr(x):
    # lgamma(x) - ((x - 0.5) log x - x + 0.5 log 2pi), valid for x >= 10
    inv = 1.0 / x
    z = inv * inv
    return inv * (
        1.0 / 12
        + z
        * (
            -1.0 / 360
            + z
            * (
                1.0 / 1260
                + z * (-1.0 / 1680 + z * (1.0 / 1188 + z * (-691.0 / 360360 + z * (1.0 / 156 - z * 3617.0 / 122400))))
            )
        )
    )


@njit(cache=True, nogil=True)
def _rlog1(e):
    # e - log(1 + e) without cancellation near 0
    if abs(e) > 0.5:
        return e - math.log1p(e)
    w = e / (2.0 + e)
    w2 = w * w
    term = w * w2
    acc = 0.0
    k = 3.0
    while True:
        add = term / k
        acc += add
        if abs(add) <= 1e-17 * abs(acc):
            break
        term *= w2
        k += 2.0
    return e * e / (2.0 + e) - 2.0 * acc


@njit(cache=True, nogil=True)
def _algdiv(a, b):
    # lgamma(b) - lgamma(a + b) for b >= 10
    c = a / b
    return (
        -a * math.log(a + b)
        + b * _rlog1(c)
        + 0.5 * math.log1p(c)
        + _stirling_corr(b)
        - _stirling_corr(a + b)
    )


@njit(cache=True, nogil=True)
def _log_front(a, b, x, lx, ly):
    """log(x^a (1-x)^b / B(a, b)) with large-argument cancellation removed."""
    if a >= 10.0 and b >= 10.0:
        s = a + b
        if a <= b:
            lam = a - s * x
        else:
            lam = s * (1.0 - x) - b
        u = _rlog1(-lam / a)
        v = _rlog1(lam / b)
        corr = _stirling_corr(a) + _stirling_corr(b) - _stirling_corr(s)
        return -_HALF_LOG_2PI + 0.5 * (math.log(a) + math.log(b) - math.log(s)) - (a * u + b * v) - corr
    if b >= 10.0:
        return a * lx + b * ly - math.lgamma(a) - _algdiv(a, b)
    if a >= 10.0:
        return a * lx + b * ly - math.lgamma(b) - _algdiv(b, a)
    return a * lx + b * ly - (math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b))


@njit(cache=True, nogil=True)
def _log_betainc_kernel(x, a, b, out):
    """Fill out[0:8] with log I, log(1-I) and their a, b, x derivatives.

    Layout: logL, logU, dlogL/da, dlogL/db, dlogU/da, dlogU/db, dlogL/dx, dlogU/dx.
    Requires 0 < x < 1 and a, b > 0.
    """
    lx = math.log(x)
    l1x = math.log1p(-x)
    front = _log_front(a, b, x, lx, l1x)
    log_dens = front - lx - l1x
    psab = _digamma(a + b)
    if x < (a + 1.0) / (a + b + 2.0):
        k, k_a, k_b = _betacf(a, b, x)
        log_l = front - math.log(a) + math.log(k)
        dl_a = lx - _digamma(a) + psab - 1.0 / a + k_a / k
        dl_b = l1x - _digamma(b) + psab + k_b / k
        log_u = math.log1p(-math.exp(log_l))
        r = math.exp(log_l - log_u)
        du_a = -r * dl_a
        du_b = -r * dl_b
    else:
        k, k_b, k_a = _betacf(b, a, 1.0 - x)
        log_u = front - math.log(b) + math.log(k)
        du_b = l1x - _digamma(b) + psab - 1.0 / b + k_b / k
        du_a = lx - _digamma(a) + psab + k_a / k
        log_l = math.log1p(-math.exp(log_u))
        r = math.exp(log_u - log_l)
        dl_a = -r * du_a
        dl_b = -r * du_b
    out[0] = log_l
    out[1] = log_u
    out[2] = dl_a
    out[3] = dl_b
    out[4] = du_a
    out[5] = du_b
    out[6] = math.exp(log_dens - log_l)
    out[7] = -math.exp(log_dens - log_u)


@njit(cache=True, nogil=True)
def _log_betainc_grad_vec(x, a, b):
    n = x.shape[0]
    out = np.empty((8, n))
    buf = np.empty(8)
    for i in range(n):
        _log_betainc_kernel(x[i], a[i], b[i], buf)
        for j in range(8):
            out[j, i] = buf[j]
    return out


class LogBetaIncGrad(NamedTuple):
    """log I_x(a,b), log(1 - I_x(a,b)) and their partial derivatives."""

    log_lower: np.ndarray
    log_upper: np.ndarray
    dlower_da: np.ndarray
    dlower_db: np.ndarray
    dupper_da: np.ndarray
    dupper_db: np.ndarray
    dlower_dx: np.ndarray
    dupper_dx: np.ndarray


def _check_domain(x, a, b, open_interval=False):
    if np.any(~np.isfinite(a)) or np.any(~np.isfinite(b)) or np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("incomplete beta requires finite a > 0 and b > 0")
    if open_interval:
        if np.any(~(x > 0)) or np.any(~(x < 1)):
            raise ValueError("x must lie strictly inside (0, 1)")
    elif np.any(~(x >= 0)) or np.any(~(x <= 1)):
        raise ValueError("x must lie in [0, 1]")


def log_betainc_grad(x, a, b) -> LogBetaIncGrad:
    """Log-space lower/upper regularized incomplete beta with gradients.

    All inputs are broadcast to a common 1-d shape; ``x`` must be in (0, 1).
    """
    x, a, b = (np.ascontiguousarray(v, dtype=float).ravel() for v in np.broadcast_arrays(x, a, b))
    _check_domain(x, a, b, open_interval=True)
    return LogBetaIncGrad(*_log_betainc_grad_vec(x, a, b))


def log_reg_inc_beta(x, a, b):
    """Return ``(log I_x(a,b), log(1 - I_x(a,b)))`` elementwise; endpoints allowed."""
    x, a, b = np.broadcast_arrays(
        np.asarray(x, dtype=float), np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    )
    _check_domain(x, a, b)
    shape = x.shape
    x, a, b = (np.ascontiguousarray(v).ravel() for v in (x, a, b))
    log_l = np.empty_like(x)
    log_u = np.empty_like(x)
    lo = x == 0
    hi = x == 1
    inner = ~(lo | hi)
    log_l[lo], log_u[lo] = -np.inf, 0.0
    log_l[hi], log_u[hi] = 0.0, -np.inf
    if inner.any():
        res = _log_betainc_grad_vec(x[inner], a[inner], b[inner])
        log_l[inner] = res[0]
        log_u[inner] = res[1]
    return log_l.reshape(shape), log_u.reshape(shape)


def reg_inc_beta(x, a, b):
    """Regularized incomplete beta function I_x(a, b).

    Scalars in, float out; arrays broadcast elementwise.
    """
    log_l, log_u = log_reg_inc_beta(x, a, b)
    # whichever tail is smaller carries the precision
    value = np.where(log_l <= log_u, np.exp(log_l), -np.expm1(log_u))
    return float(value) if value.ndim == 0 else value


@dataclass(frozen=True)
class BetaShape:
    """Beta distribution by mean ``phi`` and total count ``lam``."""

    phi: float
    lam: float

    def __post_init__(self):
        if not (0 < self.phi < 1) or not (self.lam > 0) or not np.isfinite(self.lam):
            raise ValueError(f"invalid beta shape phi={self.phi}, lambda={self.lam}")

    @property
    def alpha(self) -> float:
        return self.phi * self.lam

    @property
    def beta(self) -> float:
        return (1.0 - self.phi) * self.lam


class TailRates(NamedTuple):
    search_rate: float
    hit_rate: float
    degenerate: bool


def beta_tail_rates(phi, lam, t):
    """Vectorized search and hit rates for beta signals thresholded at ``t``.

    search = P(p >= t), hit = E[p | p >= t].  Returns ``(search, hit, degenerate)``
    arrays; degenerate entries (empty upper tail, e.g. t = 1) carry hit rate 0.
    The hit rate is formed from log tails, so it stays accurate when the
    search rate underflows.
    """
    phi, lam, t = np.broadcast_arrays(
        np.asarray(phi, dtype=float), np.asarray(lam, dtype=float), np.asarray(t, dtype=float)
    )
    if np.any(~((phi > 0) & (phi < 1))) or np.any(~(lam > 0)):
        raise ValueError("phi must be in (0, 1) and lambda > 0")
    a = phi * lam
    b = (1.0 - phi) * lam
    _, log_s = log_reg_inc_beta(t, a, b)
    _, log_s1 = log_reg_inc_beta(t, a + 1.0, b)
    search = np.exp(log_s)
    # an upper tail that merely underflows still has a well-defined hit rate
    degenerate = ~(log_s > -np.inf)
    with np.errstate(invalid="ignore", divide="ignore"):
        hit = np.exp(np.log(phi) + log_s1 - log_s)
    hit = np.where(degenerate, 0.0, hit)
    return search, hit, degenerate


def beta_tail_mean(shape: BetaShape, t: float) -> TailRates:
    """Search rate P(p >= t) and hit rate E[p | p >= t] for p ~ beta(shape)."""
    if not 0 <= t <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    s, h, deg = beta_tail_rates(shape.phi, shape.lam, t)
    return TailRates(float(s), float(h), bool(deg))


def solve_spd(matrix, rhs, *, rtol: float = 1e-8) -> np.ndarray:
    """Solve ``matrix @ x = rhs`` for symmetric positive-definite ``matrix``.

    Accepts dense arrays or scipy sparse matrices.  Raises
    NotPositiveDefiniteError when the Cholesky factorization fails, which in
    IRLS means a collinear design.
    """
    rhs = np.asarray(rhs, dtype=float)
    if scipy.sparse.issparse(matrix):
        matrix = matrix.toarray()
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or matrix.shape[0] != rhs.shape[0]:
        raise ValueError("matrix must be square and conformable with rhs")
    try:
        factor = scipy.linalg.cho_factor(matrix, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"matrix is not positive definite: {exc}") from None
    x = scipy.linalg.cho_solve(factor, rhs)
    resid = rhs - matrix @ x
    bound = rtol * max(np.linalg.norm(rhs), np.finfo(float).tiny)
    if np.linalg.norm(resid) > bound:
        x = x + scipy.linalg.cho_solve(factor, resid)
        if np.linalg.norm(rhs - matrix @ x) > bound:
            raise NotPositiveDefiniteError("matrix is numerically singular")
    return x


def spd_inverse(matrix) -> np.ndarray:
    """Inverse of an SPD matrix via Cholesky."""
    if scipy.sparse.issparse(matrix):
        matrix = matrix.toarray()
    matrix = np.asarray(matrix, dtype=float)
    try:
        factor = scipy.linalg.cho_factor(matrix, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"matrix is not positive definite: {exc}") from None
    inv = scipy.linalg.cho_solve(factor, np.eye(matrix.shape[0]))
    return 0.5 * (inv + inv.T)


@dataclass(frozen=True)
class RngState:
    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        return make_rng(self.seed, self.stream_id)


def make_rng(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator keyed on ``(seed, stream_id)``."""
    seq = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(stream_id) & (2**64 - 1),))
    return np.random.Generator(np.random.Philox(seq))
