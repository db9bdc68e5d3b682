import numpy as np
import pytest
import scipy.special
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from patrolstats.numerics import (
    BetaShape,
    NotPositiveDefiniteError,
    RngState,
    beta_tail_mean,
    beta_tail_rates,
    log_betainc_grad,
    log_reg_inc_beta,
    make_rng,
    reg_inc_beta,
    solve_spd,
    spd_inverse,
)

# Frozen with mpmath at 40 digits (betainc / quad of the beta density).
I_02_2_5 = 0.34464
TAIL_SEARCH = 0.6446679520785812077  # phi=0.3, lambda=5, t=0.2
TAIL_HIT = 0.4035485341372668870


def test_reg_inc_beta_closed_form():
    # I_0.2(2,5) = 1 - sum_{j<2} C(6,j) 0.2^j 0.8^(6-j)
    assert reg_inc_beta(0.2, 2.0, 5.0) == pytest.approx(I_02_2_5, rel=1e-14)


def test_reg_inc_beta_matches_scipy_grid():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.001, 0.999, 500)
    a = np.exp(rng.uniform(-3, 5, 500))
    b = np.exp(rng.uniform(-3, 5, 500))
    ref = scipy.special.betainc(a, b, x)
    got = reg_inc_beta(x, a, b)
    mask = ref > 1e-250
    assert np.max(np.abs(got[mask] - ref[mask]) / ref[mask]) < 1e-11


def test_log_tails_stay_finite_far_out():
    # mpmath log I_x(a,b); both underflow in linear space
    lo, hi = log_reg_inc_beta(1e-8, 50.0, 5.0)
    assert lo == pytest.approx(-908.369745755759756, rel=1e-13)
    assert hi == 0.0
    lo, hi = log_reg_inc_beta(1 - 1e-9, 2.0, 80.0)
    assert hi == pytest.approx(-1653.466820064582657, rel=1e-13)
    assert lo == 0.0


def test_endpoints():
    lo, hi = log_reg_inc_beta(np.array([0.0, 1.0]), 2.0, 3.0)
    assert lo[0] == -np.inf and hi[0] == 0.0
    assert lo[1] == 0.0 and hi[1] == -np.inf


def test_domain_errors():
    with pytest.raises(ValueError):
        reg_inc_beta(0.5, -1.0, 2.0)
    with pytest.raises(ValueError):
        reg_inc_beta(1.5, 1.0, 2.0)
    with pytest.raises(ValueError):
        log_betainc_grad(0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        BetaShape(1.2, 3.0)


@pytest.mark.parametrize("x,a,b", [(0.2, 2.0, 5.0), (0.9, 0.3, 7.0), (0.05, 12.0, 40.0), (0.6, 150.0, 90.0)])
def test_gradients_match_finite_differences(x, a, b):
    g = log_betainc_grad(x, a, b)
    h = 1e-6

    def f(x_, a_, b_):
        return np.array(log_reg_inc_beta(x_, a_, b_))

    for idx, (dlo, dhi) in enumerate(
        [(g.dlower_dx, g.dupper_dx), (g.dlower_da, g.dupper_da), (g.dlower_db, g.dupper_db)]
    ):
        args = [x, a, b]
        plus, minus = list(args), list(args)
        plus[idx] += h
        minus[idx] -= h
        fd = (f(*plus) - f(*minus)) / (2 * h)
        assert dlo[0] == pytest.approx(fd[0], rel=1e-5, abs=1e-8)
        assert dhi[0] == pytest.approx(fd[1], rel=1e-5, abs=1e-8)


def test_beta_tail_mean_oracle():
    r = beta_tail_mean(BetaShape(0.3, 5.0), 0.2)
    assert r.search_rate == pytest.approx(TAIL_SEARCH, rel=1e-13)
    assert r.hit_rate == pytest.approx(TAIL_HIT, rel=1e-13)
    assert not r.degenerate


def test_beta_tail_mean_degenerate():
    r = beta_tail_mean(BetaShape(0.3, 5.0), 1.0)
    assert r.degenerate and r.search_rate == 0.0 and r.hit_rate == 0.0


def test_underflowing_tail_keeps_hit_rate():
    # log search rate ~ -4456 (mpmath); the tail is tiny but not empty
    r = beta_tail_mean(BetaShape(0.01, 2000.0), 0.9)
    assert r.search_rate == 0.0 and not r.degenerate
    assert r.hit_rate == pytest.approx(0.9000505333476997263, rel=1e-12)
    r = beta_tail_mean(BetaShape(0.3, 5.0), 0.0)
    assert r.search_rate == pytest.approx(1.0) and r.hit_rate == pytest.approx(0.3)


def test_beta_tail_rates_vectorized_matches_scalar():
    phi = np.array([0.1, 0.4, 0.7])
    lam = np.array([3.0, 20.0, 1.5])
    s, h, _ = beta_tail_rates(phi, lam, 0.25)
    for i in range(3):
        r = beta_tail_mean(BetaShape(phi[i], lam[i]), 0.25)
        assert s[i] == r.search_rate and h[i] == r.hit_rate


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0.01, 0.99),
    st.floats(0.05, 300.0),
    st.floats(0.01, 0.99),
)
def test_tail_rates_properties(phi, lam, t):
    s, h, deg = beta_tail_rates(phi, lam, t)
    assert 0.0 <= s <= 1.0
    if not deg:
        # conditional mean of the upper tail sits above both t and the mean
        assert h >= t - 1e-12
        assert h >= phi - 1e-9
        assert h <= 1.0 + 1e-12


def test_solve_spd_and_inverse():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(6, 6))
    M = A @ A.T + 6 * np.eye(6)
    b = rng.normal(size=6)
    np.testing.assert_allclose(M @ solve_spd(M, b), b, atol=1e-10)
    np.testing.assert_allclose(spd_inverse(M) @ M, np.eye(6), atol=1e-10)
    with pytest.raises(NotPositiveDefiniteError):
        solve_spd(np.array([[1.0, 2.0], [2.0, 1.0]]), np.ones(2))


def test_make_rng_streams_reproducible_and_distinct():
    a = make_rng(5, 0).random(4)
    np.testing.assert_array_equal(a, make_rng(5, 0).random(4))
    np.testing.assert_array_equal(a, RngState(5, 0).generator().random(4))
    assert not np.allclose(a, make_rng(5, 1).random(4))
    assert not np.allclose(a, make_rng(6, 0).random(4))


def test_reg_inc_beta_boundaries_and_uniform():
    assert reg_inc_beta(0.0, 2.5, 0.7) == 0.0 and reg_inc_beta(1.0, 2.5, 0.7) == 1.0
    x = np.linspace(0.0, 1.0, 33)
    np.testing.assert_allclose(reg_inc_beta(x, 1.0, 1.0), x, rtol=1e-14, atol=1e-16)


def test_reg_inc_beta_monotone_in_x():
    x = np.linspace(0.0, 1.0, 2001)
    for a, b in ((0.3, 0.3), (2.0, 5.0), (40.0, 3.0), (200.0, 250.0)):
        assert np.all(np.diff(reg_inc_beta(x, a, b)) >= 0)


@pytest.mark.parametrize("x,a,b", [(0.3, 2.0, 5.0), (0.7, 0.5, 1.5), (0.45, 30.0, 40.0), (0.1, 1.2, 9.0)])
def test_derivative_in_x_is_density(x, a, b):
    h = 1e-6 * x
    fd = (reg_inc_beta(x + h, a, b) - reg_inc_beta(x - h, a, b)) / (2 * h)
    assert fd == pytest.approx(scipy.stats.beta.pdf(x, a, b), rel=1e-6)


def test_solve_spd_examples():
    v = np.array([0.5, -2.0, 3.0])
    np.testing.assert_array_equal(solve_spd(np.eye(3), v), v)
    np.testing.assert_allclose(solve_spd(np.diag([2.0, 4.0]), np.array([2.0, 4.0])), [1.0, 1.0], rtol=1e-15)
    rng = np.random.default_rng(7)
    A = rng.normal(size=(50, 50))
    M = A @ A.T + 50 * np.eye(50)
    b = rng.normal(size=50)
    x = solve_spd(M, b)
    np.testing.assert_allclose(x, np.linalg.inv(M) @ b, rtol=1e-8, atol=1e-12)
    assert np.linalg.norm(M @ x - b) <= 1e-8 * np.linalg.norm(b)


def test_rng_streams_share_no_prefix():
    prefixes = {make_rng(11, stream).integers(0, 2**63, 64).tobytes() for stream in range(32)}
    assert len(prefixes) == 32
    a, b = make_rng(11, 0).integers(0, 2**63, 64), make_rng(11, 1).integers(0, 2**63, 64)
    assert not np.any(a == b)
