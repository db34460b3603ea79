import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from bicmix.gig import GigParamError, GigParams, gig_log_density, sample_gig
from bicmix.mcmc import sample_gig as sample_gig_scalar
from oracles import chisquare_gof, gig_quadrature

N = 100_000

# (p, a, b): worked cases, the gamma (b = 0) and inverse-Gaussian (p = -1/2)
# limits, tiny and huge concentrations, and the large |order| used by dense
# column scales
GRID = [
    (2.0, 3.0, 5.0),
    (-0.5, 1.0, 1.0),
    (1.5, 2.0, 0.0),
    (0.3, 1.0, 0.0),
    (-3.0, 2.0, 0.5),
    (0.0, 1.0, 1.0),
    (0.2, 1e-3, 1e-3),
    (5.0, 1.0, 100.0),
    (-50.5, 2.0, 30.0),
    (51.0, 2.0, 1e-4),
    (0.5, 1e4, 1e-2),
    (-1.0, 1e-2, 1e2),
]


@pytest.mark.parametrize("p,a,b", GRID)
def test_moments_match_quadrature(p, a, b):
    rng = np.random.default_rng(12345)
    x = sample_gig(p, a, b, rng, size=N)
    _, m1, m2, _ = gig_quadrature(p, a, b)
    se1 = x.std(ddof=1) / np.sqrt(N)
    se2 = (x**2).std(ddof=1) / np.sqrt(N)
    assert abs(x.mean() - m1) <= 3 * se1
    assert abs((x**2).mean() - m2) <= 3 * se2


@pytest.mark.parametrize("p,a,b", [(2.0, 3.0, 5.0), (-0.5, 1.0, 1.0), (-3.0, 2.0, 0.5), (0.2, 1e-3, 1e-3), (-50.5, 2.0, 30.0)])
def test_goodness_of_fit(p, a, b):
    rng = np.random.default_rng(7)
    x = sample_gig(p, a, b, rng, size=N)
    _, _, _, cdf = gig_quadrature(p, a, b)
    edges = np.quantile(x, np.linspace(0, 1, 41)[1:-1])
    assert chisquare_gof(x, cdf, edges=edges) > 0.01


@pytest.mark.parametrize("p,a,b", [(1e-7, 1e-2, 1e-2), (0.0, 0.05, 0.05), (0.5, 1e-2, 1e-2), (-0.9, 1e-3, 1e-1)])
def test_goodness_of_fit_small_concentration(p, a, b):
    # these land in the power/exponential hat branch
    rng = np.random.default_rng(21)
    x = sample_gig(p, a, b, rng, size=N)
    _, _, _, cdf = gig_quadrature(p, a, b)
    edges = np.quantile(x, np.linspace(0, 1, 41)[1:-1])
    assert chisquare_gof(x, cdf, edges=edges) > 0.01


@pytest.mark.parametrize("p", [5e-324, -2.2e-313, 2.2e-309, 1e-300])
def test_subnormal_order_terminates(p):
    x = sample_gig(p, 10**-4.7, 10**-0.8, np.random.default_rng(1099), size=50)
    assert np.all(np.isfinite(x)) and np.all(x > 0)


def test_gamma_limit_mean():
    rng = np.random.default_rng(0)
    p, a = 1.7, 0.6
    x = sample_gig(p, a, 0.0, rng, size=N)
    assert abs(x.mean() - 2 * p / a) <= 3 * x.std(ddof=1) / np.sqrt(N)


def test_log_density_normalized():
    from scipy import integrate

    for p, a, b in [(2.0, 3.0, 5.0), (-0.5, 1.0, 1.0), (1.5, 2.0, 0.0)]:
        total = integrate.quad(lambda t: np.exp(gig_log_density(t, p, a, b)), 0, np.inf, limit=200)[0]
        assert total == pytest.approx(1.0, rel=1e-8)


@pytest.mark.parametrize("p,a,b", [(1.0, 0.0, 1.0), (1.0, -1.0, 1.0), (1.0, 1.0, -0.1), (0.0, 1.0, 0.0), (-1.0, 1.0, 0.0), (np.nan, 1.0, 1.0)])
def test_invalid_parameters_rejected(p, a, b):
    with pytest.raises(GigParamError):
        GigParams(p, a, b)
    with pytest.raises(GigParamError):
        sample_gig(p, a, b, np.random.default_rng(0))


def test_scalar_wrapper_and_determinism():
    v1 = sample_gig_scalar(GigParams(0.5, 2.0, 3.0), np.random.default_rng(3))
    v2 = sample_gig_scalar(GigParams(0.5, 2.0, 3.0), np.random.default_rng(3))
    assert isinstance(v1, float) and v1 == v2 and v1 > 0


def test_broadcasting_shapes():
    rng = np.random.default_rng(0)
    out = sample_gig(np.array([0.5, -2.0, 3.0]), 1.0, np.array([[1.0], [2.0]]), rng)
    assert out.shape == (2, 3) and np.all(out > 0)


@settings(max_examples=60, deadline=None)
@given(
    p=st.floats(-60, 60),
    log_a=st.floats(-8, 8),
    log_b=st.floats(-8, 8),
    seed=st.integers(0, 2**32 - 1),
)
def test_draws_positive_and_finite(p, log_a, log_b, seed):
    x = sample_gig(p, 10**log_a, 10**log_b, np.random.default_rng(seed), size=50)
    assert np.all(np.isfinite(x)) and np.all(x > 0)


def test_inverse_gaussian_against_scipy():
    # p = -1/2 is the inverse Gaussian with mean sqrt(b/a) and shape b
    rng = np.random.default_rng(11)
    a, b = 2.0, 3.0
    x = sample_gig(-0.5, a, b, rng, size=N)
    mu, lam = np.sqrt(b / a), b
    dist = stats.invgauss(mu / lam, scale=lam)
    assert stats.kstest(x, dist.cdf).pvalue > 0.01
