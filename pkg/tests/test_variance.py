import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from nmarest.conditional_expectation import Discrete
from nmarest.core_model import Dataset, ResponseModel
from nmarest.errors import EstimationNA
from nmarest.estimators import estimate_proposed
from nmarest.simulation import generate_scenario, scenario
from nmarest.variance_inference import (
    KAPPA_SINGULAR,
    confidence_interval,
    estimate_kappa,
    variance_sandwich,
)

PHI1 = np.array([-1.0, -0.5, 0.75])
MU1 = {(0, 0): 0.5, (0, 1): -0.5, (1, 0): -0.5, (1, 1): 1.0}


class Scaled:
    """``U = c * y``."""

    kind = "scaled"

    def __init__(self, c):
        self.c = c

    def __call__(self, y):
        return self.c * np.asarray(y, dtype=float)


def test_interval_uses_normal_quantile():
    lo, hi = confidence_interval(0.3, 1.0, 1, 0.05)
    assert hi - 0.3 == pytest.approx(1.959964, abs=1e-6)
    assert 0.3 - lo == pytest.approx(1.959964, abs=1e-6)


def test_interval_degenerate_and_nested():
    assert confidence_interval(0.7, 0.0, 50) == (0.7, 0.7)
    lo5, hi5 = confidence_interval(1.0, 2.0, 40, 0.05)
    lo1, hi1 = confidence_interval(1.0, 2.0, 40, 0.01)
    assert lo1 < lo5 < hi5 < hi1


def test_interval_width_scales_with_sqrt_n():
    w1 = np.diff(confidence_interval(0.0, 3.0, 100))[0]
    w4 = np.diff(confidence_interval(0.0, 3.0, 400))[0]
    assert w1 / w4 == pytest.approx(2.0, rel=1e-12)


@pytest.mark.parametrize("alpha,V", [(0.0, 1.0), (1.0, 1.0), (0.05, -1.0)])
def test_interval_rejects_bad_inputs(alpha, V):
    with pytest.raises(ValueError):
        confidence_interval(0.0, V, 10, alpha)


def test_all_respondents_gives_sample_variance(rng):
    x = rng.binomial(1, 0.5, (300, 1)).astype(float)
    y = rng.normal(size=300)
    data = Dataset(x, y, np.ones(300, dtype=int), discrete=(True,))
    resp = ResponseModel.from_spec("1, x1, y", phi=(0.0, 0.0, 0.0))
    v = variance_sandwich(data, resp, float(y.mean()), np.zeros(3), Discrete())
    assert v.V == pytest.approx(np.var(y), rel=1e-12)
    assert v.se == pytest.approx(np.sqrt(np.var(y) / 300), rel=1e-12)
    np.testing.assert_array_equal(v.kappa, 0.0)


def test_kappa_reduces_to_mean_when_weights_collapse(rng):
    # constant pi removes the y-dependence of the tilt and every r/pi is equal
    n = 400
    x = rng.binomial(1, 0.5, (n, 1)).astype(float)
    y = rng.normal(size=n)
    r = np.ones(n, dtype=int)
    r[:50] = 0
    data = Dataset(x, np.where(r == 1, y, np.nan), r, discrete=(True,))
    resp = ResponseModel.from_spec("1, x1, y")
    phi = np.array([-0.4, 0.0, 0.0])
    pi = 1.0 / (1.0 + np.exp(-0.4))
    k1, _ = estimate_kappa(data, resp, phi, Discrete(), method="plugin")
    rr = r == 1
    cell_mean = {v: y[rr & (x[:, 0] == v)].mean() for v in (0.0, 1.0)}
    ustar = np.array([cell_mean[v] for v in x[rr, 0]])
    D = np.column_stack([np.ones(rr.sum()), x[rr, 0], y[rr]])
    nu = -(1.0 - pi)
    expected = (ustar - y[rr]) @ D * nu / pi / n
    np.testing.assert_allclose(k1, expected, rtol=1e-10, atol=1e-14)


def test_constant_target_gives_zero_kappa1(s1_data, s1_response):
    const = Scaled(0.0)
    for method in ("optimal", "plugin"):
        k1, k2 = estimate_kappa(s1_data, s1_response, PHI1, Discrete(), target=const, method=method)
        np.testing.assert_allclose(k1, 0.0, atol=1e-14)
        assert np.all(np.isfinite(k2))


def test_variance_nonnegative_and_interval_ordered(s1_data, s1_response):
    est = estimate_proposed(s1_data, s1_response, Discrete())
    assert est.converged
    v = variance_sandwich(s1_data, s1_response, est.theta, est.phi, Discrete(), alphas=(0.05, 0.01))
    assert v.V >= 0 and np.isfinite(v.se)
    for a in (0.05, 0.01):
        lo, hi = v.ci[a]
        assert lo < est.theta < hi
    assert v.kappa1.shape == (3,) and v.kappa2.shape == (3, 3)


@pytest.mark.parametrize("c", [3.0, -2.0, 0.25])
def test_scale_equivariance(s1_data, s1_response, c):
    est = estimate_proposed(s1_data, s1_response, Discrete())
    base = variance_sandwich(s1_data, s1_response, est.theta, est.phi, Discrete())
    scaled = estimate_proposed(s1_data, s1_response, Discrete(), target=Scaled(c))
    v = variance_sandwich(s1_data, s1_response, scaled.theta, scaled.phi, Discrete(), target=Scaled(c))
    assert scaled.theta == pytest.approx(c * est.theta, rel=1e-10)
    assert v.se == pytest.approx(abs(c) * base.se, rel=1e-10)
    truth = 0.35
    covered = base.ci[0.05][0] <= truth <= base.ci[0.05][1]
    lo, hi = sorted(v.ci[0.05])
    assert (lo <= c * truth <= hi) == covered


def test_singular_kappa2_is_reported(s1_data, s1_response):
    with pytest.raises(EstimationNA, match=KAPPA_SINGULAR):
        variance_sandwich(s1_data, s1_response, 0.3, PHI1, Discrete(),
                          kappa=(np.zeros(3), np.zeros((3, 3))))


def _population_kappa():
    """Enumerate the four covariate cells (by response status) with quadrature over y."""
    k1 = np.zeros(3)
    k2 = np.zeros((3, 3))
    lo, hi = -12.0, 12.0
    for (a, b), mu in MU1.items():
        def pi(y):
            return 1.0 / (1.0 + np.exp(PHI1[0] + PHI1[1] * a + PHI1[2] * y))

        def f1(y):
            return norm.pdf(y, mu, 1.0)

        def quad(h):
            return integrate.quad(h, lo, hi, epsabs=1e-13, epsrel=1e-12, limit=200)[0]

        p1 = 1.0 / quad(lambda y: f1(y) / pi(y))

        def tilt(y):
            return f1(y) * (1.0 - pi(y)) / pi(y) ** 2

        norm_t = quad(tilt)
        ustar = quad(lambda y: y * tilt(y)) / norm_t
        gstar = np.array([quad(lambda y, k=k: pi(y) * (1.0, a, y)[k] * tilt(y)) / norm_t
                          for k in range(3)])

        # E over the full f(y | x) = f1 p1 / pi of h(y) * nu(y) * D(y), nu = d pi / d eta / pi
        def full(h, k):
            return quad(lambda y: h(y) * (-(1.0 - pi(y))) * (1.0, a, y)[k] * f1(y) * p1 / pi(y))

        for k in range(3):
            k1[k] += 0.25 * full(lambda y: ustar - y, k)
            for j in range(3):
                k2[j, k] += 0.25 * gstar[j] * full(lambda y: 1.0, k)
    return k1, k2


def test_kappa_matches_population_enumeration(s1_response):
    k1_pop, k2_pop = _population_kappa()
    reps = 20
    k1s, k2s = [], []
    for seed in range(reps):
        data, _ = generate_scenario(scenario(1, 10_000), seed=500 + seed)
        k1, k2 = estimate_kappa(data, s1_response, PHI1, Discrete())
        k1s.append(k1)
        k2s.append(k2)
    k1s, k2s = np.array(k1s), np.array(k2s)
    for est, pop in ((k1s, k1_pop), (k2s, k2_pop)):
        mc_sigma = est.std(axis=0, ddof=1) / np.sqrt(reps)
        assert np.all(np.abs(est.mean(axis=0) - pop) <= 3.0 * mc_sigma + 1e-12)
