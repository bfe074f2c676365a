import numpy as np
import pytest
from scipy import integrate, stats

from nmarest.conditional_expectation import (
    STAR,
    Discrete,
    NadarayaWatson,
    Parametric,
    e0_parametric,
    estar_closed_form,
    estar_discrete,
    estar_nw,
    estar_parametric,
    fractional_weights,
    tilt,
)
from nmarest.core_model import Dataset, ResponseModel, WorkingModel
from nmarest.errors import EstimationNA, ModelError
from nmarest.simulation import generate_scenario, scenario


def _y(x, y):
    return y


def _quad_estar(g, working, response, x):
    """Tilted expectation by quadrature against f1 * (1 - pi) / pi^2."""
    xr = np.atleast_2d(x)

    def w(y):
        pi = response.prob(xr, np.array([y]))[0]
        return float(working.pdf(y, x)) * (1.0 - pi) / pi ** 2

    mu = working.mean(xr)[0]
    sd = np.sqrt(working.psi)
    lo, hi = mu - 12 * sd, mu + 12 * sd
    den = integrate.quad(w, lo, hi, epsabs=0, epsrel=1e-11, limit=200)[0]
    num = integrate.quad(lambda y: w(y) * g(y), lo, hi, epsabs=0, epsrel=1e-11, limit=200)[0]
    return num / den


def test_closed_form_matches_quadrature(rng):
    for _ in range(50):
        gamma = rng.normal(0, 0.6, 2)
        psi = rng.uniform(0.3, 1.5)
        phi = np.array([rng.normal(-0.5, 0.5), rng.normal(0, 0.5), rng.uniform(-0.9, 0.9)])
        working = WorkingModel.from_spec("1, x1", "identity", gamma=gamma, psi=psi)
        response = ResponseModel.from_spec("1, x1, y", phi=phi)
        x = rng.normal(0, 1, 1)
        g, ey = estar_closed_form(working, response, x[None, :])
        assert ey[0] == pytest.approx(_quad_estar(lambda y: y, working, response, x), abs=1e-8)
        # g* is the tilted mean of pi * d eta / d phi = pi * (1, x1, y)
        for k, part in enumerate((lambda y: 1.0, lambda y: x[0], lambda y: y)):
            want = _quad_estar(lambda y: response.prob(x[None, :], np.array([y]))[0] * part(y),
                               working, response, x)
            assert g[0, k] == pytest.approx(want, abs=1e-8)


def test_closed_form_worked_example():
    working = WorkingModel.from_spec("1", "identity", gamma=(0.5,), psi=1.0)
    response = ResponseModel.from_spec("1, y", phi=(-1.0, 0.75))
    _, ey = estar_closed_form(working, response, np.zeros((1, 1)))
    d = np.exp(-1 + 0.75 * (3 * 0.75 / 2 + 0.5))
    assert d == pytest.approx(np.exp(0.21875), abs=1e-15)
    assert ey[0] == pytest.approx((1.25 + 2.0 * d) / (1 + d), abs=1e-14)
    assert ey[0] == pytest.approx(1.6658, abs=1e-4)
    assert ey[0] == pytest.approx(_quad_estar(lambda y: y, working, response, np.zeros(1)), abs=1e-9)


def test_closed_form_ignorable_returns_working_mean():
    working = WorkingModel.from_spec("1, x1", "identity", gamma=(0.3, 0.7), psi=2.0)
    response = ResponseModel.from_spec("1, x1, y", phi=(0.2, 0.4, 0.0))
    x = np.array([[-1.0], [0.5], [2.0]])
    _, ey = estar_closed_form(working, response, x)
    np.testing.assert_allclose(ey, working.mean(x), atol=1e-14)


def test_closed_form_rejects_quadratic_y():
    working = WorkingModel.from_spec("1", "identity", gamma=(0.0,), psi=1.0)
    response = ResponseModel.from_spec("1, y, y^2", phi=(0.0, 0.2, 0.1))
    with pytest.raises(ModelError, match="Proposition 1 inapplicable"):
        estar_closed_form(working, response, np.zeros((1, 1)))


def _single_x_data(y, x1=0.0, missing=0):
    n_r = len(y)
    x = np.full((n_r + missing, 1), x1)
    yy = np.concatenate([y, np.full(missing, np.nan)])
    r = np.concatenate([np.ones(n_r, dtype=int), np.zeros(missing, dtype=int)])
    return Dataset(x, yy, r, discrete=(False,))


def test_fractional_weights_match_closed_form_large_pool():
    working = WorkingModel.from_spec("1, x1", "identity", gamma=(0.5, -0.3), psi=1.0)
    response = ResponseModel.from_spec("1, x1, y", phi=(-1.0, -0.5, 0.75))
    x1 = 0.4
    mu = 0.5 - 0.3 * x1
    n_r = 100_000
    y = mu + stats.norm.ppf((np.arange(n_r) + 0.5) / n_r)
    data = _single_x_data(y, x1, missing=10)
    w = fractional_weights(data, working, response)
    np.testing.assert_allclose(w.distinct.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(w.distinct >= 0)
    got = estar_parametric(_y, w)
    _, want = estar_closed_form(working, response, np.array([[x1]]))
    np.testing.assert_allclose(got, want[0], atol=1e-3)


def test_fractional_weights_two_point_toy():
    working = WorkingModel.from_spec("1", "identity", gamma=(0.5,), psi=1.0)
    response = ResponseModel.from_spec("1, y", phi=(-0.3, 1.0))
    data = _single_x_data(np.array([0.0, 1.0]), missing=1)
    w = fractional_weights(data, working, response).matrix
    eta = -0.3 + np.array([0.0, 1.0])
    # pi^{-1} O with O = exp(eta), pi^{-1} = 1 + exp(eta); f1/C is constant here
    raw = np.exp(eta) * (1 + np.exp(eta))
    np.testing.assert_allclose(w, np.tile(raw / raw.sum(), (3, 1)), atol=1e-12)


def test_fractional_weights_trivial_cases():
    working = WorkingModel.from_spec("1", "identity", gamma=(0.0,), psi=1.0)
    flat = ResponseModel.from_spec("1, y", phi=(0.1, 0.0))
    data = _single_x_data(np.array([0.3, -1.0, 2.0, 0.5]), missing=2)
    w = fractional_weights(data, working, flat).matrix
    np.testing.assert_allclose(w, 0.25, atol=1e-15)
    np.testing.assert_allclose(estar_parametric(_y, fractional_weights(data, working, flat)), np.mean([0.3, -1.0, 2.0, 0.5]), atol=1e-14)
    one = _single_x_data(np.array([1.5]), missing=3)
    np.testing.assert_allclose(fractional_weights(one, working, flat).matrix, 1.0)
    tilted = ResponseModel.from_spec("1, y", phi=(0.1, 0.8))
    np.testing.assert_allclose(estar_parametric(lambda x, y: np.ones_like(y), fractional_weights(data, working, tilted)), 1.0, atol=1e-15)
    e0 = e0_parametric(_y, data, working, tilted)
    assert np.all((e0 >= -1.0) & (e0 <= 2.0))


def test_e0_uses_odds_tilt_only():
    working = WorkingModel.from_spec("1", "identity", gamma=(0.5,), psi=1.0)
    response = ResponseModel.from_spec("1, y", phi=(-0.3, 1.0))
    data = _single_x_data(np.array([0.0, 1.0]), missing=1)
    got = e0_parametric(_y, data, working, response)
    o = np.exp(-0.3 + np.array([0.0, 1.0]))
    np.testing.assert_allclose(got, o[1] / o.sum(), atol=1e-14)


def _binary_table():
    # (x1, x2, y, r) rows in a 2x2x2 layout with some nonrespondents
    rows = [(0, 0, 0, 1), (0, 0, 1, 1), (0, 0, 1, 1), (0, 1, 0, 1), (0, 1, 1, 1), (1, 0, 0, 1),
            (1, 0, 0, 1), (1, 0, 1, 1), (1, 1, 1, 1), (1, 1, 0, 1), (1, 1, 1, 1), (0, 0, 0, 0), (1, 1, 0, 0)]
    a = np.array(rows, dtype=float)
    y = np.where(a[:, 3] == 1, a[:, 2], np.nan)
    return Dataset(a[:, :2], y, a[:, 3].astype(int))


def test_discrete_matches_hand_computed_ratio():
    data = _binary_table()
    response = ResponseModel.from_spec("1, x1, y", phi=(-0.8, 0.4, 0.9))
    x = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
    got = estar_discrete(_y, x, response, data)
    resp = data.respondents
    for i, xi in enumerate(x):
        cell = resp & np.all(data.x == xi, axis=1)
        yc = data.y[cell]
        eta = -0.8 + 0.4 * xi[0] + 0.9 * yc
        w = np.exp(eta) * (1 + np.exp(eta))
        assert got[i] == pytest.approx(np.sum(w * yc) / np.sum(w), abs=1e-12)


def test_discrete_constant_pi_gives_cell_mean():
    data = _binary_table()
    response = ResponseModel.from_spec("1, x1, y", phi=(0.0, 0.0, 0.0))
    got = estar_discrete(_y, np.array([[0.0, 0.0]]), response, data)
    assert got[0] == pytest.approx(2.0 / 3.0, abs=1e-15)


def test_discrete_empty_cell_is_na():
    data = _binary_table()
    response = ResponseModel.from_spec("1, x1, y", phi=(0.0, 0.0, 0.5))
    with pytest.raises(EstimationNA, match="empty cell at x"):
        estar_discrete(_y, np.array([[2.0, 0.0]]), response, data)


def test_discrete_requires_discrete_columns():
    data = _single_x_data(np.array([0.1, 0.2]))
    with pytest.raises(ModelError):
        Discrete().pool(data)


def test_nw_identical_x_and_infinite_bandwidth():
    response = ResponseModel.from_spec("1, x1, y", phi=(-0.5, 0.2, 0.6))
    y = np.array([0.1, 1.2, -0.4, 0.8])
    data = _single_x_data(y, x1=0.3, missing=1)
    eta = -0.5 + 0.2 * 0.3 + 0.6 * y
    w = np.exp(eta) * (1 + np.exp(eta))
    want = np.sum(w * y) / np.sum(w)
    for h in (0.01, 1.0, 100.0):
        got = estar_nw(_y, np.array([[0.3]]), response, data, NadarayaWatson(bandwidth=(h,)))
        assert got[0] == pytest.approx(want, abs=1e-13)
    rng = np.random.default_rng(3)
    xs = rng.normal(size=(30, 1))
    ys = rng.normal(size=30)
    d2 = Dataset(xs, ys, np.ones(30, dtype=int), discrete=(False,))
    got = estar_nw(_y, np.array([[0.5]]), response, d2, NadarayaWatson(bandwidth=(1e8,)))
    eta = response.index(np.full((30, 1), 0.5), ys)
    w = np.exp(eta) * (1 + np.exp(eta))
    assert got[0] == pytest.approx(np.sum(w * ys) / np.sum(w), abs=1e-12)


def test_nw_no_mass_is_na():
    response = ResponseModel.from_spec("1, x1, y", phi=(-0.5, 0.2, 0.6))
    x = np.array([[0.0, 0.1], [0.0, 0.4], [1.0, 0.3]])
    data = Dataset(x, [0.1, 0.2, np.nan], [1, 1, 0], discrete=(True, False))
    with pytest.raises(EstimationNA, match="no kernel mass at x"):
        estar_nw(_y, np.array([[1.0, 0.3]]), response, data, NadarayaWatson(bandwidth=(0.5,)))


def test_nw_recovers_true_tilted_mean_in_second_scenario():
    spec = scenario(2, 10_000)
    data, _ = generate_scenario(spec, seed=2024)
    response = spec.response
    grid = np.column_stack([np.arange(9) % 2, np.linspace(-0.8, 0.8, 9)]).astype(float)
    got = estar_nw(_y, grid, response, data)
    _, want = estar_closed_form(spec.mean, response, grid)
    assert np.max(np.abs(got - want)) < 0.05


def test_factored_and_dense_weights_agree(rng):
    n = 400
    x = np.column_stack([rng.binomial(1, 0.5, n), rng.uniform(-1, 1, n)]).astype(float)
    y = rng.normal(size=n)
    data = Dataset(x, y, np.ones(n, dtype=int), discrete=(True, False))
    response = ResponseModel.from_spec("1, x1, y", phi=(-0.6, 0.3, 0.5))
    pool = NadarayaWatson().pool(data)
    st = tilt(pool, response, power=STAR)
    assert not st.dense and len(st.groups) == 2
    lv = response.values(np.repeat(pool.x, pool.y.size, axis=0), np.tile(pool.y, pool.m))
    raw = np.exp(pool.log_base) * ((1 - lv.pi) / lv.pi ** 2).reshape(pool.m, pool.y.size)
    W = raw / raw.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(st.W, W, rtol=1e-12, atol=1e-300)
    f = rng.normal(size=(len(st.groups), pool.y.size))
    M = rng.normal(size=(pool.y.size, 3))
    want = np.einsum("ij,ij,jk->ik", W, f[st.inv], M)
    np.testing.assert_allclose(st.wdot(f, M), want, atol=1e-12)


def test_parametric_backend_requires_fitted_model():
    with pytest.raises(ModelError):
        Parametric(WorkingModel.from_spec("1, x1", "identity"))
