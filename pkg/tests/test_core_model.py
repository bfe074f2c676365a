import numpy as np
import pytest
from scipy import integrate

from nmarest.core_model import (
    LINKS,
    Dataset,
    ResponseModel,
    TargetFunction,
    WorkingModel,
    fit_single_working_model,
    fit_working_model,
    marginal_response_prob,
    parse_terms,
    working_score,
)
from nmarest.errors import ModelError, NumericalError


def test_logistic_odds_probability_example(s1_response):
    # eta = -1 at x1 = 0, y = 0
    pi = s1_response.prob(np.array([[0.0]]), np.array([0.0]))
    assert pi[0] == pytest.approx(1.0 / (1.0 + np.exp(-1.0)), abs=1e-15)
    assert pi[0] == pytest.approx(0.7311, abs=5e-5)


def test_odds_is_exp_index(s1_response):
    x = np.array([[0.0], [1.0]])
    y = np.array([0.3, -1.2])
    eta = s1_response.index(x, y)
    np.testing.assert_allclose(s1_response.odds(x, y), np.exp(eta), rtol=1e-14)


def test_non_finite_index_raises(s1_response):
    with pytest.raises(NumericalError, match="numeric overflow in response index"):
        s1_response.prob(np.array([[0.0]]), np.array([np.inf]))


def test_extreme_index_is_clamped_and_counted(s1_response):
    v = s1_response.values(np.array([[0.0], [0.0]]), np.array([2000.0, -2000.0]))
    assert v.n_clamped == 2
    assert np.all((v.pi > 0) & (v.pi < 1))


@pytest.mark.parametrize("link", sorted(LINKS))
def test_prob_grad_matches_finite_differences(link, rng):
    model = ResponseModel.from_spec("1, x1, x1^2, y, x1*y", link=link)
    worst, used = 0.0, 0
    while used < 100:
        phi = rng.normal(0, 0.4, model.q)
        x = rng.normal(0, 1, (1, 1))
        y = rng.normal(0, 1, 1)
        if model.values(x, y, phi).n_clamped:
            continue
        used += 1
        g = model.prob_grad(x, y, phi)[0]
        fd = np.empty(model.q)
        for k in range(model.q):
            h = 1e-6
            e = np.zeros(model.q)
            e[k] = h
            fd[k] = (model.prob(x, y, phi + e)[0] - model.prob(x, y, phi - e)[0]) / (2 * h)
        worst = max(worst, np.max(np.abs(g - fd)) / max(np.max(np.abs(g)), 1e-3))
    assert worst < 1e-6


@pytest.mark.parametrize("link", sorted(LINKS))
def test_second_derivative_matches_finite_differences(link):
    lk = LINKS[link]
    eta = np.linspace(-3, 2, 41)
    h = 1e-5
    fd = (lk(eta + h).d1 - lk(eta - h).d1) / (2 * h)
    np.testing.assert_allclose(lk(eta).d2, fd, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("link", sorted(LINKS))
def test_score_has_mean_zero_given_z(link, rng):
    model = ResponseModel.from_spec("1, x1, y, y^2", link=link)
    phi = np.array([0.3, -0.4, 0.6, -0.1])
    x = rng.normal(size=(50, 1))
    y = rng.normal(size=50)
    pi = model.prob(x, y, phi)
    s1 = model.score(x, y, np.ones(50), phi)
    s0 = model.score(x, y, np.zeros(50), phi)
    np.testing.assert_allclose(pi[:, None] * s1 + (1 - pi)[:, None] * s0, 0.0, atol=1e-12)


def test_logistic_odds_score_closed_forms(s1_response):
    x = np.array([[1.0]])
    y = np.array([0.4])
    pi = s1_response.prob(x, y)
    D = s1_response.design(x, y)
    np.testing.assert_allclose(s1_response.score(x, y, [1.0]), -(1 - pi)[:, None] * D, rtol=1e-13)
    np.testing.assert_allclose(s1_response.score(x, y, [0.0]), pi[:, None] * D, rtol=1e-13)


def test_term_parsing():
    terms = parse_terms("1, x1, x1^2, y, (1-x1)*(1-y), x2*y^2")
    x = np.array([[2.0, 3.0]])
    y = np.array([0.5])
    A = np.stack([t.x_part(x) for t in terms], axis=-1)[0]
    C = np.stack([t.y_part(y) for t in terms], axis=-1)[0]
    np.testing.assert_allclose(A * C, [1.0, 2.0, 4.0, 0.5, (1 - 2.0) * 0.5, 3.0 * 0.25])
    assert [t.has_y for t in terms] == [False, False, False, True, True, True]
    with pytest.raises(ModelError):
        parse_terms("1, log(x1)")


def test_wrong_phi_length_rejected():
    with pytest.raises(ModelError):
        ResponseModel.from_spec("1, x1, y", phi=(1.0, 2.0))


def test_closed_form_unavailable_for_nonlinear_y():
    model = ResponseModel.from_spec("1, y, y^2", phi=(0.0, 0.1, 0.1))
    with pytest.raises(ModelError, match="closed form unavailable"):
        model.h(np.zeros((1, 1)))


@pytest.mark.parametrize("link,gamma", [("identity", (0.4, -0.3)), ("log", (-0.5, 0.3))])
def test_working_density_integrates_to_one(link, gamma):
    wm = WorkingModel.from_spec("1, x1", link, gamma=gamma, psi=0.8)
    for x1 in (-1.0, 0.0, 2.0):
        x = np.array([x1])
        val, _ = integrate.quad(lambda y: float(wm.pdf(y, x)), -np.inf, np.inf)
        assert val == pytest.approx(1.0, abs=1e-10)
        mean = wm.mean(x[None, :])[0]
        link_val = mean if link == "identity" else np.log(mean)
        assert link_val == pytest.approx(gamma[0] + gamma[1] * x1, abs=1e-14)


def test_saturated_cell_means_match_group_averages(s1_data):
    wm = WorkingModel.from_spec("1, x1, x2, x1*x2", "identity")
    fitted, _, _ = fit_single_working_model(s1_data, wm)
    resp = s1_data.respondents
    x, y = s1_data.x[resp], s1_data.y[resp]
    cells = [(0, 0), (0, 1), (1, 0), (1, 1)]
    got = fitted.mean(np.array(cells, dtype=float))
    want = [y[(x[:, 0] == a) & (x[:, 1] == b)].mean() for a, b in cells]
    np.testing.assert_allclose(got, want, atol=1e-12)
    np.testing.assert_allclose(working_score(fitted, s1_data), 0.0, atol=1e-8)


def test_log_link_fit_recovers_coefficients(rng):
    n = 20000
    x = np.column_stack([rng.binomial(1, 0.5, n), rng.uniform(-1, 1, n)]).astype(float)
    mu = np.exp(-0.2 - 0.4 * x[:, 0] + 0.5 * x[:, 1])
    y = rng.normal(mu, 1.0)
    data = Dataset(x, y, np.ones(n, dtype=int))
    fitted, _, _ = fit_single_working_model(data, WorkingModel.from_spec("1, x1, x2", "log"))
    np.testing.assert_allclose(fitted.gamma, (-0.2, -0.4, 0.5), atol=0.06)
    assert fitted.psi == pytest.approx(1.0, abs=0.05)
    np.testing.assert_allclose(working_score(fitted, data), 0.0, atol=1e-6)


def test_aic_prefers_needed_interaction(s1_data):
    cands = [WorkingModel.from_spec("1, x1, x2", "identity"),
             WorkingModel.from_spec("1, x1, x2, x1*x2", "identity")]
    fit = fit_working_model(s1_data, cands)
    assert fit.model.p == 4
    assert len(fit.aic_table) == 2


def test_collinear_basis_rejected(s1_data):
    with pytest.raises(ModelError, match="collinear"):
        fit_single_working_model(s1_data, WorkingModel.from_spec("1, x1, (1-x1)", "identity"))


def test_marginal_response_probability_example(s1_response):
    # tau = mu = 0.5, psi = 1: exponent -1 + 0.75 * 0.5 + 0.75^2 / 2 = -0.34375
    wm = WorkingModel.from_spec("1", "identity", gamma=(0.5,), psi=1.0)
    p = marginal_response_prob(s1_response, wm, np.array([[0.0, 0.0]]))[0]
    assert p == pytest.approx(1.0 / (1.0 + np.exp(-0.34375)), abs=1e-15)
    assert p == pytest.approx(0.5851, abs=5e-5)
    inv, _ = integrate.quad(lambda y: float(wm.pdf(y, np.zeros(2)))
                            / s1_response.prob(np.zeros((1, 2)), np.array([y]))[0], -np.inf, np.inf)
    assert p == pytest.approx(1.0 / inv, abs=1e-10)


def test_dataset_requires_y_exactly_for_respondents():
    with pytest.raises(ValueError, match="row 2"):
        Dataset(np.zeros((3, 1)), [1.0, np.nan, 2.0], [1, 1, 1])
    with pytest.raises(ValueError, match="row 1"):
        Dataset(np.zeros((2, 1)), [1.0, 2.0], [0, 1])


def test_dataset_discrete_autodetect_and_immutability():
    d = Dataset(np.column_stack([[0, 1, 1, 0], [0.1, 0.7, -0.3, 0.2]]), [1.0, np.nan, 2.0, 3.0], [1, 0, 1, 1])
    assert d.discrete == (True, False)
    assert d.n_r == 3 and d.has_nonresponse()
    with pytest.raises(ValueError):
        d.x[0, 0] = 5.0


def test_target_functions():
    assert TargetFunction.parse("mean")(np.array([2.5]))[0] == 2.5
    tail = TargetFunction.parse("tail(1.6)")
    np.testing.assert_array_equal(tail(np.array([1.0, 1.6, 2.0])), [0.0, 0.0, 1.0])
    with pytest.raises(ModelError):
        TargetFunction.parse("median")
