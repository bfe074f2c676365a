"""Estimators of the response parameters ``phi`` and the target ``theta``.

* :func:`estimate_mar`      ignorable logistic fit plus a Hajek mean
* :func:`estimate_ck`       calibration equations ``sum (1 - r/pi) g(x) = 0``
* :func:`estimate_rki`      mean-score equations with ``E0`` from a backend
* :func:`estimate_proposed` optimal ``phi`` equation with ``g* = E*(s0 | x)``
  followed by the closed-form ``theta`` equation
* :func:`binary_closed_form` algebraic solution for binary ``x1, x2, y``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .conditional_expectation import (
    STAR,
    ZERO,
    ClosedFormExpFam,
    DonorPool,
    TiltState,
    _message,
    compress_donors,
    estar_closed_form,
    tilt,
    tilt_plan,
)
from .core_model import (
    MEAN,
    Dataset,
    ResponseModel,
    TargetFunction,
    fit_binary_glm,
    get_link,
    unique_rows,
    warn_if_clamped,
    x_design,
)
from .errors import EstimationNA, ModelError
from .solver import SINGULAR, RootResult, SolverOptions, solve_system, solve_trust_region

NO_NONRESPONSE = SINGULAR
BOUNDARY = "boundary solution"


@dataclass(frozen=True)
class EstimateResult:
    """Point estimates and solver bookkeeping for one estimator on one dataset."""

    phi: np.ndarray
    theta: float
    converged: bool
    na_reason: str | None
    iterations: int
    residual: float
    backend: str
    estimator: str = ""
    gamma: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def is_na(self) -> bool:
        return not self.converged


def _na(q, reason, estimator, backend, iterations=0, residual=np.nan, theta=np.nan, gamma=None):
    return EstimateResult(np.full(q, np.nan), float(theta), False, reason, iterations, residual,
                          backend, estimator, gamma)


def _gamma(backend):
    working = getattr(backend, "working", None)
    return None if working is None else np.asarray(working.gamma)


# ---------------------------------------------------------------------------
# Starting values
# ---------------------------------------------------------------------------


def starting_values(data: Dataset, response: ResponseModel, opts: SolverOptions | None = None):
    """Ignorable fit on the x-only terms, then y-coefficients at 0, -1, +1."""
    has_y = response.y_terms
    base = np.zeros(response.q)
    xk = np.flatnonzero(~has_y)
    if xk.size:
        X = x_design([response.terms[k] for k in xk], data.x)
        fit = fit_binary_glm(X, data.r, response.link, opts)
        if fit.converged:
            base[xk] = fit.x
    starts = []
    for v in (0.0, -1.0, 1.0):
        s = base.copy()
        s[has_y] = v
        starts.append(s)
    return starts


FALLBACK_WORK = 2e6
FALLBACK_NFEV = (200, 5000)


def fallback_budget(cost: float) -> int:
    """Trust-region evaluations allowed for a map costing ``cost`` weight cells."""
    lo, hi = FALLBACK_NFEV
    return int(np.clip(FALLBACK_WORK / max(cost, 1.0), lo, hi))


def _multi_start(F, jac, starts, opts, accept=None, extra_start=None, cost=None) -> RootResult:
    """First certified root over ``starts``, Newton first, then the fallback.

    ``accept(x)`` can veto a root (e.g. one where probabilities hit the
    clamp); a vetoed root is reported as ``BOUNDARY``.  ``extra_start()``
    may supply one more Newton start, computed only if all ``starts`` fail.
    The trust-region fallback then tries each start, beginning with the one
    whose Newton run ended closest to a root, with a budget that grows as
    ``cost`` (weight cells per evaluation) shrinks.
    """
    opts = opts or SolverOptions()
    tried = []

    def ok(res, start):
        if res.converged and (accept is None or accept(res.x)):
            return True
        if res.converged:
            res = RootResult(res.x, False, BOUNDARY, res.iterations, res.residual, res.fun,
                             res.ill_conditioned)
        tried.append((res, start))
        return False

    for s in starts:
        res = solve_system(F, s, opts, jac=jac)
        if ok(res, s):
            return res
    first = tried[0][0]
    if first.reason == SINGULAR:
        return first
    if extra_start is not None:
        s = extra_start()
        if s is not None:
            res = solve_system(F, s, opts, jac=jac)
            if ok(res, s):
                return res
    if opts.fallback:
        budget = FALLBACK_NFEV[0] if cost is None else fallback_budget(cost)
        finite = sorted((rs for rs in tried if np.isfinite(rs[0].residual)),
                        key=lambda rs: rs[0].residual)
        for _, start in finite:
            res = solve_trust_region(F, start, opts, jac=jac, max_nfev=budget)
            if ok(res, start):
                return res
    return first


INTERIOR_EPS = 1e-8
_LOG_INTERIOR = np.log(INTERIOR_EPS)


def _interior(response, data):
    """Veto roots with a respondent probability within ``INTERIOR_EPS`` of 0 or 1.

    Such points are asymptotic zeros of the estimating function reached on
    the way to ``|phi| = inf``, not interior solutions.
    """
    resp = data.respondents
    D_r = response.design(data.x[resp], data.y[resp])
    link = get_link(response.link)

    def accept(phi):
        lv = link(D_r @ phi)
        return bool(np.all(lv.log_pi > _LOG_INTERIOR) and np.all(lv.log_comp > _LOG_INTERIOR))

    return accept


# ---------------------------------------------------------------------------
# Shared evaluation of tilted scores on a donor pool
# ---------------------------------------------------------------------------


class TiltedScore:
    """Estimating function for ``phi`` built on a :class:`DonorPool`.

    ``kind="proposed"`` evaluates ``sum_i (1 - r_i/pi_i) E*(s0 | x_i)``;
    ``kind="rki"`` evaluates ``sum_i r_i s1_i + (1 - r_i) E0(s0 | x_i)``.
    The analytic Jacobian differentiates through the weights as well.
    """

    def __init__(self, data: Dataset, response: ResponseModel, pool: DonorPool,
                 kind: str = "proposed", message: str = "empty support"):
        if pool.index is None:
            raise ValueError("pool must be built on the data's own rows")
        self.data = data
        self.response = response
        self.pool = pool
        self.kind = kind
        self.message = message
        self.link = get_link(response.link)
        resp = data.respondents
        self.resp = resp
        # respondents sharing (x row, y) contribute identical terms: merge them
        row_all = pool.index[resp]
        y_all = data.y[resp]
        _, first, inv, cnt = unique_rows(np.column_stack([row_all, y_all]))
        self.resp_inv = inv.ravel()  # respondent -> merged term
        self.cnt_r = cnt.astype(float)
        self.y_r = y_all[first]
        self.D_r = response.design(data.x[resp][first], self.y_r)
        self.row_r = row_all[first]
        self.row_0 = pool.index[~resp]
        self.cnt0 = np.bincount(self.row_0, minlength=pool.m).astype(float)
        q = response.q
        self.CC = (pool_C := np.stack([t.y_part(pool.y) for t in response.terms], axis=1))[:, :, None] * pool_C[:, None, :]
        self.CC = self.CC.reshape(pool.y.size, q * q)
        self.plan = tilt_plan(pool, response)
        self._cache_key = None
        self._cache = None

    @property
    def cost(self) -> int:
        """Weight cells touched by one evaluation."""
        return self.pool.m * self.pool.y.size

    # -- state --------------------------------------------------------------
    def state(self, phi):
        phi = np.asarray(phi, dtype=float)
        key = phi.tobytes()
        if key == self._cache_key:
            return self._cache
        power = STAR if self.kind == "proposed" else ZERO
        st = tilt(self.pool, self.response, phi, power, self.message, self.plan)
        lv = st.lv
        rho = -lv.d1 / lv.comp
        g = st.A * st.wdot(rho, st.C)
        lr = self.link(self.D_r @ phi)
        out = {"st": st, "rho": rho, "g": g, "lr": lr, "phi": phi}
        self._cache_key, self._cache = key, out
        return out

    def unit_weights(self, s):
        """Per-row totals of ``1 - r_i / pi_i``."""
        lr = s["lr"]
        cu = self.cnt0.copy()
        np.add.at(cu, self.row_r, self.cnt_r * (1.0 - 1.0 / lr.pi))
        return cu

    def F(self, phi):
        s = self.state(phi)
        if self.kind == "proposed":
            return self.unit_weights(s) @ s["g"]
        lr = s["lr"]
        return (self.cnt_r * lr.d1 / lr.pi) @ self.D_r + self.cnt0 @ s["g"]

    def _dg(self, s, weights):
        """``sum_u weights_u d g_u / d phi``, shape (q, q)."""
        st: TiltState = s["st"]
        lv = st.lv
        q = self.response.q
        rho_d = -(lv.d2 * lv.comp + lv.d1 * lv.d1) / (lv.comp * lv.comp)
        tau = -lv.d1 / lv.comp - st.power * lv.d1 / lv.pi
        M1 = st.wdot(rho_d + s["rho"] * tau, self.CC).reshape(-1, q, q)
        M2 = st.wdot(tau, st.C)
        A = st.A
        wa = weights[:, None] * A
        part1 = np.einsum("uk,ul,ukl->kl", wa, A, M1)
        part2 = (weights[:, None] * s["g"]).T @ (A * M2)
        return part1 - part2

    def J(self, phi):
        s = self.state(phi)
        lr = s["lr"]
        if self.kind == "proposed":
            g_r = s["g"][self.row_r]
            term1 = (g_r * (self.cnt_r * lr.d1 / lr.pi ** 2)[:, None]).T @ self.D_r
            return term1 + self._dg(s, self.unit_weights(s))
        a = lr.d1 / lr.pi
        w = lr.d2 / lr.pi - a * a
        term1 = (self.D_r * (self.cnt_r * w)[:, None]).T @ self.D_r
        return term1 + self._dg(s, self.cnt0)

    # -- quantities at a solution ------------------------------------------
    def star_values(self, phi, target: TargetFunction):
        """Per-unit ``g*``, ``U*``, ``pi`` (respondents) at ``phi`` under E*."""
        s = self.state(phi) if self.kind == "proposed" else None
        if s is None:
            st = tilt(self.pool, self.response, phi, STAR, self.message, self.plan)
            lv = st.lv
            g = st.A * st.wdot(-lv.d1 / lv.comp, st.C)
        else:
            st, g = s["st"], s["g"]
        ustar = st.expect(target(self.pool.y))
        return st, g, ustar


def _pool_for(backend, data):
    return compress_donors(backend.pool(data), data)


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------


def _ht_theta(response, data, phi, target):
    resp = data.respondents
    pi = response.prob(data.x[resp], data.y[resp], phi)
    w = 1.0 / pi
    return float(np.sum(w * target(data.y[resp])) / np.sum(w))


def estimate_mar(data: Dataset, target: TargetFunction = MEAN,
                 opts: SolverOptions | None = None) -> EstimateResult:
    """Logistic regression of ``r`` on ``(1, x)`` then ``sum r (theta - U) / pi_hat = 0``."""
    X = np.column_stack([np.ones(data.n), data.x])
    q = X.shape[1]
    if data.n_r == 0:
        return _na(q, "no respondents", "mar", "ignorable")
    if data.n_r == data.n:
        return EstimateResult(np.full(q, np.nan), float(np.mean(target(data.y))), True, None, 0, 0.0,
                              "ignorable", "mar")
    # standard orientation: P(r=1) = 1 / (1 + exp(-X beta))
    fit = fit_binary_glm(-X, data.r, "logistic-odds", opts)
    if not fit.converged:
        return _na(q, fit.reason, "mar", "ignorable", fit.iterations, fit.residual)
    beta = fit.x
    resp = data.respondents
    pi = 1.0 / (1.0 + np.exp(-X[resp] @ beta))
    u = target(data.y[resp])
    theta = float(np.sum(u / pi) / np.sum(1.0 / pi))
    return EstimateResult(beta, theta, True, None, fit.iterations, fit.residual, "ignorable", "mar")


def default_ck_g(data: Dataset) -> np.ndarray:
    return np.column_stack([np.ones(data.n), data.x])


def estimate_ck(data: Dataset, response: ResponseModel, target: TargetFunction = MEAN,
                g_fn: Callable[[np.ndarray], np.ndarray] | None = None,
                opts: SolverOptions | None = None, starts=None) -> EstimateResult:
    """Solve ``sum_i (1 - r_i / pi(z_i; phi)) g(x_i) = 0`` then the HT equation."""
    q = response.q
    if not data.has_nonresponse():
        return _na(q, NO_NONRESPONSE, "ck", "calibration")
    G = np.asarray(g_fn(data.x) if g_fn is not None else default_ck_g(data), dtype=float)
    if G.shape != (data.n, q):
        raise ModelError(f"g must return an (n, {q}) array, got {G.shape}")
    resp = data.respondents
    D_r = response.design(data.x[resp], data.y[resp])
    G_r = G[resp]
    G_sum = G.sum(axis=0)
    link = get_link(response.link)

    def F(phi):
        lr = link(D_r @ phi)
        return G_sum - (1.0 / lr.pi) @ G_r

    def J(phi):
        lr = link(D_r @ phi)
        return (G_r * (lr.d1 / lr.pi ** 2)[:, None]).T @ D_r

    starts = starting_values(data, response, opts) if starts is None else starts
    res = _multi_start(F, J, starts, opts, _interior(response, data))
    if not res.converged:
        return _na(q, res.reason, "ck", "calibration", res.iterations, res.residual)
    theta = _ht_theta(response, data, res.x, target)
    return EstimateResult(res.x, theta, True, None, res.iterations, res.residual, "calibration", "ck")


def estimate_rki(data: Dataset, response: ResponseModel, backend, target: TargetFunction = MEAN,
                 opts: SolverOptions | None = None, starts=None) -> EstimateResult:
    """Mean-score equations with ``E0(s0 | x)`` from ``backend``; HT ``theta``."""
    q = response.q
    tag = getattr(backend, "tag", "?")
    if not data.has_nonresponse():
        return _na(q, NO_NONRESPONSE, "rki", tag, gamma=_gamma(backend))
    if isinstance(backend, ClosedFormExpFam):
        raise ModelError("RKI needs a donor backend")
    try:
        pool = _pool_for(backend, data)
    except EstimationNA as e:
        return _na(q, e.reason, "rki", tag, gamma=_gamma(backend))
    eng = TiltedScore(data, response, pool, "rki", _message(backend))
    starts = starting_values(data, response, opts) if starts is None else starts
    res = _multi_start(eng.F, eng.J, starts, opts, _interior(response, data), cost=eng.cost)
    if not res.converged:
        return _na(q, res.reason, "rki", tag, res.iterations, res.residual, gamma=_gamma(backend))
    theta = _ht_theta(response, data, res.x, target)
    return EstimateResult(res.x, theta, True, None, res.iterations, res.residual, tag, "rki",
                          _gamma(backend))


def _closed_form_engine(data, response, backend, target):
    if target.kind != "mean":
        raise ModelError("closed-form backend only supports the mean target")
    resp = data.respondents
    D_r = response.design(data.x[resp], data.y[resp])
    link = get_link(response.link)

    def parts(phi):
        g, ey = estar_closed_form(backend.working, response, data.x, phi)
        lr = link(D_r @ phi)
        c = np.ones(data.n)
        c[resp] = 1.0 - 1.0 / lr.pi
        return g, ey, c, lr

    def F(phi):
        g, _, c, _ = parts(phi)
        return c @ g

    return parts, F


def estimate_proposed(data: Dataset, response: ResponseModel, backend, target: TargetFunction = MEAN,
                      opts: SolverOptions | None = None, starts=None, joint: bool = False) -> EstimateResult:
    """Optimal estimating equations for ``(phi, theta)``.

    ``phi`` solves ``sum_i (1 - r_i/pi_i) g*(x_i) = 0`` with ``g*`` recomputed
    at every iterate; then ``theta = mean{r U / pi + (1 - r/pi) U*}``.
    ``joint=True`` instead solves the stacked system with a numerical
    Jacobian (used to cross-check the two-stage solution).
    """
    q = response.q
    tag = getattr(backend, "tag", "?")
    gamma = _gamma(backend)
    if not data.has_nonresponse():
        theta = float(np.mean(target(data.y))) if data.n_r == data.n else np.nan
        return _na(q, NO_NONRESPONSE, "proposed", tag, theta=theta, gamma=gamma)

    resp = data.respondents
    u_r = target(data.y[resp])
    if isinstance(backend, ClosedFormExpFam):
        parts, F = _closed_form_engine(data, response, backend, target)
        J = None

        def theta_at(phi):
            _, ey, c, lr = parts(phi)
            return float((np.sum(u_r / lr.pi) + c @ ey) / data.n), lr
    else:
        try:
            pool = _pool_for(backend, data)
        except EstimationNA as e:
            return _na(q, e.reason, "proposed", tag, gamma=gamma)
        eng = TiltedScore(data, response, pool, "proposed", _message(backend))
        F, J = eng.F, eng.J
        u_pool = target(pool.y)
        u_merged = target(eng.y_r)

        def theta_at(phi):
            s = eng.state(phi)
            ustar = s["st"].expect(u_pool)
            lr = s["lr"]
            return float((np.sum(eng.cnt_r * u_merged / lr.pi) + eng.unit_weights(s) @ ustar) / data.n), lr

    starts = starting_values(data, response, opts) if starts is None else starts

    if joint:
        def FJ(par):
            phi, theta = par[:-1], par[-1]
            t_hat, _ = theta_at(phi)
            return np.append(F(phi), data.n * (theta - t_hat))

        starts = [np.append(s, np.mean(u_r)) for s in starts]
        res = _multi_start(FJ, None, starts, opts)
        if not res.converged:
            return _na(q, res.reason, "proposed", tag, res.iterations, res.residual, gamma=gamma)
        phi_hat, theta = res.x[:-1], float(res.x[-1])
        return EstimateResult(phi_hat, theta, True, None, res.iterations, res.residual, tag, "proposed", gamma)

    def rki_root():
        if isinstance(backend, ClosedFormExpFam):
            return None
        eng0 = TiltedScore(data, response, pool, "rki", _message(backend))
        r0 = _multi_start(eng0.F, eng0.J, starts, opts, _interior(response, data), cost=eng0.cost)
        return r0.x if r0.converged else None

    cost = None if isinstance(backend, ClosedFormExpFam) else eng.cost
    res = _multi_start(F, J, starts, opts, _interior(response, data), rki_root, cost)
    if not res.converged:
        return _na(q, res.reason, "proposed", tag, res.iterations, res.residual, gamma=gamma)
    try:
        theta, lr = theta_at(res.x)
    except EstimationNA as e:
        return _na(q, e.reason, "proposed", tag, res.iterations, res.residual, gamma=gamma)
    diag = {"n_clamped_pi": lr.n_clamped}
    if lr.n_clamped:
        warn_if_clamped(lr.n_clamped, " at the solution")
    return EstimateResult(res.x, theta, True, None, res.iterations, res.residual, tag, "proposed",
                          gamma, diag)


# ---------------------------------------------------------------------------
# All-binary closed form
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BinaryClosedForm:
    pi: np.ndarray | None  # pi[a, c] = P(R = 1 | x1 = a, y = c)
    phi: np.ndarray | None  # logistic-odds coefficients on I(x1=a, y=c)
    theta: float
    converged: bool
    na_reason: str | None


def binary_counts(data: Dataset):
    """``m[a, b, c]`` respondent counts and ``n[a, b]`` totals, x1/x2/y binary."""
    x1 = data.x[:, 0].astype(int)
    x2 = data.x[:, 1].astype(int)
    resp = data.respondents
    m = np.zeros((2, 2, 2))
    np.add.at(m, (x1[resp], x2[resp], data.y[resp].astype(int)), 1.0)
    n = np.zeros((2, 2))
    np.add.at(n, (x1, x2), 1.0)
    return m, n


BINARY_TERMS = ("(1-x1)*(1-y)", "(1-x1)*y", "x1*(1-y)", "x1*y")


def binary_closed_form(data: Dataset, target: TargetFunction = MEAN) -> BinaryClosedForm:
    """Solve ``n_ab = m_ab0 / pi_a0 + m_ab1 / pi_a1`` (b = 0, 1) for each ``a``."""
    if data.d < 2 or not np.all(np.isin(data.x[:, :2], (0, 1))) or not np.all(
            np.isin(data.y[data.respondents], (0, 1))):
        raise ModelError("binary closed form needs binary x1, x2 and y")
    m, n = binary_counts(data)
    if np.any(m == 0):
        return BinaryClosedForm(None, None, np.nan, False, "empty cell")
    pi = np.empty((2, 2))
    for a in range(2):
        M = m[a]  # rows b, cols c
        if abs(np.linalg.det(M)) < 1e-12 * max(1.0, np.abs(M).max() ** 2):
            return BinaryClosedForm(None, None, np.nan, False, SINGULAR)
        inv_pi = np.linalg.solve(M, n[a])
        if np.any(inv_pi <= 1.0):
            return BinaryClosedForm(None, None, np.nan, False, "no interior solution")
        pi[a] = 1.0 / inv_pi
    phi = np.log((1.0 - pi) / pi).ravel()
    u = target(np.array([0.0, 1.0]))
    theta = float(np.einsum("abc,ac,c->", m, 1.0 / pi, u) / data.n)
    return BinaryClosedForm(pi, phi, theta, True, None)


def binary_estimating_functions(m: np.ndarray, n: np.ndarray, pi: np.ndarray):
    """The count-form RKI and proposed estimating functions at ``pi[a, c]``.

    Returns two ``(2, 2)`` arrays indexed ``[a, c]``.
    """
    ell = n - m.sum(axis=2)
    rki = np.empty((2, 2))
    new = np.empty((2, 2))
    for a in range(2):
        for c in range(2):
            denom = np.array([np.sum(m[a, b] * (1 - pi[a]) / pi[a]) for b in range(2)])
            rki[a, c] = m[a, :, c].sum() / pi[a, c] - np.sum(ell[a] * (m[a, :, c] / pi[a, c]) / denom)
            denom2 = np.array([np.sum(m[a, b] * (1 - pi[a]) / pi[a] ** 2) for b in range(2)])
            resid = n[a] - m[a, :, 0] / pi[a, 0] - m[a, :, 1] / pi[a, 1]
            new[a, c] = np.sum(resid * (m[a, :, c] / pi[a, c] ** 2) / denom2)
    return rki, new
