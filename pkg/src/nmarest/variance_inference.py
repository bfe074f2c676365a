"""Sandwich variance for the proposed ``theta`` estimator.

The influence function is ``S2 - kappa S1`` with ``kappa = kappa1 kappa2^{-1}``,
``kappa1 = E{(U* - U) pi_dot' / pi}`` and ``kappa2 = E{g* pi_dot' / pi}``.
Both are estimated by the same optimal equation used for ``theta`` (the
default) or by plain ``r / pi`` weighted averages (``method="plugin"``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .conditional_expectation import STAR, ClosedFormExpFam, _message, compress_donors, estar_closed_form, tilt
from .core_model import MEAN, Dataset, ResponseModel, TargetFunction, get_link
from .errors import EstimationNA, NMARError

KAPPA_SINGULAR = "kappa system singular"


@dataclass(frozen=True)
class VarianceEstimate:
    V: float
    kappa1: np.ndarray
    kappa2: np.ndarray
    kappa: np.ndarray
    se: float
    n: int
    theta: float
    ci: dict = field(default_factory=dict)


@dataclass(frozen=True)
class _Parts:
    """Per-unit pieces of the efficient influence function at ``phi``."""

    c: np.ndarray  # (n,) 1 - r/pi (1 for nonrespondents)
    g: np.ndarray  # (n, q) g*(x_i)
    ustar: np.ndarray  # (n,) U*(x_i)
    u: np.ndarray  # (n,) U(y_i), 0 for nonrespondents
    inv_pi: np.ndarray  # (n,) r_i / pi_i
    nu_D: np.ndarray  # (n, q) pi_dot_i / pi_i for respondents, 0 otherwise
    e_nuC: np.ndarray | None  # (n, q) a(x) E*(nu C | x)
    e_nuCU: np.ndarray | None  # (n, q) a(x) E*(nu C U | x)


def _parts(data: Dataset, response: ResponseModel, phi, backend, target: TargetFunction,
           need_star: bool) -> _Parts:
    phi = np.asarray(phi, dtype=float)
    n, q = data.n, response.q
    resp = data.respondents
    D_r = response.design(data.x[resp], data.y[resp])
    lr = get_link(response.link)(D_r @ phi)
    c = np.ones(n)
    c[resp] = 1.0 - 1.0 / lr.pi
    inv_pi = np.zeros(n)
    inv_pi[resp] = 1.0 / lr.pi
    u = np.zeros(n)
    u[resp] = target(data.y[resp])
    nu_D = np.zeros((n, q))
    nu_D[resp] = D_r * (lr.d1 / lr.pi)[:, None]

    if isinstance(backend, ClosedFormExpFam):
        if need_star:
            raise NMARError("optimal kappa needs a donor backend; use method='plugin'")
        g, ustar = estar_closed_form(backend.working, response, data.x, phi)
        return _Parts(c, g, ustar, u, inv_pi, nu_D, None, None)

    pool = compress_donors(backend.pool(data), data)
    st = tilt(pool, response, phi, STAR, _message(backend))
    lv = st.lv
    g = (st.A * st.wdot(-lv.d1 / lv.comp, st.C))[pool.index]
    u_pool = target(pool.y)
    ustar = st.expect(u_pool)[pool.index]
    e_nuC = e_nuCU = None
    if need_star:
        nu = lv.d1 / lv.pi
        both = st.wdot(nu, np.hstack([st.C, st.C * u_pool[:, None]]))
        q = st.C.shape[1]
        e_nuC = (st.A * both[:, :q])[pool.index]
        e_nuCU = (st.A * both[:, q:])[pool.index]
    return _Parts(c, g, ustar, u, inv_pi, nu_D, e_nuC, e_nuCU)


def _kappa_from_parts(p: _Parts, method: str):
    n = p.c.size
    script_u = (p.ustar - p.u)[:, None] * p.nu_D  # zero rows for nonrespondents
    k1 = p.inv_pi @ script_u
    k2 = (p.g * p.inv_pi[:, None]).T @ p.nu_D
    if method == "optimal":
        e_u = p.ustar[:, None] * p.e_nuC - p.e_nuCU
        k1 = k1 + p.c @ e_u
        k2 = k2 + (p.g * p.c[:, None]).T @ p.e_nuC
    elif method != "plugin":
        raise ValueError("method must be 'optimal' or 'plugin'")
    return k1 / n, k2 / n


def estimate_kappa(data: Dataset, response: ResponseModel, phi, backend,
                   target: TargetFunction = MEAN, method: str = "optimal"):
    """Return ``(kappa1, kappa2)`` with shapes ``(q,)`` and ``(q, q)``."""
    p = _parts(data, response, phi, backend, target, method == "optimal")
    return _kappa_from_parts(p, method)


def confidence_interval(theta: float, V: float, n: int, alpha: float = 0.05):
    """Normal-quantile interval ``theta -/+ z_{1 - alpha/2} sqrt(V / n)``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    if V < 0:
        raise ValueError("variance must be non-negative")
    half = norm.ppf(1.0 - alpha / 2.0) * np.sqrt(V / n)
    return float(theta - half), float(theta + half)


def variance_sandwich(data: Dataset, response: ResponseModel, theta: float, phi, backend,
                      target: TargetFunction = MEAN, kappa=None, method: str = "optimal",
                      alphas=(0.05,)) -> VarianceEstimate:
    """``V = mean{(S2_i - kappa S1_i)^2}`` with ``SE = sqrt(V / n)``.

    With no nonrespondents the influence function is ``theta - U`` and
    ``V`` is the sample variance of ``U``.
    """
    n = data.n
    if not data.has_nonresponse():
        u = target(data.y)
        V = float(np.mean((theta - u) ** 2))
        q = response.q
        return _finish(V, np.zeros(q), np.zeros((q, q)), np.zeros(q), n, theta, alphas)
    p = _parts(data, response, phi, backend, target, kappa is None and method == "optimal")
    if kappa is None:
        k1, k2 = _kappa_from_parts(p, method)
    else:
        k1, k2 = kappa
    k1 = np.asarray(k1, dtype=float)
    k2 = np.asarray(k2, dtype=float)
    if not np.all(np.isfinite(k2)) or np.linalg.cond(k2) > 1e15:
        raise EstimationNA(KAPPA_SINGULAR)
    kap = np.linalg.solve(k2.T, k1)
    s1 = p.c[:, None] * p.g
    s2 = theta - p.ustar + p.inv_pi * (p.ustar - p.u)
    infl = s2 - s1 @ kap
    V = float(np.mean(infl ** 2))
    if V < 0 or not np.isfinite(V):
        raise NMARError("internal error: invalid sandwich variance")
    return _finish(V, k1, k2, kap, n, theta, alphas)


def _finish(V, k1, k2, kap, n, theta, alphas):
    se = float(np.sqrt(V / n))
    ci = {a: confidence_interval(theta, V, n, a) for a in alphas}
    return VarianceEstimate(V, k1, k2, kap, se, n, float(theta), ci)
