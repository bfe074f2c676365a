"""Odds-tilted conditional expectations ``E*(g | x)`` and ``E0(g | x)``.

All donor-based backends share one representation: a :class:`DonorPool`
holding, for each target covariate row ``x_i`` and each respondent donor
``j``, a log base weight that does not depend on ``phi``:

* ``Parametric``     log f1(y_j | x_i; gamma) - log C(y_j)
* ``Discrete``       0 on the exact cell ``x_j == x_i``, -inf elsewhere
* ``NadarayaWatson`` log kernel on continuous columns, exact match on
  discrete columns

The tilt ``pi^{-1} O`` (for ``E*``) or ``O`` (for ``E0``) is evaluated at
``(x_i, y_j)`` and the rows are normalised.  ``ClosedFormExpFam`` bypasses
donors altogether.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .core_model import (
    Dataset,
    ResponseModel,
    WorkingModel,
    get_link,
    unique_rows,
    x_design,
    y_design,
)
from .errors import EstimationNA, ModelError

STAR = 2  # tilt pi^{-1} O
ZERO = 1  # tilt O


@dataclass(frozen=True)
class DonorPool:
    x: np.ndarray  # (m, d) target rows
    index: np.ndarray | None  # (n,) unit -> target row
    y: np.ndarray  # (n_r,) donor outcomes
    log_base: np.ndarray  # (m, n_r)
    sign: np.ndarray | None  # signed kernels only
    kind: str

    @property
    def m(self) -> int:
        return self.x.shape[0]

    @cached_property
    def _scaled(self):
        top = np.max(self.log_base, axis=1)
        ok = np.isfinite(top)
        B = np.exp(self.log_base - np.where(ok, top, 0.0)[:, None])
        if self.sign is not None:
            B = B * self.sign
        return B, ok

    def scaled_base(self):
        """``exp(log_base - row max)`` (signed) and a flag for rows with support."""
        return self._scaled


def compress_donors(pool: DonorPool, data: Dataset) -> DonorPool:
    """Merge donors sharing ``(x, y)`` into one column weighted by multiplicity.

    Every backend's base weight depends on a donor only through ``(x_j, y_j)``,
    so the merge is exact.  Columns no longer align with respondents.
    """
    resp = data.respondents
    keys = np.column_stack([data.x[resp], data.y[resp]])
    _, first, _, counts = unique_rows(keys)
    if first.size == keys.shape[0]:
        return pool
    log_base = pool.log_base[:, first] + np.log(counts)[None, :]
    sign = None if pool.sign is None else pool.sign[:, first]
    return DonorPool(pool.x, pool.index, pool.y[first], log_base, sign, pool.kind)


def _unique_rows(x):
    xu, _, inv, _ = unique_rows(x)
    return xu, inv.ravel()


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Discrete:
    """Exact-cell averaging over respondents sharing ``x``."""

    tag = "discrete"
    empty_message = "empty cell at x"

    def pool(self, data: Dataset, x=None) -> DonorPool:
        if not all(data.discrete):
            raise ModelError("discrete backend requires every x component flagged discrete")
        resp = data.respondents
        if x is None:
            xu, inv = _unique_rows(data.x)
            rows = inv[resp]
            base = np.arange(xu.shape[0])[:, None] == rows[None, :]
        else:
            xu, inv = np.atleast_2d(np.asarray(x, dtype=float)), None
            base = np.all(xu[:, None, :] == data.x[resp][None, :, :], axis=2)
        log_base = np.where(base, 0.0, -np.inf)
        return DonorPool(xu, inv, data.y[resp], log_base, None, self.tag)


@dataclass(frozen=True)
class NadarayaWatson:
    """Product-kernel smoothing on continuous columns, exact match on discrete.

    ``order`` 2 is the Gaussian kernel, 4 its twicing ``(3 - u^2) phi(u) / 2``.
    Bandwidth per column is ``multiplier * 1.06 * sd * n_r^(-1/5)``, times
    ``n_r^(-1/20)`` when ``undersmooth``; ``bandwidth`` overrides it.
    """

    order: int = 2
    multiplier: float = 1.0
    undersmooth: bool = False
    bandwidth: tuple[float, ...] | None = None

    tag = "nw"
    empty_message = "no kernel mass at x"

    def __post_init__(self):
        if self.order not in (2, 4):
            raise ModelError("kernel order must be 2 or 4")
        if not self.multiplier > 0:
            raise ModelError("bandwidth multiplier must be positive")

    def bandwidths(self, data: Dataset) -> np.ndarray:
        cont = [k for k, disc in enumerate(data.discrete) if not disc]
        if self.bandwidth is not None:
            h = np.asarray(self.bandwidth, dtype=float)
            if h.size != len(cont) or np.any(h <= 0):
                raise ModelError("need one positive bandwidth per continuous column")
            return h
        xr = data.x[data.respondents][:, cont]
        nr = xr.shape[0]
        h = self.multiplier * 1.06 * xr.std(axis=0, ddof=1) * nr ** (-0.2)
        if self.undersmooth:
            h = h * nr ** (-0.05)
        if np.any(h <= 0):
            raise ModelError("degenerate bandwidth (constant continuous column)")
        return h

    def pool(self, data: Dataset, x=None) -> DonorPool:
        cont = [k for k, disc in enumerate(data.discrete) if not disc]
        disc = [k for k, d in enumerate(data.discrete) if d]
        if not cont:
            raise ModelError("Nadaraya-Watson backend requires a continuous x component")
        h = self.bandwidths(data)
        resp = data.respondents
        if x is None:
            xu, inv = _unique_rows(data.x)
        else:
            xu, inv = np.atleast_2d(np.asarray(x, dtype=float)), None
        xr = data.x[resp]
        log_base = np.zeros((xu.shape[0], xr.shape[0]))
        sign = None
        for k, hk in zip(cont, h):
            u = (xu[:, k][:, None] - xr[:, k][None, :]) / hk
            log_base -= 0.5 * u * u
            if self.order == 4:
                poly = 3.0 - u * u
                with np.errstate(divide="ignore"):
                    log_base += np.log(np.abs(poly))
                s = np.sign(poly)
                sign = s if sign is None else sign * s
        if disc:
            match = np.all(xu[:, None, disc] == xr[None, :, disc], axis=2)
            log_base = np.where(match, log_base, -np.inf)
        return DonorPool(xu, inv, data.y[resp], log_base, sign, self.tag)


@dataclass(frozen=True)
class Parametric:
    """Fractional weights built from a fitted working model ``f1``."""

    working: WorkingModel

    tag = "parametric"
    empty_message = "empty importance support at unit"

    def __post_init__(self):
        if not self.working.fitted:
            raise ModelError("parametric backend needs a fitted working model")

    def pool(self, data: Dataset, x=None) -> DonorPool:
        resp = data.respondents
        yr = data.y[resp]
        xu_all, inv_all = _unique_rows(data.x)
        counts = np.bincount(inv_all[resp], minlength=xu_all.shape[0]).astype(float)
        tau = self.working.natural(xu_all)
        psi = self.working.psi
        fam = self.working.family
        L = fam.logpdf(yr[None, :], tau[:, None], psi)
        with np.errstate(divide="ignore"):
            log_c = logsumexp(L + np.log(counts)[:, None], axis=0)
        if x is None:
            xu, inv, Lx = xu_all, inv_all, L
        else:
            xu = np.atleast_2d(np.asarray(x, dtype=float))
            inv = None
            Lx = fam.logpdf(yr[None, :], self.working.natural(xu)[:, None], psi)
        return DonorPool(xu, inv, yr, Lx - log_c[None, :], None, self.tag)


@dataclass(frozen=True)
class ClosedFormExpFam:
    """Analytic ``g*`` and ``E*(Y | x)`` for exponential-family ``f1``."""

    working: WorkingModel

    tag = "closed-form"

    def __post_init__(self):
        if not self.working.fitted:
            raise ModelError("closed-form backend needs a fitted working model")


DONOR_BACKENDS = (Discrete, NadarayaWatson, Parametric)


# ---------------------------------------------------------------------------
# Tilted weights on a pool
# ---------------------------------------------------------------------------


# Tilts whose row totals fall below this are recomputed in the log domain.
_TINY_TOTAL = 1e-250


class TiltState:
    """Row-normalised weights ``W`` on the ``(m, n_r)`` pool grid.

    The response index depends on ``x`` only through the x-parts ``A`` of
    the response basis, so the tilt factors as ``W_ij ~ B_ij T_{g(i) j}``
    with ``B`` the (cached) base weights and ``T`` evaluated once per
    distinct row of ``A``.  :meth:`wdot` computes ``sum_j W_ij f_ij M_jk``
    block by block; ``f`` is any array on the ``(G, n_r)`` grid of
    :attr:`lv`.  When the rows of ``A`` are mostly distinct, or the
    factored totals underflow, ``W`` is formed densely instead (``G = m``).
    """

    def __init__(self, A, C, lv, power, groups, inv, B=None, T=None, total=None, W=None):
        self.A = A  # (m, q) x-parts of the response basis
        self.C = C  # (n_r, q) y-parts
        self.lv = lv  # LinkValues on (G, n_r)
        self.power = power
        self.groups = groups  # list of row-index arrays, one per distinct A row
        self.inv = inv  # (m,) row -> group
        self._B, self._T, self._total, self._W = B, T, total, W
        self._dense = W is not None

    @property
    def dense(self) -> bool:
        return self._dense

    @property
    def W(self) -> np.ndarray:
        if self._W is None:
            self._W = self._B * self._T[self.inv] / self._total[:, None]
        return self._W

    def wdot(self, f, M) -> np.ndarray:
        """``sum_j W_ij f_ij M_jk``; ``f`` is ``None`` or shaped like ``lv.pi``."""
        M = np.asarray(M, dtype=float)
        vec = M.ndim == 1
        M2 = M[:, None] if vec else M
        if self.dense:
            Wf = self._W if f is None else self._W * f
            out = Wf @ M2
        else:
            out = np.empty((self.A.shape[0], M2.shape[1]))
            for g, rows in enumerate(self.groups):
                t = self._T[g] if f is None else self._T[g] * f[g]
                out[rows] = self._B[rows] @ (t[:, None] * M2)
            out /= self._total[:, None]
        return out[:, 0] if vec else out

    def expect(self, values: np.ndarray) -> np.ndarray:
        """``sum_j W_ij v_j`` for donor-only ``v`` of shape ``(n_r[, k])``."""
        return self.wdot(None, values)

    def expect_grid(self, values: np.ndarray) -> np.ndarray:
        """``sum_j W_ij v_ij`` for ``v`` of shape ``(m, n_r[, k])``."""
        if values.ndim == 2:
            return np.einsum("ij,ij->i", self.W, values)
        return np.einsum("ij,ijk->ik", self.W, values)

    def on_rows(self, f) -> np.ndarray:
        """Expand a ``(G, n_r)`` grid array to the full ``(m, n_r)`` grid."""
        return f if self.dense else f[self.inv]


def _groups(A):
    Au, _, inv, _ = unique_rows(A)
    inv = inv.ravel()
    order = np.argsort(inv, kind="stable")
    bounds = np.searchsorted(inv[order], np.arange(Au.shape[0] + 1))
    return Au, inv, [order[bounds[g]:bounds[g + 1]] for g in range(Au.shape[0])]


@dataclass(frozen=True)
class TiltPlan:
    """The ``phi``-free pieces of :func:`tilt` for one pool and response basis."""

    A: np.ndarray
    C: np.ndarray
    Au: np.ndarray
    inv: np.ndarray
    groups: list
    B: np.ndarray
    row_ok: np.ndarray
    factored: bool
    singletons: list


def tilt_plan(pool: DonorPool, response: ResponseModel) -> TiltPlan:
    A = x_design(response.terms, pool.x)
    C = y_design(response.terms, pool.y)
    Au, inv, groups = _groups(A)
    B, row_ok = pool.scaled_base()
    m = A.shape[0]
    return TiltPlan(A, C, Au, inv, groups, B, row_ok, Au.shape[0] * 4 <= m,
                    [np.array([i]) for i in range(m)])


def tilt(pool: DonorPool, response: ResponseModel, phi=None, power: int = STAR,
         message: str | None = None, plan: TiltPlan | None = None) -> TiltState:
    """Row-normalised weights ``base_ij * (1 - pi_ij) / pi_ij^power``.

    Pass a :class:`TiltPlan` from :func:`tilt_plan` when tilting the same
    pool repeatedly at different ``phi``.
    """
    phi = response._phi(phi)
    plan = plan or tilt_plan(pool, response)
    A, C, Au, inv, groups, B, row_ok = (plan.A, plan.C, plan.Au, plan.inv, plan.groups, plan.B,
                                        plan.row_ok)
    link = get_link(response.link)
    if plan.factored:
        if not row_ok.all():
            raise EstimationNA(f"{message or 'empty support'} (row {int(np.flatnonzero(~row_ok)[0])})")
        lv = link((Au * phi) @ C.T)
        logt = lv.log_comp - power * lv.log_pi
        T = np.exp(logt - logt.max(axis=1, keepdims=True))
        total = np.empty(A.shape[0])
        for g, rows in enumerate(groups):
            total[rows] = B[rows] @ T[g]
        if np.all(np.abs(total) > _TINY_TOTAL) and np.all(np.isfinite(total)):
            return TiltState(A, C, lv, power, groups, inv, B=B, T=T, total=total)
    lv = link((A * phi) @ C.T)
    logv = pool.log_base + lv.log_comp - power * lv.log_pi
    top = np.max(logv, axis=1)
    empty = ~np.isfinite(top)
    if np.any(empty):
        raise EstimationNA(f"{message or 'empty support'} (row {int(np.flatnonzero(empty)[0])})")
    v = np.exp(logv - top[:, None])
    if pool.sign is not None:
        v = v * pool.sign
    total = v.sum(axis=1)
    if np.any(np.abs(total) <= 0) or not np.all(np.isfinite(total)):
        raise EstimationNA(message or "empty support")
    m = A.shape[0]
    return TiltState(A, C, lv, power, plan.singletons, np.arange(m), W=v / total[:, None])


def _message(backend) -> str:
    return getattr(backend, "empty_message", "empty support")


def _grid_g(g: Callable, pool: DonorPool) -> np.ndarray:
    vals = np.asarray(g(pool.x[:, None, :], pool.y[None, :]), dtype=float)
    if vals.ndim == 0:
        vals = np.full((pool.m, pool.y.size), float(vals))
    return np.broadcast_to(vals, (pool.m, pool.y.size) + vals.shape[2:])


def expectation(g: Callable, pool: DonorPool, response: ResponseModel, phi=None,
                power: int = STAR, message: str | None = None) -> np.ndarray:
    """Tilted expectation of ``g(x, y)`` at each pool target row."""
    st = tilt(pool, response, phi, power, message)
    return st.expect_grid(np.array(_grid_g(g, pool)))


# ---------------------------------------------------------------------------
# Fractional weights (parametric)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FractionalWeights:
    """Row-stochastic ``w*_ij`` over units ``rows`` and respondents ``cols``.

    Units sharing a covariate row share a weight row, so only the distinct
    rows ``distinct`` (one per row of ``x``) are stored; ``index`` maps each
    unit to its row and ``matrix`` expands on demand.
    """

    distinct: np.ndarray  # (m, n_r)
    index: np.ndarray  # (n,) unit -> distinct row
    rows: np.ndarray
    cols: np.ndarray
    x: np.ndarray  # distinct covariate rows
    y: np.ndarray  # donor outcomes, aligned with cols

    @property
    def matrix(self) -> np.ndarray:
        return self.distinct[self.index]


def fractional_weights(data: Dataset, working: WorkingModel, response: ResponseModel,
                       phi=None, power: int = STAR) -> FractionalWeights:
    backend = Parametric(working)
    pool = backend.pool(data)
    st = tilt(pool, response, phi, power, _message(backend))
    return FractionalWeights(st.W, pool.index, np.arange(data.n), np.flatnonzero(data.respondents),
                             pool.x, pool.y)


def estar_parametric(g: Callable, weights: FractionalWeights) -> np.ndarray:
    """``sum_j w*_ij g(x_i, y_j)`` for every unit ``i``."""
    vals = np.asarray(g(weights.x[:, None, :], weights.y[None, :]), dtype=float)
    vals = np.broadcast_to(vals, weights.distinct.shape + vals.shape[2:])
    if vals.ndim == 2:
        out = np.einsum("ij,ij->i", weights.distinct, vals)
    else:
        out = np.einsum("ij,ijk->ik", weights.distinct, vals)
    return out[weights.index]


def e0_parametric(g: Callable, data: Dataset, working: WorkingModel, response: ResponseModel,
                  phi=None) -> np.ndarray:
    """``E0(g | x_i) = E1(O g | x_i) / E1(O | x_i)`` via fractional weights."""
    return estar_parametric(g, fractional_weights(data, working, response, phi, power=ZERO))


def estar_discrete(g: Callable, x, response: ResponseModel, data: Dataset, phi=None,
                   power: int = STAR) -> np.ndarray:
    backend = Discrete()
    return expectation(g, backend.pool(data, x), response, phi, power, _message(backend))


def estar_nw(g: Callable, x, response: ResponseModel, data: Dataset,
             backend: NadarayaWatson | None = None, phi=None, power: int = STAR) -> np.ndarray:
    backend = backend or NadarayaWatson()
    return expectation(g, backend.pool(data, x), response, phi, power, _message(backend))


# ---------------------------------------------------------------------------
# Closed form for exponential-family f1 and linear-in-y logistic odds
# ---------------------------------------------------------------------------


def estar_closed_form(working: WorkingModel, response: ResponseModel, x, phi=None):
    """Return ``(g_star, e_star_y)`` at covariate rows ``x``.

    ``g_star`` has one column per response term: ``a_k(x) / (1 + d)`` for
    terms free of y and ``a_k(x) bdot(s psi + tau) / (1 + d)`` for ``a_k(x) y``.
    """
    if response.link != "logistic-odds":
        raise ModelError("Proposition 1 inapplicable: needs the logistic-odds link")
    try:
        phi_arr, hx, hy = response.split_linear_y(phi)
    except ModelError:
        raise ModelError("Proposition 1 inapplicable: response is nonlinear in y") from None
    x = np.atleast_2d(np.asarray(x, dtype=float))
    A = x_design(response.terms, x)
    h = A[:, hx] @ phi_arr[hx]
    s = A[:, hy] @ phi_arr[hy]
    tau = working.natural(x)
    psi = working.psi
    fam = working.family
    t1 = s * psi + tau
    t2 = 2.0 * s * psi + tau
    d = np.exp(np.clip(h + (fam.b(t2) - fam.b(t1)) / psi, -700, 700))
    b1 = fam.bdot(t1)
    b2 = fam.bdot(t2)
    has_y = response.y_terms
    g = A * np.where(has_y[None, :], b1[:, None], 1.0) / (1.0 + d)[:, None]
    ey = (b1 + d * b2) / (1.0 + d)
    return g, ey
