"""Damped Newton root finder shared by every estimating-equation solve."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import least_squares

from .errors import EstimationNA, IllConditionedWarning

MAX_ITER = "max-iter"
SINGULAR = "singular-Jacobian"
DIVERGENCE = "divergence"


@dataclass(frozen=True)
class SolverOptions:
    """Controls for :func:`solve_system`.

    ``jacobian`` is ``"analytic"`` (use the supplied Jacobian when there is
    one) or ``"fd"`` (always central finite differences).  ``fallback``
    enables a trust-region least-squares search (polished by Newton) when
    every Newton start fails; only certified roots are accepted.  Its
    evaluation budget is ``fallback_max_nfev``, or when that is ``None`` a
    caller-supplied budget (default 200).  Newton
    stops early (``max-iter``) when ``|F|`` has not halved over
    ``stall_window`` iterations; 0 disables this.
    """

    tol: float = 1e-9
    max_iter: int = 50
    jacobian: str = "analytic"
    fd_step: float = 1e-6
    max_halvings: int = 20
    divergence_bound: float = 1e8
    cond_warn: float = 1e12
    cond_singular: float = 1e15
    fallback: bool = True
    stall_window: int = 10
    fallback_max_nfev: int | None = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.jacobian not in ("analytic", "fd"):
            raise ValueError("jacobian must be 'analytic' or 'fd'")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")
        if self.max_halvings < 0:
            raise ValueError("max_halvings must be >= 0")


@dataclass(frozen=True)
class RootResult:
    x: np.ndarray
    converged: bool
    reason: str | None
    iterations: int
    residual: float
    fun: np.ndarray
    ill_conditioned: bool = False


def fd_jacobian(F: Callable, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian, step scaled by ``max(1, |x_k|)``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        h = step * max(1.0, abs(x[k]))
        e = np.zeros_like(x)
        e[k] = h
        cols.append((np.asarray(F(x + e)) - np.asarray(F(x - e))) / (2.0 * h))
    return np.column_stack(cols)


def _safe_eval(F, x):
    try:
        f = np.asarray(F(x), dtype=float)
    except (EstimationNA, FloatingPointError, np.linalg.LinAlgError):
        return None
    if not np.all(np.isfinite(f)):
        return None
    return f


def solve_system(
    F: Callable[[np.ndarray], np.ndarray],
    x0,
    opts: SolverOptions | None = None,
    jac: Callable[[np.ndarray], np.ndarray] | None = None,
) -> RootResult:
    """Solve ``F(x) = 0`` by Newton's method with step halving.

    Never raises for numerical trouble: failures come back as a
    non-converged :class:`RootResult` whose ``reason`` is one of
    ``"max-iter"``, ``"singular-Jacobian"`` or ``"divergence"``.
    """
    opts = opts or SolverOptions()
    x = np.array(x0, dtype=float).ravel()
    use_fd = jac is None or opts.jacobian == "fd"
    ill = False

    f = _safe_eval(F, x)
    if f is None:
        return RootResult(x, False, DIVERGENCE, 0, np.inf, np.full(x.size, np.nan))
    if f.size != x.size:
        raise ValueError(f"F returns {f.size} components for {x.size} unknowns")
    norm = float(np.max(np.abs(f)))
    history = [norm]

    for it in range(opts.max_iter + 1):
        if norm < opts.tol:
            return RootResult(x, True, None, it, norm, f, ill)
        if it == opts.max_iter:
            break
        w = opts.stall_window
        if w and it >= w and norm > 0.5 * history[it - w]:
            return RootResult(x, False, MAX_ITER, it, norm, f, ill)
        try:
            J = fd_jacobian(F, x, opts.fd_step) if use_fd else np.asarray(jac(x), dtype=float)
        except (EstimationNA, FloatingPointError):
            return RootResult(x, False, DIVERGENCE, it, norm, f, ill)
        if not np.all(np.isfinite(J)):
            return RootResult(x, False, SINGULAR, it, norm, f, ill)
        try:
            U, sv, Vt = np.linalg.svd(J)
        except np.linalg.LinAlgError:
            return RootResult(x, False, SINGULAR, it, norm, f, ill)
        cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
        if not np.isfinite(cond) or cond > opts.cond_singular:
            return RootResult(x, False, SINGULAR, it, norm, f, ill)
        if cond > opts.cond_warn and not ill:
            ill = True
            warnings.warn(f"Jacobian condition number {cond:.3g}", IllConditionedWarning, stacklevel=2)
        step = Vt.T @ ((U.T @ f) / sv)

        # step halving: keep the best trial, stop at the first that reduces |F|
        best = None
        t = 1.0
        for _ in range(opts.max_halvings + 1):
            x_new = x - t * step
            f_new = _safe_eval(F, x_new)
            if f_new is not None:
                n_new = float(np.max(np.abs(f_new)))
                if best is None or n_new < best[2]:
                    best = (x_new, f_new, n_new)
                if n_new < norm:
                    break
            t *= 0.5
        if best is None:
            return RootResult(x, False, DIVERGENCE, it + 1, norm, f, ill)
        x, f, norm = best
        history.append(norm)
        if np.max(np.abs(x)) > opts.divergence_bound:
            return RootResult(x, False, DIVERGENCE, it + 1, norm, f, ill)

    return RootResult(x, False, MAX_ITER, opts.max_iter, norm, f, ill)


def solve_trust_region(
    F: Callable[[np.ndarray], np.ndarray],
    x0,
    opts: SolverOptions | None = None,
    jac: Callable[[np.ndarray], np.ndarray] | None = None,
    max_nfev: int = 200,
) -> RootResult:
    """Minimise ``|F|^2`` by a trust-region method, then polish with Newton.

    Used as a fallback when Newton wanders into a region where ``F`` flattens
    out.  The answer counts only if the polished point satisfies
    ``|F|_inf < tol``; a local minimum of ``|F|`` is reported as ``max-iter``.
    """
    opts = opts or SolverOptions()
    x0 = np.array(x0, dtype=float).ravel()
    big = None

    def fun(x):
        nonlocal big
        f = _safe_eval(F, x)
        if f is None:
            return np.full(x0.size, 1e10 if big is None else big)
        if big is None:
            big = 1e3 * max(1.0, float(np.max(np.abs(f))))
        return f

    def dfun(x):
        try:
            J = np.asarray(jac(x), dtype=float) if jac is not None and opts.jacobian == "analytic" \
                else fd_jacobian(F, x, opts.fd_step)
        except (EstimationNA, FloatingPointError):
            return np.eye(x0.size)
        return J if np.all(np.isfinite(J)) else np.eye(x0.size)

    try:
        ls = least_squares(fun, x0, jac=dfun, method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                           max_nfev=opts.fallback_max_nfev or max_nfev)
    except (ValueError, np.linalg.LinAlgError):
        return RootResult(x0, False, MAX_ITER, 0, np.inf, np.full(x0.size, np.nan))
    if not np.all(np.isfinite(ls.x)) or np.max(np.abs(ls.x)) > opts.divergence_bound:
        return RootResult(ls.x, False, DIVERGENCE, ls.nfev, np.inf, np.full(x0.size, np.nan))
    polished = solve_system(F, ls.x, opts, jac)
    return RootResult(polished.x, polished.converged, polished.reason,
                      ls.nfev + polished.iterations, polished.residual, polished.fun,
                      polished.ill_conditioned)
