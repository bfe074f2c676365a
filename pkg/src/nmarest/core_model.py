"""Data container, response mechanisms, working outcome models and targets.

Response models use the odds convention

    pi(x, y; phi) = 1 / (1 + exp(eta)),   eta = sum_k phi_k a_k(x) c_k(y)

for the ``logistic-odds`` link, so a positive y-coefficient lowers the
response probability.  ``probit`` and ``cloglog`` use the usual
orientation ``pi = Phi(eta)`` and ``pi = 1 - exp(-exp(eta))``.

Every basis term factorises into an x-part and a y-part.  That is what
lets the conditional-expectation code evaluate the whole
(target row) x (donor) grid with a single matrix product.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import special

from .errors import BoundedBelowWarning, ModelError, NumericalError
from .solver import RootResult, SolverOptions, solve_system

EXP_CLAMP = 700.0
PI_EPS = 1e-12
_LOG_EPS = np.log(PI_EPS)
_LOG_1M_EPS = np.log1p(-PI_EPS)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Incomplete sample ``(x_i, y_i, r_i)``; ``y`` is NaN where ``r == 0``."""

    x: np.ndarray
    y: np.ndarray
    r: np.ndarray
    discrete: tuple[bool, ...] = ()
    instrument: tuple[int, ...] = ()
    names: tuple[str, ...] = ()

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.array(self.y, dtype=float).ravel()
        r = np.array(self.r).ravel()
        if x.ndim != 2 or x.shape[1] < 1:
            raise ValueError("x must be an (n, d) array with d >= 1")
        n, d = x.shape
        if y.size != n or r.size != n:
            raise ValueError("x, y and r must have the same number of rows")
        if not np.all((r == 0) | (r == 1)):
            raise ValueError("r must be 0/1")
        r = r.astype(np.int8)
        present = np.isfinite(y)
        bad = np.flatnonzero(present != (r == 1))
        if bad.size:
            raise ValueError(f"row {bad[0] + 1}: y must be present exactly when r == 1")
        if not np.all(np.isfinite(x)):
            raise ValueError("x must be finite")
        discrete = tuple(bool(v) for v in self.discrete) if self.discrete else tuple(
            _looks_discrete(x[:, k]) for k in range(d))
        if len(discrete) != d:
            raise ValueError("discrete flags must have one entry per x column")
        names = tuple(self.names) if self.names else tuple(f"x{k + 1}" for k in range(d))
        if len(names) != d:
            raise ValueError("names must have one entry per x column")
        instrument = tuple(int(k) for k in self.instrument)
        if any(k < 0 or k >= d for k in instrument):
            raise ValueError("instrument indices out of range")
        for a in (x, y, r):
            a.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "discrete", discrete)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "instrument", instrument)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def respondents(self) -> np.ndarray:
        return self.r == 1

    @property
    def n_r(self) -> int:
        return int(self.r.sum())

    @property
    def response_rate(self) -> float:
        return float(self.r.mean())

    def has_nonresponse(self) -> bool:
        return 0 < self.n_r < self.n


def unique_rows(a: np.ndarray):
    """Sorted distinct rows of a 2-D float array.

    Returns ``(rows, first, inverse, counts)`` like ``np.unique(a, axis=0,
    return_index=True, return_inverse=True, return_counts=True)`` but via a
    lexsort, which is much faster for the few-column arrays used here.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError("unique_rows expects a 2-D array")
    n = a.shape[0]
    if n == 0:
        e = np.zeros(0, dtype=int)
        return a.copy(), e, e, e
    order = np.lexsort(a.T[::-1])
    srt = a[order]
    new = np.empty(n, dtype=bool)
    new[0] = True
    np.any(srt[1:] != srt[:-1], axis=1, out=new[1:])
    starts = np.flatnonzero(new)
    inverse = np.empty(n, dtype=int)
    inverse[order] = np.cumsum(new) - 1
    counts = np.diff(np.append(starts, n))
    return srt[starts], order[starts], inverse, counts


def _looks_discrete(col: np.ndarray, max_levels: int = 10) -> bool:
    return bool(np.all(col == np.round(col)) and np.unique(col).size <= max_levels)


# ---------------------------------------------------------------------------
# Separable basis terms
# ---------------------------------------------------------------------------

_FACTOR_RE = re.compile(r"^(?:(?P<one>1)|\(1-(?P<comp>x\d+|y)\)|(?P<var>x\d+|y)(?:\^(?P<pow>\d+))?)$")


@dataclass(frozen=True)
class Term:
    """Product ``a(x) c(y)`` of powers of ``x_j``, ``(1 - x_j)``, ``y``, ``(1 - y)``.

    ``x_powers`` holds ``(column, power, complement_power)`` triples.
    """

    label: str
    x_powers: tuple[tuple[int, int, int], ...] = ()
    y_power: int = 0
    y_comp: int = 0

    @classmethod
    def parse(cls, text: str) -> "Term":
        label = text.replace(" ", "")
        xs: dict[int, list[int]] = {}
        yp = yc = 0
        for factor in label.split("*"):
            m = _FACTOR_RE.match(factor)
            if not m:
                raise ModelError(f"cannot parse basis factor {factor!r} in {text!r}")
            if m.group("one"):
                continue
            var = m.group("comp") or m.group("var")
            comp = m.group("comp") is not None
            p = int(m.group("pow") or 1)
            if var == "y":
                if comp:
                    yc += 1
                else:
                    yp += p
            else:
                j = int(var[1:]) - 1
                if j < 0:
                    raise ModelError("x columns are numbered from 1")
                slot = xs.setdefault(j, [0, 0])
                slot[1 if comp else 0] += 1 if comp else p
        x_powers = tuple((j, v[0], v[1]) for j, v in sorted(xs.items()))
        return cls(label, x_powers, yp, yc)

    @property
    def has_y(self) -> bool:
        return self.y_power > 0 or self.y_comp > 0

    @property
    def linear_in_y(self) -> bool:
        return self.y_power == 1 and self.y_comp == 0

    @property
    def max_column(self) -> int:
        return max((j for j, _, _ in self.x_powers), default=-1)

    def x_part(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.ones(x.shape[:-1])
        for j, p, c in self.x_powers:
            if p:
                out = out * x[..., j] ** p
            if c:
                out = out * (1.0 - x[..., j]) ** c
        return out

    def y_part(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = np.ones(y.shape)
        if self.y_power:
            out = out * y ** self.y_power
        if self.y_comp:
            out = out * (1.0 - y) ** self.y_comp
        return out


def parse_terms(spec: str | Sequence[str | Term]) -> tuple[Term, ...]:
    """Parse ``"1, x1, y"`` (or a list of labels) into terms."""
    if isinstance(spec, str):
        spec = [s for s in re.split(r"[,;]", spec) if s.strip()]
    terms = tuple(t if isinstance(t, Term) else Term.parse(t) for t in spec)
    if not terms:
        raise ModelError("empty basis")
    return terms


def x_design(terms: Sequence[Term], x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.stack([t.x_part(x) for t in terms], axis=-1)


def y_design(terms: Sequence[Term], y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return np.stack([t.y_part(y) for t in terms], axis=-1)


# ---------------------------------------------------------------------------
# Links
# ---------------------------------------------------------------------------


class LinkValues(NamedTuple):
    """Clamped ``pi`` and its first two derivatives in the index."""

    pi: np.ndarray
    comp: np.ndarray  # 1 - pi
    log_pi: np.ndarray
    log_comp: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    n_clamped: int


class _Link:
    name = ""

    def logs(self, eta):
        raise NotImplementedError

    def derivs(self, eta, pi, comp):
        raise NotImplementedError

    def __call__(self, eta) -> LinkValues:
        eta = np.asarray(eta, dtype=float)
        top = np.abs(eta).max(initial=0.0)
        if not np.isfinite(top):
            raise NumericalError("numeric overflow in response index")
        if top > EXP_CLAMP:
            eta = np.clip(eta, -EXP_CLAMP, EXP_CLAMP)
        lp, lc = self.logs(eta)
        n_clamped = 0
        if min(lp.min(initial=0.0), lc.min(initial=0.0)) < _LOG_EPS:
            n_clamped = int(np.count_nonzero((lp < _LOG_EPS) | (lc < _LOG_EPS)))
            lp = np.clip(lp, _LOG_EPS, _LOG_1M_EPS)
            lc = np.clip(lc, _LOG_EPS, _LOG_1M_EPS)
        pi = np.exp(lp)
        comp = np.exp(lc)
        d1, d2 = self.derivs(eta, pi, comp)
        return LinkValues(pi, comp, lp, lc, d1, d2, n_clamped)


class LogisticOdds(_Link):
    name = "logistic-odds"

    def logs(self, eta):
        sp = np.logaddexp(0.0, eta)
        return -sp, eta - sp

    def derivs(self, eta, pi, comp):
        d1 = -pi * comp
        return d1, -d1 * (comp - pi)


class Probit(_Link):
    name = "probit"

    def logs(self, eta):
        return special.log_ndtr(eta), special.log_ndtr(-eta)

    def derivs(self, eta, pi, comp):
        dens = np.exp(-0.5 * eta * eta) / np.sqrt(2.0 * np.pi)
        return dens, -eta * dens


class CLogLog(_Link):
    name = "cloglog"

    def logs(self, eta):
        e = np.exp(eta)
        return np.log(-np.expm1(-e)), -e

    def derivs(self, eta, pi, comp):
        e = np.exp(eta)
        d1 = e * comp
        return d1, d1 * (1.0 - e)


LINKS: dict[str, _Link] = {k.name: k() for k in (LogisticOdds, Probit, CLogLog)}


def get_link(name: str) -> _Link:
    try:
        return LINKS[name]
    except KeyError:
        raise ModelError(f"unknown link {name!r}; choose from {sorted(LINKS)}") from None


# ---------------------------------------------------------------------------
# Response model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResponseModel:
    """Parametric response mechanism ``pi(x, y; phi)``."""

    terms: tuple[Term, ...]
    link: str = "logistic-odds"
    phi: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "terms", parse_terms(self.terms))
        get_link(self.link)
        if self.phi is not None:
            phi = tuple(float(v) for v in np.ravel(self.phi))
            if len(phi) != self.q:
                raise ModelError(f"phi has {len(phi)} entries for {self.q} basis terms")
            object.__setattr__(self, "phi", phi)

    @classmethod
    def from_spec(cls, terms: str | Sequence[str], link: str = "logistic-odds", phi=None):
        return cls(parse_terms(terms), link, None if phi is None else tuple(np.ravel(phi)))

    @property
    def q(self) -> int:
        return len(self.terms)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(t.label for t in self.terms)

    @property
    def y_terms(self) -> np.ndarray:
        return np.array([t.has_y for t in self.terms])

    def with_phi(self, phi) -> "ResponseModel":
        return replace(self, phi=tuple(np.ravel(phi).astype(float)))

    def _phi(self, phi):
        if phi is None:
            if self.phi is None:
                raise ModelError("response model has no coefficients")
            phi = self.phi
        return np.asarray(phi, dtype=float)

    def design(self, x, y) -> np.ndarray:
        """``d eta / d phi`` at paired ``(x, y)``; shape ``(..., q)``."""
        return x_design(self.terms, x) * y_design(self.terms, y)

    def index(self, x, y, phi=None) -> np.ndarray:
        return self.design(x, y) @ self._phi(phi)

    def values(self, x, y, phi=None) -> LinkValues:
        return get_link(self.link)(self.index(x, y, phi))

    def prob(self, x, y, phi=None) -> np.ndarray:
        return self.values(x, y, phi).pi

    def prob_grad(self, x, y, phi=None) -> np.ndarray:
        v = self.values(x, y, phi)
        return v.d1[..., None] * self.design(x, y)

    def odds(self, x, y, phi=None) -> np.ndarray:
        """``(1 - pi) / pi``."""
        v = self.values(x, y, phi)
        if np.any(v.pi <= 0) or np.any(v.pi >= 1):
            raise NumericalError("degenerate response probability")
        return np.exp(v.log_comp - v.log_pi)

    def score(self, x, y, r, phi=None) -> np.ndarray:
        """``{r - pi} pi_dot / [pi (1 - pi)]``."""
        v = self.values(x, y, phi)
        if np.any(v.pi <= 0) or np.any(v.pi >= 1):
            raise NumericalError("degenerate response probability")
        r = np.asarray(r, dtype=float)
        factor = (r - v.pi) * v.d1 / (v.pi * v.comp)
        return factor[..., None] * self.design(x, y)

    # -- helpers for the closed forms -------------------------------------
    def split_linear_y(self, phi=None):
        """Return ``h(x)`` terms and the slope on y for a model linear in y.

        Raises ``ModelError`` when some term is nonlinear in y.
        """
        phi = self._phi(phi)
        if any(t.has_y and not t.linear_in_y for t in self.terms):
            raise ModelError("closed form unavailable; use quadrature")
        hx = [k for k, t in enumerate(self.terms) if not t.has_y]
        hy = [k for k, t in enumerate(self.terms) if t.has_y]
        return phi, hx, hy

    def h(self, x, phi=None) -> np.ndarray:
        phi, hx, _ = self.split_linear_y(phi)
        A = x_design(self.terms, x)
        return A[..., hx] @ phi[hx]

    def y_slope(self, x, phi=None) -> np.ndarray:
        phi, _, hy = self.split_linear_y(phi)
        A = x_design(self.terms, x)
        return A[..., hy] @ phi[hy]


# ---------------------------------------------------------------------------
# Exponential-family working models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExponentialFamily:
    """``f(y) = exp{(y tau - b(tau)) / psi + c(y, psi)}``."""

    name: str
    b: Callable
    bdot: Callable
    c: Callable
    natural: Callable  # mean -> tau
    variance: Callable  # mean -> V(mu)
    sample: Callable  # (rng, tau, psi) -> draws
    dispersion_mle: Callable  # (y, mu) -> psi

    def logpdf(self, y, tau, psi):
        return (y * tau - self.b(tau)) / psi + self.c(y, psi)


NORMAL = ExponentialFamily(
    name="normal",
    b=lambda t: 0.5 * np.asarray(t) ** 2,
    bdot=lambda t: np.asarray(t, dtype=float),
    c=lambda y, psi: -0.5 * np.asarray(y) ** 2 / psi - 0.5 * np.log(2.0 * np.pi * psi),
    natural=lambda mu: np.asarray(mu, dtype=float),
    variance=lambda mu: np.ones_like(np.asarray(mu, dtype=float)),
    sample=lambda rng, tau, psi: rng.normal(tau, np.sqrt(psi)),
    dispersion_mle=lambda y, mu: float(np.mean((y - mu) ** 2)),
)

_MEAN_LINKS = {
    "identity": (lambda eta: eta, lambda eta: np.ones_like(eta)),
    "log": (lambda eta: np.exp(np.clip(eta, -EXP_CLAMP, EXP_CLAMP)),
            lambda eta: np.exp(np.clip(eta, -EXP_CLAMP, EXP_CLAMP))),
}


@dataclass(frozen=True)
class WorkingModel:
    """Model ``f1(y | x; gamma)`` for the respondents' outcome law."""

    terms: tuple[Term, ...]
    link: str = "identity"
    family: ExponentialFamily = NORMAL
    gamma: tuple[float, ...] | None = None
    psi: float | None = None
    label: str = ""

    def __post_init__(self):
        terms = parse_terms(self.terms)
        if any(t.has_y for t in terms):
            raise ModelError("working-model mean basis must not involve y")
        object.__setattr__(self, "terms", terms)
        if self.link not in _MEAN_LINKS:
            raise ModelError(f"unknown mean link {self.link!r}")
        if self.gamma is not None:
            object.__setattr__(self, "gamma", tuple(float(v) for v in np.ravel(self.gamma)))
        if not self.label:
            object.__setattr__(self, "label", f"{self.family.name}/{self.link}[{','.join(t.label for t in terms)}]")

    @classmethod
    def from_spec(cls, terms, link="identity", gamma=None, psi=None, label=""):
        return cls(parse_terms(terms), link, NORMAL, gamma, psi, label)

    @property
    def p(self) -> int:
        return len(self.terms)

    @property
    def fitted(self) -> bool:
        return self.gamma is not None and self.psi is not None

    def with_fit(self, gamma, psi) -> "WorkingModel":
        return replace(self, gamma=tuple(np.ravel(gamma)), psi=float(psi))

    def design(self, x) -> np.ndarray:
        return x_design(self.terms, x)

    def mean(self, x, gamma=None) -> np.ndarray:
        g = np.asarray(self.gamma if gamma is None else gamma, dtype=float)
        return _MEAN_LINKS[self.link][0](self.design(x) @ g)

    def natural(self, x, gamma=None) -> np.ndarray:
        return self.family.natural(self.mean(x, gamma))

    def logpdf(self, y, x) -> np.ndarray:
        """Log density; ``y`` and ``x[..., :]`` broadcast."""
        tau = self.natural(x)
        return self.family.logpdf(np.asarray(y, dtype=float), tau, self.psi)

    def pdf(self, y, x) -> np.ndarray:
        return np.exp(self.logpdf(y, x))


class WorkingModelFit(NamedTuple):
    gamma: np.ndarray
    model: WorkingModel
    aic_table: list  # (label, aic, loglik, n_params)


def _irls(model: WorkingModel, X, y, max_iter=100, tol=1e-10):
    inv, dmu = _MEAN_LINKS[model.link]
    if model.link == "identity":
        gamma, *_ = np.linalg.lstsq(X, y, rcond=None)
        # one refinement step pins the normal equations at rounding level
        gamma = gamma + np.linalg.lstsq(X, y - X @ gamma, rcond=None)[0]
        return gamma
    m = float(np.mean(y))
    gamma = np.zeros(X.shape[1])
    gamma[0] = np.log(abs(m)) if m != 0 else 0.0

    def dev(g):
        return float(np.sum((y - inv(X @ g)) ** 2 / model.family.variance(inv(X @ g))))

    cur = dev(gamma)
    for _ in range(max_iter):
        eta = X @ gamma
        mu = inv(eta)
        d = dmu(eta)
        w = d * d / model.family.variance(mu)
        z = eta + (y - mu) / d
        sw = np.sqrt(w)
        new = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)[0]
        delta = new - gamma
        t = 1.0
        for _ in range(30):
            cand = gamma + t * delta
            val = dev(cand)
            if np.isfinite(val) and val <= cur * (1 + 1e-12):
                break
            t *= 0.5
        else:
            raise ModelError("working model did not converge")
        step = cand - gamma
        gamma, cur = cand, val
        if np.max(np.abs(step)) < tol:
            return gamma
    raise ModelError("working model did not converge")


def fit_single_working_model(data: Dataset, model: WorkingModel) -> tuple[WorkingModel, float, float]:
    """Respondent-only maximum likelihood fit; returns (fitted, loglik, aic)."""
    resp = data.respondents
    X = model.design(data.x[resp])
    y = data.y[resp]
    if y.size < model.p:
        raise ModelError("fewer respondents than working-model coefficients")
    if np.linalg.matrix_rank(X) < model.p:
        raise ModelError("collinear working-model basis")
    gamma = _irls(model, X, y)
    mu = _MEAN_LINKS[model.link][0](X @ gamma)
    psi = model.family.dispersion_mle(y, mu)
    fitted = model.with_fit(gamma, psi)
    ll = float(np.sum(fitted.logpdf(y, data.x[resp])))
    aic = -2.0 * ll + 2.0 * (model.p + 1)
    return fitted, ll, aic


def fit_working_model(data: Dataset, candidates: Sequence[WorkingModel]) -> WorkingModelFit:
    """Fit each candidate on respondents and keep the smallest AIC."""
    if not candidates:
        raise ModelError("no working-model candidates")
    rows = []
    best = None
    for cand in candidates:
        fitted, ll, aic = fit_single_working_model(data, cand)
        rows.append((fitted.label, aic, ll, cand.p + 1))
        if best is None or aic < best[1]:
            best = (fitted, aic)
    return WorkingModelFit(np.asarray(best[0].gamma), best[0], rows)


def working_score(model: WorkingModel, data: Dataset) -> np.ndarray:
    """``sum_i r_i d log f1 / d gamma`` at the model's coefficients."""
    resp = data.respondents
    X = model.design(data.x[resp])
    y = data.y[resp]
    _, dmu = _MEAN_LINKS[model.link]
    eta = X @ np.asarray(model.gamma)
    mu = _MEAN_LINKS[model.link][0](eta)
    return X.T @ ((y - mu) * dmu(eta) / (model.psi * model.family.variance(mu)))


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetFunction:
    """``U(z)``: ``mean`` gives ``U = y``, ``tail`` gives ``U = I(y > a)``."""

    kind: str = "mean"
    a: float = 0.0

    def __post_init__(self):
        if self.kind not in ("mean", "tail"):
            raise ModelError("target kind must be 'mean' or 'tail'")

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "mean":
            return y
        return (y > self.a).astype(float)

    @classmethod
    def parse(cls, text: str) -> "TargetFunction":
        text = text.strip().lower()
        if text == "mean":
            return cls("mean")
        m = re.fullmatch(r"tail\(([^)]+)\)", text)
        if m:
            return cls("tail", float(m.group(1)))
        raise ModelError(f"unknown target {text!r}; use 'mean' or 'tail(a)'")


MEAN = TargetFunction("mean")


# ---------------------------------------------------------------------------
# Binary GLM (ignorable fits and starting values)
# ---------------------------------------------------------------------------


def fit_binary_glm(X: np.ndarray, r: np.ndarray, link: str = "logistic-odds",
                   opts: SolverOptions | None = None, start=None) -> RootResult:
    """Maximum likelihood for ``P(r = 1) = link(X beta)``.

    Fitted probabilities that reach the boundary signal (quasi-)separation
    and are reported as divergence instead of a spurious root.
    """
    lk = get_link(link)
    X = np.asarray(X, dtype=float)
    r = np.asarray(r, dtype=float)

    def score(beta):
        v = lk(X @ beta)
        w = r * v.d1 / v.pi - (1 - r) * v.d1 / v.comp
        return X.T @ w

    def jac(beta):
        v = lk(X @ beta)
        a = v.d1 / v.pi
        b = v.d1 / v.comp
        w = r * (v.d2 / v.pi - a * a) - (1 - r) * (v.d2 / v.comp + b * b)
        return (X * w[:, None]).T @ X

    x0 = np.zeros(X.shape[1]) if start is None else np.asarray(start, dtype=float)
    res = solve_system(score, x0, opts, jac=jac)
    if res.converged:
        v = lk(X @ res.x)
        if np.min(v.pi) < 1e-10 or np.min(v.comp) < 1e-10:
            res = RootResult(res.x, False, "divergence", res.iterations, res.residual, res.fun)
    return res


# ---------------------------------------------------------------------------
# Closed-form marginal response probability
# ---------------------------------------------------------------------------


def marginal_response_prob(response: ResponseModel, working: WorkingModel, x, phi=None) -> np.ndarray:
    """``P(R = 1 | x) = [E1{1/pi | x}]^{-1}`` in closed form.

    Needs the logistic-odds link with y entering linearly and an
    exponential-family ``f1``.
    """
    if response.link != "logistic-odds":
        raise ModelError("closed form unavailable; use quadrature")
    x = np.asarray(x, dtype=float)
    h = response.h(x, phi)
    slope = response.y_slope(x, phi)
    tau = working.natural(x)
    psi = working.psi
    b = working.family.b
    expo = h + (b(slope * psi + tau) - b(tau)) / psi
    return 1.0 / (1.0 + np.exp(np.clip(expo, -EXP_CLAMP, EXP_CLAMP)))


def warn_if_clamped(n_clamped: int, where: str = "") -> None:
    if n_clamped:
        warnings.warn(f"{n_clamped} response probabilities clamped to [1e-12, 1-1e-12]{where}",
                      BoundedBelowWarning, stacklevel=3)
