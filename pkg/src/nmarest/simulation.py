"""Scenario generators, missingness injectors and the Monte Carlo engine."""

from __future__ import annotations

import multiprocessing as mp
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.stats import norm

from .conditional_expectation import Discrete, NadarayaWatson, Parametric
from .core_model import (
    MEAN,
    Dataset,
    ResponseModel,
    TargetFunction,
    WorkingModel,
    fit_working_model,
    marginal_response_prob,
)
from .errors import EstimationNA, ModelError, NMARError
from .estimators import estimate_ck, estimate_mar, estimate_proposed, estimate_rki
from .solver import SolverOptions
from .variance_inference import confidence_interval, variance_sandwich

# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

RESPONSE_TERMS = "1, x1, y"


@dataclass(frozen=True)
class ScenarioSpec:
    """Data-generating law: covariates, normal ``f1`` and logistic-odds response.

    ``x_laws`` entries are ``"binary"`` (p = 0.5) or ``"uniform"`` on (-1, 1).
    ``mean`` is a working model with known coefficients describing
    ``mu(x) = E(Y | x, r = 1)``.
    """

    scenario: int | str
    n: int
    x_laws: tuple[str, ...]
    mean: WorkingModel
    phi: tuple[float, ...]
    sigma2: float = 1.0
    response_terms: str = RESPONSE_TERMS

    def __post_init__(self):
        if self.n < 1:
            raise ModelError("n must be >= 1")
        bad = [law for law in self.x_laws if law not in ("binary", "uniform")]
        if bad:
            raise ModelError(f"unknown covariate law {bad[0]!r}")
        if not self.sigma2 > 0:
            raise ModelError("sigma2 must be positive")
        if self.mean.gamma is None:
            raise ModelError("scenario mean needs coefficients")
        object.__setattr__(self, "phi", tuple(float(v) for v in self.phi))
        object.__setattr__(self, "mean", self.mean.with_fit(self.mean.gamma, self.sigma2))

    @property
    def response(self) -> ResponseModel:
        return ResponseModel.from_spec(self.response_terms, phi=self.phi)

    @property
    def phi_y(self) -> float:
        return self.phi[self.response.labels.index("y")]

    def with_n(self, n: int) -> "ScenarioSpec":
        return ScenarioSpec(self.scenario, n, self.x_laws, self.mean, self.phi, self.sigma2,
                            self.response_terms)


# mu1 = 0.5 I00 - 0.5 I01 - 0.5 I10 + I11 in the basis (1, x1, x2, x1 x2)
SCENARIO1_MEAN = WorkingModel.from_spec("1, x1, x2, x1*x2", "identity", gamma=(0.5, -1.0, -1.0, 2.5))
SCENARIO2_MEAN = WorkingModel.from_spec("1, x1, x2", "log", gamma=(-1.7, -0.4, 0.5))


def scenario(s: int, n: int) -> ScenarioSpec:
    if s == 1:
        return ScenarioSpec(1, n, ("binary", "binary"), SCENARIO1_MEAN, (-1.0, -0.5, 0.75))
    if s == 2:
        return ScenarioSpec(2, n, ("binary", "uniform"), SCENARIO2_MEAN, (-1.7, -0.4, 0.5))
    raise ModelError(f"unknown scenario {s!r}; use 1 or 2")


@dataclass(frozen=True)
class Truth:
    """Latent values withheld from the emitted dataset."""

    y: np.ndarray  # complete outcomes
    p_resp: np.ndarray  # P(R = 1 | x)


def _draw_x(spec: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    cols = []
    for law in spec.x_laws:
        if law == "binary":
            cols.append(rng.binomial(1, 0.5, spec.n).astype(float))
        else:
            cols.append(rng.uniform(-1.0, 1.0, spec.n))
    return np.column_stack(cols)


def generate_scenario(spec: ScenarioSpec, seed=None, rng: np.random.Generator | None = None):
    """Draw ``(x, r, y)``: ``r`` from the marginal rate, ``y`` from ``f1`` or the tilted ``f0``.

    Returns ``(Dataset, Truth)``; the dataset has ``y`` masked where ``r = 0``.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    x = _draw_x(spec, rng)
    response = spec.response
    p = marginal_response_prob(response, spec.mean, x)
    r = rng.random(spec.n) < p
    mu = spec.mean.mean(x)
    # f0 is the exponential tilt of f1: natural parameter shifted by phi_y * sigma2
    shift = response.y_slope(x) * spec.sigma2
    y = rng.normal(np.where(r, mu, mu + shift), np.sqrt(spec.sigma2))
    discrete = tuple(law == "binary" for law in spec.x_laws)
    data = Dataset(x, np.where(r, y, np.nan), r.astype(int), discrete=discrete)
    return data, Truth(y, p)


def true_theta(spec: ScenarioSpec, target: TargetFunction = MEAN) -> float:
    """``E U(Y)`` by enumeration over binary covariates and quadrature over uniform ones."""
    response = spec.response
    sd = np.sqrt(spec.sigma2)

    def cond(x):
        x = np.atleast_2d(x)
        p = marginal_response_prob(response, spec.mean, x)
        mu = spec.mean.mean(x)
        mu0 = mu + response.y_slope(x) * spec.sigma2
        if target.kind == "mean":
            m1, m0 = mu, mu0
        else:
            m1, m0 = norm.sf(target.a, mu, sd), norm.sf(target.a, mu0, sd)
        return float((p * m1 + (1 - p) * m0)[0])

    laws = spec.x_laws

    def integrate_from(k, prefix):
        if k == len(laws):
            return cond(np.array(prefix))
        if laws[k] == "binary":
            return 0.5 * (integrate_from(k + 1, prefix + [0.0]) + integrate_from(k + 1, prefix + [1.0]))
        val, _ = integrate.quad(lambda t: integrate_from(k + 1, prefix + [t]), -1.0, 1.0,
                                epsabs=1e-12, epsrel=1e-12)
        return 0.5 * val

    return integrate_from(0, [])


def population_response_rate(spec: ScenarioSpec) -> float:
    """``E P(R = 1 | X)`` under the scenario's covariate law."""
    laws = spec.x_laws
    response = spec.response

    def rec(k, prefix):
        if k == len(laws):
            return float(marginal_response_prob(response, spec.mean, np.array([prefix]))[0])
        if laws[k] == "binary":
            return 0.5 * (rec(k + 1, prefix + [0.0]) + rec(k + 1, prefix + [1.0]))
        return 0.5 * integrate.quad(lambda t: rec(k + 1, prefix + [t]), -1.0, 1.0)[0]

    return rec(0, [])


# ---------------------------------------------------------------------------
# Missingness mechanisms (standard orientation: larger index, larger pi)
# ---------------------------------------------------------------------------


def _expit(t):
    return 1.0 / (1.0 + np.exp(-t))


MECHANISMS: dict[str, tuple[str, Callable]] = {
    "M1": ("linear ignorable", lambda x1, y: _expit(4.93 - x1)),
    "M2": ("linear nonignorable", lambda x1, y: _expit(1.61 - 0.5 * x1 + 0.75 * y)),
    "M3": ("quadratic in x1", lambda x1, y: _expit(3.7 - 0.5 * x1 - 0.1 * x1 ** 2 + 0.6 * y)),
    "M4": ("jump", lambda x1, y: np.where(y <= 1.6, 0.5, 1.0)),
    "M5": ("quadratic in y", lambda x1, y: _expit(-0.22 + 0.1 * x1 + 0.1 * y + 0.2 * y ** 2)),
    "M6": ("probit", lambda x1, y: norm.cdf(0.71 - 0.25 * x1 + 0.5 * y)),
    "M7": ("complementary log-log", lambda x1, y: 1.0 - np.exp(-np.exp(-1.8 + 0.2 * x1 + 0.8 * y))),
    "M8": ("interaction", lambda x1, y: _expit(-0.2 - 0.1 * x1 + 0.2 * y + 0.2 * x1 * y)),
}


@dataclass(frozen=True)
class MissingnessMechanism:
    """A response probability ``pi(x1, y)``; ``id`` is M1..M8 or ``custom``."""

    id: str
    fn: Callable
    description: str = ""

    @classmethod
    def get(cls, name: str) -> "MissingnessMechanism":
        key = name.strip().upper()
        if key in MECHANISMS:
            desc, fn = MECHANISMS[key]
            return cls(key, fn, desc)
        return cls.custom(name)

    @classmethod
    def custom(cls, expression: str) -> "MissingnessMechanism":
        """Expression in ``x1``, ``y`` and numpy functions, e.g. ``expit(1 + 0.5*y)``."""
        env = {"np": np, "exp": np.exp, "log": np.log, "sqrt": np.sqrt, "expit": _expit,
               "Phi": norm.cdf, "where": np.where, "__builtins__": {}}
        try:
            code = compile(expression, "<mechanism>", "eval")
        except SyntaxError as e:
            raise ModelError(f"cannot parse mechanism {expression!r}: {e.msg}") from None

        def fn(x1, y):
            return np.broadcast_to(np.asarray(eval(code, env, {"x1": x1, "y": y}), dtype=float), np.shape(y))

        return cls("custom", fn, expression)

    def prob(self, x1, y) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(x1, dtype=float), np.asarray(y, dtype=float)), dtype=float)


def inject_missingness(data: Dataset, mechanism: MissingnessMechanism | str, seed=None,
                       rng: np.random.Generator | None = None) -> Dataset:
    """Mask ``y`` by Bernoulli draws with probability ``pi(x1, y)``; needs complete ``y``."""
    if isinstance(mechanism, str):
        mechanism = MissingnessMechanism.get(mechanism)
    if data.has_nonresponse():
        raise ModelError("inject_missingness needs complete data (y observed on every row)")
    rng = rng if rng is not None else np.random.default_rng(seed)
    p = mechanism.prob(data.x[:, 0], data.y)
    bad = np.flatnonzero(~((p >= 0) & (p <= 1)))
    if bad.size:
        i = int(bad[0])
        raise ModelError(f"mechanism probability {p[i]!r} outside [0, 1] at row {i + 1}")
    r = rng.random(data.n) < p
    return Dataset(data.x, np.where(r, data.y, np.nan), r.astype(int), discrete=data.discrete,
                   names=data.names)


# ---------------------------------------------------------------------------
# KLIPS-like complete data
# ---------------------------------------------------------------------------


def klips_like(n: int = 2506, seed=None, rng: np.random.Generator | None = None) -> Dataset:
    """Synthetic stand-in for an income panel: complete data, no missingness.

    Columns: x1 age / 10 (N(3.7, 1.2) clipped to [2, 8]), x2 previous income
    (gamma, mean 1.5), x3 gender (binary), x4 education level (1..4).
    ``y`` is current income with mean about 1.63; rows with ``|y - mean|``
    beyond 6 SD are dropped.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    m = int(n * 1.01) + 10
    x1 = np.clip(rng.normal(3.7, 1.2, m), 2.0, 8.0)
    x2 = rng.gamma(4.0, 1.5 / 4.0, m)
    x3 = rng.binomial(1, 0.5, m).astype(float)
    x4 = rng.integers(1, 5, m).astype(float)
    y = 0.25 + 0.8 * x2 + 0.1 * x3 + 0.05 * x4 - 0.02 * (x1 - 4.0) + rng.normal(0.0, 0.4, m)
    keep = np.abs(y - y.mean()) <= 6 * y.std()
    X = np.column_stack([x1, x2, x3, x4])[keep][:n]
    y = y[keep][:n]
    return Dataset(X, y, np.ones(y.size, dtype=int), discrete=(False, False, True, True),
                   names=("x1", "x2", "x3", "x4"))


# ---------------------------------------------------------------------------
# Estimator lanes for the Monte Carlo engine
# ---------------------------------------------------------------------------

S2_CANDIDATES = (
    "1, x1, x2",
    "1, x1, x2, x2^2",
    "1, x1, x2, x1*x2",
    "1, x1, x2, x2^2, x1*x2",
)


@dataclass(frozen=True)
class Record:
    estimator: str
    phi_y: float
    theta: float
    se: float
    ci: tuple  # ((lo, hi), ...) aligned with alphas
    na: bool
    reason: str = ""


def _backend_for(name: str, spec: ScenarioSpec, data: Dataset):
    if name in ("rki", "new", "nm"):
        if spec.scenario == 1 or all(data.discrete):
            return Discrete()
        cands = [WorkingModel.from_spec(t, "identity") for t in S2_CANDIDATES]
        return Parametric(fit_working_model(data, cands).model)
    if name == "nt":
        from .core_model import fit_single_working_model

        fitted, _, _ = fit_single_working_model(data, WorkingModel.from_spec(spec.mean.terms, spec.mean.link))
        return Parametric(fitted)
    if name == "nnp":
        if all(data.discrete):
            return Discrete()
        return NadarayaWatson()
    raise ModelError(f"no backend for estimator {name!r}")


ESTIMATOR_NAMES = ("mar", "ck", "rki", "new", "nm", "nt", "nnp", "oracle")
_WITH_VARIANCE = ("new", "nm", "nt", "nnp")


def run_estimator(name: str, spec: ScenarioSpec, data: Dataset, truth: Truth, alphas,
                  opts: SolverOptions | None = None, kappa_method: str = "optimal") -> Record:
    """One estimator on one replicate; never raises for estimator failure."""
    response = spec.response
    iy = response.labels.index("y")
    nan_ci = tuple((np.nan, np.nan) for _ in alphas)
    if name == "oracle":
        y = truth.y
        V = float(np.var(y))
        th = float(np.mean(y))
        return Record(name, np.nan, th, float(np.sqrt(V / y.size)),
                      tuple(confidence_interval(th, V, y.size, a) for a in alphas), False)
    try:
        if name == "mar":
            res = estimate_mar(data, opts=opts)
            return Record(name, np.nan, res.theta, np.nan, nan_ci, res.is_na, res.na_reason or "")
        if name == "ck":
            res = estimate_ck(data, response, opts=opts)
        else:
            backend = _backend_for(name, spec, data)
            if name == "rki":
                res = estimate_rki(data, response, backend, opts=opts)
            else:
                res = estimate_proposed(data, response, backend, opts=opts)
        if res.is_na:
            return Record(name, np.nan, np.nan, np.nan, nan_ci, True, res.na_reason or "")
        se, ci = np.nan, nan_ci
        if name in _WITH_VARIANCE:
            ve = variance_sandwich(data, response, res.theta, res.phi, backend, method=kappa_method,
                                   alphas=tuple(alphas))
            se, ci = ve.se, tuple(ve.ci[a] for a in alphas)
        return Record(name, float(res.phi[iy]), res.theta, se, ci, False)
    except (EstimationNA, NMARError, np.linalg.LinAlgError, FloatingPointError) as e:
        return Record(name, np.nan, np.nan, np.nan, nan_ci, True, getattr(e, "reason", str(e)))


# ---------------------------------------------------------------------------
# Monte Carlo engine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MonteCarloSummary:
    spec: ScenarioSpec
    estimators: tuple[str, ...]
    alphas: tuple[float, ...]
    replicates: int
    true_theta: float
    true_phi_y: float
    mean_response_rate: float
    records: list  # per replicate: list[Record]
    rates: np.ndarray

    def values(self, estimator: str, parameter: str = "theta") -> np.ndarray:
        k = self.estimators.index(estimator)
        attr = "theta" if parameter == "theta" else "phi_y"
        return np.array([getattr(rep[k], attr) for rep in self.records], dtype=float)

    def na_count(self, estimator: str) -> int:
        k = self.estimators.index(estimator)
        return int(sum(rep[k].na for rep in self.records))

    def table(self) -> list[dict]:
        """One row per (estimator, parameter): bias, S.E., #NA, coverage."""
        rows = []
        for k, name in enumerate(self.estimators):
            for param, truth in (("phi2", self.true_phi_y), ("theta", self.true_theta)):
                vals = self.values(name, "theta" if param == "theta" else "phi")
                ok = np.isfinite(vals)
                n_ok = int(ok.sum())
                bias = float(np.mean(vals[ok]) - truth) if n_ok else np.nan
                sd = float(np.std(vals[ok], ddof=1)) if n_ok > 1 else np.nan
                row = {"estimator": name, "parameter": param, "bias": bias, "se": sd,
                       "n_na": self.na_count(name), "replicates": self.replicates,
                       "truth": truth, "mean_response_rate": self.mean_response_rate}
                for j, a in enumerate(self.alphas):
                    cov = np.nan
                    if param == "theta":
                        hits = [rep[k].ci[j][0] <= truth <= rep[k].ci[j][1]
                                for rep in self.records if np.isfinite(rep[k].ci[j][0])]
                        if hits:
                            cov = 100.0 * float(np.mean(hits))
                    row[f"coverage_{a:g}"] = cov
                rows.append(row)
        return rows

    def mean_se(self, estimator: str) -> float:
        k = self.estimators.index(estimator)
        se = np.array([rep[k].se for rep in self.records], dtype=float)
        return float(np.nanmean(se)) if np.any(np.isfinite(se)) else np.nan


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Substream keyed by ``(seed, index)``, independent of scheduling."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


# shared with forked workers so only replicate indices cross the process boundary
_JOB: tuple | None = None


def _one_replicate(idx):
    spec, estimators, alphas, seed, opts, kappa_method = _JOB
    rng = replicate_rng(seed, idx)
    data, truth = generate_scenario(spec, rng=rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        recs = [run_estimator(e, spec, data, truth, alphas, opts, kappa_method) for e in estimators]
    return idx, data.response_rate, recs


def run_monte_carlo(spec: ScenarioSpec, estimators: Sequence[str], replicates: int,
                    alphas: Sequence[float] = (0.05,), workers: int = 1, seed: int = 0,
                    opts: SolverOptions | None = None, kappa_method: str = "optimal",
                    progress: Callable[[int], None] | None = None) -> MonteCarloSummary:
    """Independent seeded replicates; results do not depend on ``workers``."""
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    estimators = tuple(e.lower() for e in estimators)
    unknown = [e for e in estimators if e not in ESTIMATOR_NAMES]
    if unknown:
        raise ModelError(f"unknown estimator {unknown[0]!r}; choose from {', '.join(ESTIMATOR_NAMES)}")
    alphas = tuple(float(a) for a in alphas)
    global _JOB
    _JOB = (spec, estimators, alphas, seed, opts, kappa_method)
    out = [None] * replicates
    rates = np.empty(replicates)
    if workers <= 1:
        it = map(_one_replicate, range(replicates))
        pool = None
    else:
        pool = mp.get_context("fork").Pool(workers)
        it = pool.imap_unordered(_one_replicate, range(replicates),
                                 chunksize=max(1, replicates // (workers * 8)))
    try:
        for done, (idx, rate, recs) in enumerate(it, 1):
            out[idx] = recs
            rates[idx] = rate
            if progress:
                progress(done)
    finally:
        if pool is not None:
            pool.close()
            pool.join()
        _JOB = None
    return MonteCarloSummary(spec, estimators, alphas, replicates, true_theta(spec), spec.phi_y,
                             float(np.mean(rates)), out, rates)
