"""Command line: ``nmarest {simulate, estimate, inject, report}``.

Options come from flags, then an INI ``--config`` file (section
``[nmarest]`` or one named after the subcommand), then built-in defaults.
The effective configuration is written to the output directory.
Exit codes: 0 ok (an NA estimate is a result), 1 compute failure, 2 usage.
"""

from __future__ import annotations

import argparse
import configparser
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io
from .conditional_expectation import ClosedFormExpFam, Discrete, NadarayaWatson, Parametric
from .core_model import (
    LINKS,
    ResponseModel,
    TargetFunction,
    WorkingModel,
    fit_working_model,
    parse_terms,
    x_design,
)
from .errors import ModelError, NMARError
from .estimators import estimate_ck, estimate_mar, estimate_proposed, estimate_rki
from .simulation import ESTIMATOR_NAMES, MECHANISMS, MissingnessMechanism, inject_missingness, run_monte_carlo, scenario
from .solver import SolverOptions
from .variance_inference import variance_sandwich

EXIT_OK, EXIT_COMPUTE, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "simulate": {
        "scenario": "1", "n": "2000", "reps": "100", "estimators": "mar,ck,rki,new", "seed": "20240101",
        "workers": "1", "alpha": "0.05", "out": "nmarest-out", "kappa": "optimal",
        "tol": "1e-9", "max_iter": "50", "jacobian": "analytic",
    },
    "estimate": {
        "data": None, "response": "1, x1, y", "link": "logistic-odds", "estimator": "proposed",
        "backend": "parametric", "working": "1, x1", "working_link": "identity", "target": "mean",
        "kernel_order": "2", "bandwidth_multiplier": "1.0", "undersmooth": "false", "discrete": None,
        "ck_g": None, "alpha": "0.05", "out": "nmarest-out", "kappa": "optimal",
        "tol": "1e-9", "max_iter": "50", "jacobian": "analytic",
    },
    "inject": {"data": None, "mechanism": None, "seed": "20240101", "out": None},
    "report": {"summary": None},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Parser and configuration
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nmarest", description="Estimation under nonignorable nonresponse.")
    p.add_argument("--config", help="INI file with defaults for any option")
    sub = p.add_subparsers(dest="command", required=True)

    def solver_flags(sp):
        sp.add_argument("--tol", help="Newton tolerance on the max-abs residual")
        sp.add_argument("--max-iter", dest="max_iter", help="Newton iteration cap")
        sp.add_argument("--jacobian", choices=("analytic", "fd"))
        sp.add_argument("--kappa", choices=("optimal", "plugin"), help="kappa estimator for the variance")
        sp.add_argument("--alpha", help="comma-separated significance levels")
        sp.add_argument("--out", help="output directory")

    s = sub.add_parser("simulate", help="Monte Carlo study of a built-in scenario")
    s.add_argument("--scenario", choices=("1", "2"))
    s.add_argument("--n", help="sample size")
    s.add_argument("--reps", help="number of replicates")
    s.add_argument("--estimators", help=f"comma list from {','.join(ESTIMATOR_NAMES)}")
    s.add_argument("--seed", help="master seed")
    s.add_argument("--workers", help="worker processes")
    solver_flags(s)

    e = sub.add_parser("estimate", help="estimate phi and theta on a dataset CSV")
    e.add_argument("--data", help="dataset CSV (columns x..., y, r)")
    e.add_argument("--response", help="response basis, e.g. '1, x1, y'")
    e.add_argument("--link", choices=tuple(LINKS))
    e.add_argument("--estimator", choices=("proposed", "rki", "ck", "mar"))
    e.add_argument("--backend", choices=("parametric", "closed-form", "discrete", "nw"))
    e.add_argument("--working", help="working-model mean bases separated by ';' (AIC choice)")
    e.add_argument("--working-link", dest="working_link", choices=("identity", "log"))
    e.add_argument("--target", help="'mean' or 'tail(a)'")
    e.add_argument("--kernel-order", dest="kernel_order", choices=("2", "4"))
    e.add_argument("--bandwidth-multiplier", dest="bandwidth_multiplier")
    e.add_argument("--undersmooth", choices=("true", "false"))
    e.add_argument("--discrete", help="comma list of covariates treated as discrete")
    e.add_argument("--ck-g", dest="ck_g", help="CK calibration basis (default 1 plus every covariate)")
    solver_flags(e)

    i = sub.add_parser("inject", help="mask y of a complete dataset with a mechanism M1..M8")
    i.add_argument("--data")
    i.add_argument("--mechanism", help=f"one of {', '.join(MECHANISMS)} or an expression in x1, y")
    i.add_argument("--seed")
    i.add_argument("--out", help="output CSV path")

    r = sub.add_parser("report", help="render a summary CSV as a text table")
    r.add_argument("--summary", help="summary.csv from simulate")
    return p


def effective_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        cp = configparser.ConfigParser()
        if not cp.read(args.config):
            raise UsageError(f"config: cannot read {args.config}")
        for section in ("nmarest", args.command):
            if cp.has_section(section):
                for k, v in cp.items(section):
                    key = k.replace("-", "_")
                    if key not in cfg:
                        raise UsageError(f"config: unknown key {k!r} for {args.command}")
                    cfg[key] = v
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _int(cfg, key, lo=None):
    try:
        v = int(cfg[key])
    except (TypeError, ValueError):
        raise UsageError(f"{key}: expected an integer, got {cfg[key]!r}") from None
    if lo is not None and v < lo:
        raise UsageError(f"{key}: must be >= {lo}, got {v}")
    return v


def _float(cfg, key, positive=False):
    try:
        v = float(cfg[key])
    except (TypeError, ValueError):
        raise UsageError(f"{key}: expected a number, got {cfg[key]!r}") from None
    if positive and not v > 0:
        raise UsageError(f"{key}: must be positive, got {v}")
    return v


def _alphas(cfg):
    try:
        vals = tuple(float(a) for a in str(cfg["alpha"]).split(",") if a.strip())
    except ValueError:
        raise UsageError(f"alpha: expected comma-separated numbers, got {cfg['alpha']!r}") from None
    if not vals or any(not 0 < a < 1 for a in vals):
        raise UsageError("alpha: every level must lie in (0, 1)")
    return vals


def _required(cfg, key):
    if not cfg.get(key):
        raise UsageError(f"{key}: required")
    return cfg[key]


def _solver(cfg) -> SolverOptions:
    tol = _float(cfg, "tol", positive=True)
    max_iter = _int(cfg, "max_iter", lo=1)
    if cfg["jacobian"] not in ("analytic", "fd"):
        raise UsageError("jacobian: must be 'analytic' or 'fd'")
    if cfg["kappa"] not in ("optimal", "plugin"):
        raise UsageError("kappa: must be 'optimal' or 'plugin'")
    return SolverOptions(tol=tol, max_iter=max_iter, jacobian=cfg["jacobian"])


def _echo_config(outdir: Path, command: str, cfg: dict) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    cp = configparser.ConfigParser()
    cp[command] = {k: "" if v is None else str(v) for k, v in cfg.items()}
    with open(outdir / "effective_config.ini", "w") as fh:
        cp.write(fh)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cli_simulate(cfg: dict, stdout=None) -> int:
    stdout = stdout or sys.stdout
    s = _int(cfg, "scenario")
    if s not in (1, 2):
        raise UsageError("scenario: must be 1 or 2")
    n = _int(cfg, "n", lo=1)
    reps = _int(cfg, "reps", lo=1)
    seed = _int(cfg, "seed", lo=0)
    workers = _int(cfg, "workers", lo=1)
    alphas = _alphas(cfg)
    opts = _solver(cfg)
    ests = [e.strip().lower() for e in cfg["estimators"].split(",") if e.strip()]
    bad = [e for e in ests if e not in ESTIMATOR_NAMES]
    if bad or not ests:
        raise UsageError(f"estimators: unknown {bad[0] if bad else '(none)'!r}; choose from {','.join(ESTIMATOR_NAMES)}")
    outdir = Path(cfg["out"])
    _echo_config(outdir, "simulate", cfg)
    summary = run_monte_carlo(scenario(s, n), ests, reps, alphas, workers=workers, seed=seed, opts=opts,
                              kappa_method=cfg["kappa"])
    paths = io.write_monte_carlo(outdir, summary)
    stdout.write(paths["table"].read_text())
    return EXIT_OK


def _backend(cfg, data):
    name = cfg["backend"]
    if name == "discrete":
        return Discrete(), None
    if name == "nw":
        mult = _float(cfg, "bandwidth_multiplier", positive=True)
        order = _int(cfg, "kernel_order")
        if order not in (2, 4):
            raise UsageError("kernel_order: must be 2 or 4")
        return NadarayaWatson(order=order, multiplier=mult,
                              undersmooth=str(cfg["undersmooth"]).lower() == "true"), None
    if cfg["working_link"] not in ("identity", "log"):
        raise UsageError("working_link: must be 'identity' or 'log'")
    try:
        cands = [WorkingModel.from_spec(t, cfg["working_link"]) for t in cfg["working"].split(";") if t.strip()]
    except ModelError as e:
        raise UsageError(f"working: {e}") from None
    fit = fit_working_model(data, cands)
    backend = Parametric(fit.model) if name == "parametric" else ClosedFormExpFam(fit.model)
    return backend, fit


def cli_estimate(cfg: dict, stdout=None) -> int:
    stdout = stdout or sys.stdout
    path = _required(cfg, "data")
    if not Path(path).is_file():
        raise UsageError(f"data: no such file {path}")
    alphas = _alphas(cfg)
    opts = _solver(cfg)
    try:
        target = TargetFunction.parse(cfg["target"])
        response = ResponseModel.from_spec(cfg["response"], link=cfg["link"])
    except ModelError as e:
        raise UsageError(str(e)) from None
    discrete = [c.strip() for c in cfg["discrete"].split(",")] if cfg.get("discrete") else None
    try:
        data = io.read_dataset(path, discrete=discrete)
    except io.ParseError as e:
        raise UsageError(str(e)) from None
    outdir = Path(cfg["out"])
    _echo_config(outdir, "estimate", cfg)
    lines = [f"data: {path} (n = {data.n}, respondents = {data.n_r}, rate = {data.response_rate:.4f})"]

    if data.n_r == data.n:
        theta = float(np.mean(target(data.y)))
        lines.append(f"no nonresponse; theta-hat = sample mean = {theta!r}; phi not estimated")
        io.write_rows(outdir / "estimate.csv", [{"quantity": "theta", "value": theta},
                                                 {"quantity": "na_reason", "value": "no nonresponse"}])
        stdout.write("\n".join(lines) + "\n")
        return EXIT_OK

    est = cfg["estimator"]
    fit = None
    variance = None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if est == "mar":
            res = estimate_mar(data, target, opts)
            labels = ["1"] + list(data.names)
        elif est == "ck":
            labels = list(response.labels)
            g_fn = None
            if cfg.get("ck_g"):
                terms = parse_terms(cfg["ck_g"])

                def g_fn(x):
                    return x_design(terms, x)
            res = estimate_ck(data, response, target, g_fn, opts)
        else:
            labels = list(response.labels)
            backend, fit = _backend(cfg, data)
            if est == "rki":
                res = estimate_rki(data, response, backend, target, opts)
            else:
                res = estimate_proposed(data, response, backend, target, opts)
                if res.converged:
                    method = "plugin" if isinstance(backend, ClosedFormExpFam) else cfg["kappa"]
                    variance = variance_sandwich(data, response, res.theta, res.phi, backend, target,
                                                 method=method, alphas=alphas)
    if fit is not None:
        lines.append("working-model candidates (AIC):")
        for label, aic, ll, k in fit.aic_table:
            mark = "*" if label == fit.model.label else " "
            lines.append(f"  {mark} {label}: AIC = {aic:.3f} (loglik {ll:.3f}, {k} parameters)")
        io.write_rows(outdir / "aic.csv", [{"model": a, "aic": b, "loglik": c, "n_params": d}
                                           for a, b, c, d in fit.aic_table])
    lines.append(f"estimator: {est} [{res.backend}]")
    if not res.converged:
        lines.append(f"NA: {res.na_reason}")
    else:
        for lab, v in zip(labels, res.phi):
            lines.append(f"  phi[{lab}] = {v:.6f}")
        lines.append(f"  theta = {res.theta:.6f}")
        if variance is not None:
            lines.append(f"  SE = {variance.se:.6f}")
            for a in alphas:
                lo, hi = variance.ci[a]
                lines.append(f"  {100 * (1 - a):g}% CI = ({lo:.6f}, {hi:.6f})")
    for w in caught:
        lines.append(f"warning: {w.message}")
    io.write_rows(outdir / "estimate.csv", io.estimate_rows(res, labels, variance, alphas))
    stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def cli_inject(cfg: dict, stdout=None) -> int:
    stdout = stdout or sys.stdout
    path = _required(cfg, "data")
    mech = _required(cfg, "mechanism")
    out = _required(cfg, "out")
    seed = _int(cfg, "seed", lo=0)
    if mech.strip().upper() not in MECHANISMS and not any(ch in mech for ch in "()+-*/"):
        raise UsageError(f"mechanism: unknown id {mech!r}; valid ids are {', '.join(MECHANISMS)}")
    try:
        mechanism = MissingnessMechanism.get(mech)
        data = io.read_dataset(path)
    except (ModelError, io.ParseError) as e:
        raise UsageError(str(e)) from None
    masked = inject_missingness(data, mechanism, seed=seed)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    io.write_dataset(out, masked)
    stdout.write(f"{mechanism.id}: wrote {out} (response rate {masked.response_rate:.4f})\n")
    return EXIT_OK


def cli_report(cfg: dict, stdout=None) -> int:
    stdout = stdout or sys.stdout
    path = _required(cfg, "summary")
    if not Path(path).is_file():
        raise UsageError(f"summary: no such file {path}")
    stdout.write(io.format_summary(io.read_rows(path)))
    return EXIT_OK


COMMANDS = {"simulate": cli_simulate, "estimate": cli_estimate, "inject": cli_inject, "report": cli_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        cfg = effective_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as e:
        sys.stderr.write(f"nmarest {args.command}: {e}\n")
        return EXIT_USAGE
    except (NMARError, ValueError, np.linalg.LinAlgError, OSError) as e:
        sys.stderr.write(f"nmarest {args.command}: error: {e}\n")
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
