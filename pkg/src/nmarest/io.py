"""CSV serialization of datasets, estimates and Monte Carlo summaries, plus text tables.

Dataset CSV: one column per covariate (header gives its name), then ``y``
(blank when missing) and ``r`` (0/1).  Floats are written with ``repr`` so a
write/read cycle is exact.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core_model import Dataset
from .errors import NMARError

MISSING = ""
NA = "NA"


class ParseError(NMARError, ValueError):
    """Malformed input file; the message names the line and column."""


def fmt(v) -> str:
    """Exact float text; NaN becomes ``NA``."""
    if v is None:
        return NA
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return NA if math.isnan(v) else repr(v)


def parse_float(text: str) -> float:
    text = text.strip()
    return math.nan if text in (NA, "nan") else float(text)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def write_dataset(path, data: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(data.names) + ["y", "r"])
        for i in range(data.n):
            y = MISSING if data.r[i] == 0 else repr(float(data.y[i]))
            w.writerow([repr(float(v)) for v in data.x[i]] + [y, int(data.r[i])])


def read_dataset(path, discrete: Sequence[str] | None = None,
                 instrument: Sequence[str] = ()) -> Dataset:
    """Read a dataset CSV.

    ``discrete`` lists covariate names to treat as discrete (default:
    auto-detect integer columns with at most 10 levels).  A missing ``r``
    column is inferred from which ``y`` are present.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: line 1: empty file")
    header = [h.strip() for h in rows[0]]
    if "y" not in header:
        raise ParseError(f"{path}: line 1: header has no 'y' column")
    iy = header.index("y")
    ir = header.index("r") if "r" in header else None
    xcols = [k for k, h in enumerate(header) if k not in (iy, ir)]
    if not xcols:
        raise ParseError(f"{path}: line 1: no covariate columns")
    names = [header[k] for k in xcols]
    x = np.empty((len(rows) - 1, len(xcols)))
    y = np.full(len(rows) - 1, np.nan)
    r = np.empty(len(rows) - 1, dtype=int)
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != len(header):
            raise ParseError(f"{path}: line {line}: expected {len(header)} fields, got {len(row)}")
        for j, k in enumerate(xcols):
            try:
                x[i, j] = float(row[k])
            except ValueError:
                raise ParseError(f"{path}: line {line}, column {k + 1} ({header[k]}): "
                                 f"cannot parse {row[k]!r} as a number") from None
        ytext = row[iy].strip()
        if ytext not in (MISSING, NA):
            try:
                y[i] = float(ytext)
            except ValueError:
                raise ParseError(f"{path}: line {line}, column {iy + 1} (y): "
                                 f"cannot parse {ytext!r} as a number") from None
        if ir is None:
            r[i] = int(np.isfinite(y[i]))
        else:
            rtext = row[ir].strip()
            if rtext not in ("0", "1"):
                raise ParseError(f"{path}: line {line}, column {ir + 1} (r): must be 0 or 1, got {rtext!r}")
            r[i] = int(rtext)
        if (r[i] == 1) != bool(np.isfinite(y[i])):
            what = "missing y on a respondent row" if r[i] == 1 else "y present on a nonrespondent row"
            raise ParseError(f"{path}: line {line} (data row {i + 1}): {what}")
    flags = ()
    if discrete is not None:
        unknown = [c for c in discrete if c not in names]
        if unknown:
            raise ParseError(f"unknown discrete column {unknown[0]!r}; columns are {', '.join(names)}")
        flags = tuple(c in discrete for c in names)
    inst = tuple(names.index(c) for c in instrument if c in names)
    return Dataset(x, y, r, discrete=flags, instrument=inst, names=tuple(names))


# ---------------------------------------------------------------------------
# Generic record tables
# ---------------------------------------------------------------------------


def write_rows(path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([row[c] if isinstance(row[c], str) else fmt(row[c]) for c in columns])


def read_rows(path) -> list[dict]:
    """Read a CSV back into dicts; numeric fields become floats (``NA`` to NaN)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for row in reader:
            conv = {}
            for k, v in row.items():
                try:
                    conv[k] = parse_float(v)
                except ValueError:
                    conv[k] = v
            out.append(conv)
        return out


# ---------------------------------------------------------------------------
# Monte Carlo output
# ---------------------------------------------------------------------------


def replicate_rows(summary) -> list[dict]:
    rows = []
    for i, recs in enumerate(summary.records):
        for rec in recs:
            row = {"replicate": i, "estimator": rec.estimator, "phi2": rec.phi_y, "theta": rec.theta,
                   "se": rec.se}
            for a, (lo, hi) in zip(summary.alphas, rec.ci):
                row[f"ci_lo_{a:g}"] = lo
                row[f"ci_hi_{a:g}"] = hi
            row["na"] = int(rec.na)
            row["reason"] = rec.reason or ""
            rows.append(row)
    return rows


def write_monte_carlo(outdir, summary) -> dict[str, Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {"replicates": outdir / "replicates.csv", "summary": outdir / "summary.csv",
             "table": outdir / "table.txt"}
    write_rows(paths["replicates"], replicate_rows(summary))
    write_rows(paths["summary"], summary.table())
    paths["table"].write_text(format_summary(summary.table(), title=f"Scenario {summary.spec.scenario}, "
                                             f"n = {summary.spec.n}, {summary.replicates} replicates"))
    return paths


def _scaled(v, scale, digits=0):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return NA
    return f"{v * scale:.{digits}f}"


def format_summary(rows: Iterable[dict], title: str = "") -> str:
    """Bias and S.E. x1000, coverage in percent, #NA as counts."""
    rows = list(rows)
    estimators = list(dict.fromkeys(r["estimator"] for r in rows))
    cov_keys = [k for k in (rows[0].keys() if rows else []) if k.startswith("coverage_")]
    width = max(8, max((len(e) for e in estimators), default=0) + 2)
    lines = []
    if title:
        lines.append(title)
    lines.append("Bias and S.E. x1000; coverage x100")
    lines.append("Parameter".ljust(12) + "".ljust(8) + "".join(e.upper().rjust(width) for e in estimators))
    for param in ("phi2", "theta"):
        sub = {r["estimator"]: r for r in rows if r["parameter"] == param}
        label = "phi2" if param == "phi2" else "theta"
        lines.append(label.ljust(12) + "Bias".ljust(8) + "".join(
            _scaled(sub[e]["bias"], 1000).rjust(width) for e in estimators))
        lines.append("".ljust(12) + "S.E.".ljust(8) + "".join(
            _scaled(sub[e]["se"], 1000).rjust(width) for e in estimators))
        if param == "theta":
            for ck in cov_keys:
                lines.append("".ljust(12) + f"Cov{ck.split('_', 1)[1]}".ljust(8) + "".join(
                    _scaled(sub[e][ck], 1, 2).rjust(width) for e in estimators))
    na = {r["estimator"]: r["n_na"] for r in rows if r["parameter"] == "theta"}
    lines.append("#NA".ljust(20) + "".join(str(int(na[e])).rjust(width) for e in estimators))
    if rows:
        truth = next(r["truth"] for r in rows if r["parameter"] == "theta")
        lines.append(f"mean response rate {rows[0]['mean_response_rate']:.4f}; true theta {truth:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Single-dataset estimates
# ---------------------------------------------------------------------------


def estimate_rows(result, labels, variance=None, alphas=()) -> list[dict]:
    rows = [{"quantity": f"phi[{lab}]", "value": float(v)} for lab, v in zip(labels, result.phi)]
    rows.append({"quantity": "theta", "value": result.theta})
    rows.append({"quantity": "converged", "value": int(result.converged)})
    rows.append({"quantity": "na_reason", "value": result.na_reason or ""})
    rows.append({"quantity": "iterations", "value": result.iterations})
    rows.append({"quantity": "residual", "value": result.residual})
    rows.append({"quantity": "backend", "value": result.backend})
    if variance is not None:
        rows.append({"quantity": "V", "value": variance.V})
        rows.append({"quantity": "se", "value": variance.se})
        for a in alphas:
            lo, hi = variance.ci[a]
            rows.append({"quantity": f"ci_lo_{a:g}", "value": lo})
            rows.append({"quantity": f"ci_hi_{a:g}", "value": hi})
    return rows
