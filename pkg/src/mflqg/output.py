"""Deterministic writers: JSON and CSV with 17 significant digits, plot data."""
from __future__ import annotations

import json
import math
import os

import numpy as np

from .errors import ScenarioIOError, ValidationError


def _norm(obj):
    if isinstance(obj, dict):
        return {str(k): _norm(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_norm(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _norm(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _Float(float(obj))
    return obj


class _Float(float):
    def __repr__(self):
        v = float(self)
        if math.isnan(v):
            return '"nan"'
        if math.isinf(v):
            return '"inf"' if v > 0 else '"-inf"'
        return format(v, ".17g")


def _iter(o, depth):
    pad = "  " * (depth + 1)
    end = "  " * depth
    if isinstance(o, dict):
        if not o:
            yield "{}"
            return
        yield "{\n"
        items = sorted(o.items())
        for i, (k, v) in enumerate(items):
            yield pad + json.dumps(k) + ": "
            yield from _iter(v, depth + 1)
            yield ",\n" if i < len(items) - 1 else "\n"
        yield end + "}"
    elif isinstance(o, list):
        if not o:
            yield "[]"
            return
        yield "[\n"
        for i, v in enumerate(o):
            yield pad
            yield from _iter(v, depth + 1)
            yield ",\n" if i < len(o) - 1 else "\n"
        yield end + "]"
    elif isinstance(o, _Float):
        yield repr(o)
    else:
        yield json.dumps(o)


def dumps(obj) -> str:
    """JSON text with sorted keys and floats printed to 17 significant digits."""
    return "".join(_iter(_norm(obj), 0)) + "\n"


def write_json(path: str, obj) -> str:
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(dumps(obj))
    except OSError as exc:
        raise ScenarioIOError(f"cannot write {path}: {exc}") from exc
    return path


def fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: str, header, rows) -> str:
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(fmt(v) for v in row) + "\n")
    except OSError as exc:
        raise ScenarioIOError(f"cannot write {path}: {exc}") from exc
    return path


PLOT_SCRIPT = """set datafile separator ","
set logscale xy
set xlabel "N"
set key top right
set terminal pngcairo size 900,400
set output "convergence.png"
set multiplot layout 1,2
set title "mean-field error"
plot "mf_error.dat" using 1:2 skip 1 with linespoints title "E sup |xbar - xhat|^2"
set title "per-capita cost gap"
plot "cost_gap.dat" using 1:2 skip 1 with linespoints title "|cost(N) - cost(Nmax)|"
unset multiplot
"""


def emit_plot_data(result, directory: str) -> list:
    """Write mf_error.dat, cost_gap.dat (comma-separated, fixed headers) and plot.gp.

    Both data files list N against the quantity and its standard error. The
    gap file omits the reference N, whose gap is zero by construction."""
    per = list(getattr(result, "per_N", []) or [])
    if not per:
        raise ValidationError("plot data needs a nonempty N sweep")
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise ScenarioIOError(f"cannot create {directory}: {exc}") from exc
    Nref = per[-1]["N"]
    files = [
        write_csv(os.path.join(directory, "mf_error.dat"), ["N", "mf_error_sup_sq", "se"],
                  [(e["N"], e["mf_error_sup_sq"], e["mf_error_sup_sq_se"]) for e in per]),
        write_csv(os.path.join(directory, "cost_gap.dat"), ["N", "cost_gap", "se"],
                  [(e["N"], e["cost_gap"], e["cost_gap_se"]) for e in per if e["N"] != Nref]),
    ]
    gp = os.path.join(directory, "plot.gp")
    try:
        with open(gp, "w", newline="\n") as fh:
            fh.write(PLOT_SCRIPT)
    except OSError as exc:
        raise ScenarioIOError(f"cannot write {gp}: {exc}") from exc
    files.append(gp)
    return files
