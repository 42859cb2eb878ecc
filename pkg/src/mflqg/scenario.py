"""Scenario files: flat ``key = value`` lines shared by every subcommand.

Matrices are listed row-major as whitespace- or comma-separated numbers, and
their shape follows from the key and the declared ``n`` and ``r``. Vector
functions (f, sigma, eta) are either a constant vector or
``csv:<file>``, a CSV with a header and columns t, v1, ..., vn, resolved
relative to the scenario file. Optional run defaults (steps, seed, N, paths)
may also appear. Lines starting with ``#`` are comments.
"""
from __future__ import annotations

import csv
import os
from importlib import resources

import numpy as np

from .errors import DimensionError, ScenarioIOError
from .model import ModelParams, VectorFunction

SQUARE = ("A", "C0", "Q", "R0", "G", "Gamma", "Gamma0")
INPUT = ("B", "D", "D0")
VFUNS = ("f", "sigma", "eta")
VECS = ("eta0", "x0")
RUN_INT = ("steps", "seed", "paths")
KNOWN = set(SQUARE + INPUT + VFUNS + VECS + RUN_INT + ("n", "r", "T", "R", "N", "name"))
BUNDLED = ("example61", "benchmark")


def _numbers(text, key):
    try:
        return np.array([float(v) for v in text.replace(",", " ").split()], dtype=float)
    except ValueError as exc:
        raise ScenarioIOError(f"{key}: not a list of numbers") from exc


def _matrix(text, key, rows, cols):
    v = _numbers(text, key)
    if v.size != rows * cols:
        raise DimensionError(f"{key} needs {rows * cols} entries ({rows}x{cols}), got {v.size}")
    return v.reshape(rows, cols)


def _read_csv_function(path, key, n):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ScenarioIOError(f"{key}: cannot read {path}: {exc}") from exc
    if len(rows) < 2:
        raise ScenarioIOError(f"{key}: {path} has no data rows")
    try:
        data = np.array([[float(c) for c in row] for row in rows[1:] if row], dtype=float)
    except ValueError as exc:
        raise ScenarioIOError(f"{key}: {path} has a non-numeric entry") from exc
    if data.shape[1] != n + 1:
        raise DimensionError(f"{key}: {path} needs columns t and {n} components")
    return VectorFunction(data[:, 1:], data[:, 0])


def parse_scenario(text: str, base_dir: str = ".") -> tuple[ModelParams, dict]:
    """Parse scenario text into (ModelParams, run defaults)."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioIOError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KNOWN:
            raise ScenarioIOError(f"line {lineno}: unknown key {key!r}")
        if key in entries:
            raise ScenarioIOError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = value
    for req in ("n", "r", "A", "Q", "R", "R0"):
        if req not in entries:
            raise ScenarioIOError(f"missing required key {req!r}")
    try:
        n, r = int(entries["n"]), int(entries["r"])
    except ValueError as exc:
        raise ScenarioIOError("n and r must be integers") from exc
    if n < 1 or r < 1:
        raise DimensionError("n and r must be positive")
    kw = {}
    for k in SQUARE:
        if k in entries:
            kw[k] = _matrix(entries[k], k, n, n)
    for k in INPUT:
        if k in entries:
            kw[k] = _matrix(entries[k], k, n, r)
    kw["R"] = _matrix(entries["R"], "R", r, r)
    for k in VECS:
        if k in entries:
            kw[k] = _matrix(entries[k], k, 1, n)[0]
    for k in VFUNS:
        if k not in entries:
            continue
        v = entries[k]
        if v.startswith("csv:"):
            kw[k] = _read_csv_function(os.path.join(base_dir, v[4:].strip()), k, n)
        else:
            kw[k] = VectorFunction(_matrix(v, k, 1, n)[0])
    if "T" in entries:
        kw["T"] = float(_numbers(entries["T"], "T")[0])
    A, Q, R, R0 = kw.pop("A"), kw.pop("Q"), kw.pop("R"), kw.pop("R0")
    p = ModelParams.build(A, Q, R, R0, **kw)
    run = {}
    try:
        for k in RUN_INT:
            if k in entries:
                run[k] = int(entries[k])
        if "N" in entries:
            run["N"] = [int(v) for v in entries["N"].replace(",", " ").split()]
    except ValueError as exc:
        raise ScenarioIOError("run defaults must be integers") from exc
    if "name" in entries:
        run["name"] = entries["name"]
    return p, run


def load_scenario(path: str) -> tuple[ModelParams, dict]:
    """Read a scenario file, or a bundled scenario given as ``bundled:<name>``."""
    if path.startswith("bundled:"):
        return parse_scenario(bundled_text(path[8:]))
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioIOError(f"cannot read scenario {path}: {exc}") from exc
    return parse_scenario(text, os.path.dirname(os.path.abspath(path)))


def bundled_text(name: str) -> str:
    if name not in BUNDLED:
        raise ScenarioIOError(f"no bundled scenario {name!r}; available: {', '.join(BUNDLED)}")
    return resources.files("mflqg").joinpath("data", f"{name}.scn").read_text()


def _fmt(M):
    return " ".join(f"{v:.17g}" for v in np.ravel(M))


def format_scenario(p: ModelParams, run: dict | None = None) -> str:
    """Inverse of parse_scenario for constant vector functions."""
    lines = [f"n = {p.n}", f"r = {p.r}", f"T = {p.T:.17g}"]
    for k in ("A", "B", "D", "C0", "D0", "Q", "R", "R0", "G", "Gamma", "Gamma0"):
        lines.append(f"{k} = {_fmt(getattr(p, k))}")
    for k in VFUNS:
        vf = getattr(p, k)
        if not vf.is_constant:
            raise ScenarioIOError(f"{k} is time-varying; write it as a csv: column file")
        lines.append(f"{k} = {_fmt(vf.values)}")
    for k in VECS:
        lines.append(f"{k} = {_fmt(getattr(p, k))}")
    for k, v in (run or {}).items():
        lines.append(f"{k} = {' '.join(map(str, v)) if isinstance(v, (list, tuple)) else v}")
    return "\n".join(lines) + "\n"
