"""Command-line front end.

Exit codes: 0 success, 1 validation failure (including usage errors and
(H1) violations), 2 solver breakdown, 3 I/O error.
"""
from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import __version__
from .certify import DEFAULT_THRESHOLD, certify_all, certify_model_h2prime
from .decoupling import RANK_TOL, solvability_with_notes
from .errors import ScenarioIOError, SolverBreakdown, ValidationError
from .meanfield import residuals, save_solution, solve_consistency, worst_case_volatility
from .model import build_compact, derive_offsets, sandwich_margins, validate_h1
from .numerics import TimeGrid
from .output import emit_plot_data, write_csv, write_json
from .scenario import load_scenario

EXIT_OK, EXIT_VALIDATION, EXIT_BREAKDOWN, EXIT_IO = 0, 1, 2, 3
SUBCOMMANDS = ("validate", "certify", "solve", "simulate", "study", "oracle-compare")
DEFAULT_STEPS = 256
DEFAULT_STUDY_N = (2, 4, 8, 16, 32, 64)
ORACLE_REFINE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"usage: {message}")


def _int_list(text):
    try:
        vals = [int(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected a comma-separated list of integers") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mflqg", description="Mean-field LQG social optimum with volatility-uncertain common noise")
    ap.add_argument("--version", action="version", version=f"mflqg {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--scenario", required=True, help="scenario file, or bundled:<name>")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--steps", type=int, default=None, help="time steps (tree depth for oracle-compare)")
        sp.add_argument("--N", type=_int_list, default=None, help="agent counts, comma-separated")
        sp.add_argument("--paths", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None, help="worker threads; never changes results")
        sp.add_argument("--method", choices=("affine", "picard"), default="affine")
        sp.add_argument("--tol", type=float, default=None,
                        help="tolerance; its meaning depends on the subcommand (see README)")
    return ap


class _Run:
    def __init__(self, args, p, defaults):
        self.args, self.p, self.defaults = args, p, defaults
        self.out = args.out
        self.files = []
        self.timings = []
        self.seed = args.seed if args.seed is not None else defaults.get("seed", 0)
        self.steps = args.steps if args.steps is not None else defaults.get("steps", DEFAULT_STEPS)
        if self.steps < 1:
            raise ValidationError("--steps must be positive")

    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def add(self, *paths):
        self.files.extend(paths)

    def timed(self, label, fn, *a, **kw):
        t0 = time.perf_counter()
        res = fn(*a, **kw)
        self.timings.append((label, time.perf_counter() - t0))
        return res

    def grid(self, steps=None):
        return TimeGrid(self.p.T, steps or self.steps)

    def solve(self):
        kw = {}
        if self.args.method == "picard" and self.args.tol is not None:
            kw["tol"] = self.args.tol
        return self.timed("solve", solve_consistency, self.p, None, self.grid(), self.args.method, **kw)

    def Ns(self, default):
        return list(self.args.N or self.defaults.get("N") or default)

    def paths(self, default):
        v = self.args.paths if self.args.paths is not None else self.defaults.get("paths", default)
        if v < 2:
            raise ValidationError("--paths must be at least 2")
        return v

    def manifest(self):
        rel = sorted(os.path.relpath(f, self.out).replace(os.sep, "/") for f in self.files)
        a = self.args
        tpath = self.path("timings.txt")
        try:
            with open(tpath, "w") as fh:
                for label, sec in self.timings:
                    fh.write(f"{label} {sec:.6f}\n")
        except OSError as exc:
            raise ScenarioIOError(f"cannot write {tpath}: {exc}") from exc
        man = {
            "tool": "mflqg", "version": __version__, "subcommand": a.command, "scenario": a.scenario,
            "out": a.out, "seed": self.seed, "steps": self.steps, "method": a.method,
            "N": a.N, "paths": a.paths, "tol": a.tol, "files": rel + ["manifest.json", "timings.txt"],
            "timings_file": "timings.txt",
        }
        write_json(self.path("manifest.json"), man)


def _header(p):
    return {"n": p.n, "r": p.r, "T": p.T}


def cmd_validate(run: _Run) -> int:
    p = run.p
    v = validate_h1(p)
    rep = {"model": _header(p), "h1": v.to_dict(), "coefficients": {
        k: getattr(p, k) for k in ("A", "B", "D", "C0", "D0", "Q", "R", "R0", "G", "Gamma", "Gamma0")}}
    code = EXIT_OK if v.ok else EXIT_VALIDATION
    if v.ok:
        d = derive_offsets(p)
        rep["derived"] = {"Xi1": d.Xi1, "Xi1G": d.Xi1G, "Xi2G": d.Xi2G, "IG": d.IG, "Q_minus_Xi1": d.Qm,
                          "G_minus_Xi1G": d.Gm}
        cm = build_compact(p, 1, d)
        lo, hi = sandwich_margins(p, cm)
        rep["compact_N1"] = {"Qhat": cm.Qhat, "sandwich_margins": [lo, hi]}
        tol = run.args.tol if run.args.tol is not None else RANK_TOL
        rep["solvability"] = solvability_with_notes(p, d, run.grid(), tol).to_dict()
    run.add(write_json(run.path("report.json"), rep))
    return code


def cmd_certify(run: _Run) -> int:
    p = run.p
    thr = run.args.tol if run.args.tol is not None else DEFAULT_THRESHOLD
    Ns = run.Ns((1, 2, 4))
    rep = run.timed("certify", certify_all, p, run.grid(), Ns=tuple(Ns), seed=run.seed, threshold=thr)
    out = rep.to_dict()
    out["model"] = _header(p)
    if rep.h1_ok == "pass":
        out["solvability"] = solvability_with_notes(p, None, run.grid()).to_dict()
    run.add(write_json(run.path("certificates.json"), out))
    return EXIT_OK if rep.h1_ok == "pass" else EXIT_VALIDATION


def _require_h1(p):
    v = validate_h1(p)
    if not v.ok:
        raise ValidationError("(H1) violated: " + ", ".join(v.violations))


def cmd_solve(run: _Run) -> int:
    _require_h1(run.p)
    cs = run.solve()
    res = run.timed("residuals", residuals, cs, 64, run.seed)
    run.add(*save_solution(cs, run.path("solution")))
    rep = {"model": _header(run.p), "method": cs.method, "iterations": cs.iterations, "steps": cs.grid.steps,
           "sup_norm": cs.sup_norm(), "residuals": res,
           "strategy_t0": {"Kx": cs.Kx[0], "kappa_X": cs.kX[0], "kappa_c": cs.kc[0]},
           "sigma0_t0": worst_case_volatility(cs)(0, cs.X0()),
           "h2prime": certify_model_h2prime(run.p, cs.grid).h2prime_ok}
    run.add(write_json(run.path("report.json"), rep))
    return EXIT_OK


def cmd_simulate(run: _Run) -> int:
    from .simulate import mean_se, path_metrics, simulate_population

    _require_h1(run.p)
    cs = run.solve()
    paths = run.paths(200)
    rows, summary = [], []
    for N in run.Ns((16,)):
        pop = run.timed(f"simulate N={N}", simulate_population, run.p, cs, N, paths, run.seed,
                        threads=run.args.threads)
        cost, mf, gap = path_metrics(run.p, cs, pop)
        rows.extend((N, j, cost[j], mf[j], gap[j]) for j in range(paths))
        summary.append({"N": N, "paths": paths, "per_capita_cost": mean_se(cost),
                        "mf_error_sup_sq": mean_se(mf), "sigma0_gap_sq": mean_se(gap)})
    run.add(write_csv(run.path("results.csv"),
                      ["N", "replicate", "per_capita_cost", "mf_error_sup_sq", "sigma0_gap_sq"], rows))
    run.add(write_json(run.path("report.json"), {"model": _header(run.p), "summary": summary,
                                                 "note": "entries are [mean, standard error]"}))
    return EXIT_OK


def cmd_study(run: _Run) -> int:
    from .simulate import ROW_FIELDS, SimConfig, convergence_study

    _require_h1(run.p)
    cs = run.solve()
    cfg = SimConfig(tuple(run.Ns(DEFAULT_STUDY_N)), run.paths(200), cs.grid, run.seed, threads=run.args.threads)
    res = run.timed("study", convergence_study, run.p, cs, cfg)
    run.add(write_csv(run.path("results.csv"), list(ROW_FIELDS), res.rows))
    run.add(write_json(run.path("report.json"), res.to_dict()))
    run.add(*emit_plot_data(res, run.path("plots")))
    return EXIT_OK


def cmd_oracle_compare(run: _Run) -> int:
    from .oracle import tree_evaluate, tree_inner_sup, tree_minmax
    from .simulate import tree_policies

    p = run.p
    _require_h1(p)
    M = run.args.steps if run.args.steps is not None else 4
    run.steps = M
    grid = TimeGrid(p.T, M * ORACLE_REFINE)
    cs = run.timed("solve", solve_consistency, p, None, grid, run.args.method)
    s_mf = worst_case_volatility(cs)(0, cs.X0())
    rows, recs = [], []
    for N in (run.args.N or [1, 2]):
        u, s = tree_policies(cs, N, M)
        sup = run.timed(f"inner sup N={N}", tree_inner_sup, p, N, M, u)
        mm = run.timed(f"minmax N={N}", tree_minmax, p, N, M)
        mf_val = tree_evaluate(p, N, M, u, s)
        root = sup.root_s if sup.bounded else np.full(p.n, np.nan)
        rec = {"N": N, "M": M, "decentralized_worst_case": sup.value, "decentralized_meanfield_adversary": mf_val,
               "tree_minmax": mm.value, "gap": sup.value - mm.value, "root_sigma0_tree": root,
               "root_sigma0_meanfield": s_mf, "root_sigma0_error": float(np.max(np.abs(root - s_mf)))}
        recs.append(rec)
        rows.append((N, M, sup.value, mf_val, mm.value, sup.value - mm.value, rec["root_sigma0_error"]))
    run.add(write_csv(run.path("results.csv"), ["N", "M", "decentralized_worst_case",
                                                  "decentralized_meanfield_adversary", "tree_minmax", "gap",
                                                  "root_sigma0_error"], rows))
    run.add(write_json(run.path("report.json"), {"model": _header(p), "comparisons": recs,
                                                 "solution_steps": grid.steps}))
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "certify": cmd_certify, "solve": cmd_solve, "simulate": cmd_simulate,
            "study": cmd_study, "oracle-compare": cmd_oracle_compare}


def run(argv=None) -> int:
    """Execute one subcommand; returns the exit code."""
    try:
        args = build_parser().parse_args(argv)
        p, defaults = load_scenario(args.scenario)
        try:
            os.makedirs(args.out, exist_ok=True)
        except OSError as exc:
            raise ScenarioIOError(f"cannot create output directory {args.out}: {exc}") from exc
        r = _Run(args, p, defaults)
        code = COMMANDS[args.command](r)
        r.manifest()
        return code
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SolverBreakdown as exc:
        print(f"solver breakdown: {exc}", file=sys.stderr)
        return EXIT_BREAKDOWN
    except (ScenarioIOError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main(argv=None):
    sys.exit(run(argv))
