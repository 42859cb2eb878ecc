"""Acceptance suite: one test per criterion, each printing a single
``criterion k: PASS|FAIL`` line with the measured quantities.

Run with ``pytest tests/test_acceptance.py -v``. The lines are printed with
output capture disabled so they appear in the normal pytest log.
"""
import json
import os
import time

import numpy as np
import pytest

from mflqg.certify import FAIL, PASS, certify_h2_finite_n, certify_model_h2prime
from mflqg.cli import run as cli_run
from mflqg.decoupling import (LAMBDA_DISCREPANCY_NOTE, build_ahat, lambda_series, lambda_terms, psi1,
                              solvability_with_notes)
from mflqg.meanfield import residuals, solve_consistency, worst_case_volatility
from mflqg.model import derive_offsets
from mflqg.numerics import TimeGrid
from mflqg.oracle import random_policy, tree_inner_sup, tree_minmax, zero_policy
from mflqg.scenario import load_scenario
from mflqg.simulate import SimConfig, adversary_perturbation_check, convergence_study, tree_policies
from conftest import passing_instance, random_instance
from reference_values import EX61_AHAT

ROWS = ("x", "k", "phat", "y", "h", "boundary")


@pytest.fixture
def report(capsys):
    def emit(k, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return emit


def test_criterion_1_reference_example(report):
    t0 = time.perf_counter()
    p = load_scenario("bundled:example61")[0]
    d = derive_offsets(p)
    ahat = build_ahat(p, d)
    exact = bool(np.array_equal(ahat, EX61_AHAT))
    lam1 = lambda_terms(p.A, ahat, 1)[0]
    rep = solvability_with_notes(p, d, TimeGrid(p.T, 64))
    elapsed = time.perf_counter() - t0
    ok = (exact and np.array_equal(rep.lambda1, ahat) and np.array_equal(lam1, ahat)
          and LAMBDA_DISCREPANCY_NOTE in rep.notes and elapsed < 1.0)
    assert report(1, ok, f"Ahat exact={exact}, note attached={LAMBDA_DISCREPANCY_NOTE in rep.notes}, "
                         f"{elapsed:.3f}s")


def test_criterion_2_decoupling_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1002)
    worst_series = worst_flow = 0.0
    for _ in range(50):
        p = random_instance(rng, n=int(rng.integers(1, 5)), T=float(rng.uniform(0.1, 2.0)))
        d = derive_offsets(p)
        n = p.n
        worst_series = max(worst_series, float(np.max(np.abs(psi1(p, d, p.T, 0.0)[n:, :n]
                                                             - lambda_series(p, d, p.T)))))
        r, s = sorted(rng.uniform(0.0, p.T, 2))
        flow = psi1(p, d, p.T, s) @ psi1(p, d, s, r) - psi1(p, d, p.T, r)
        worst_flow = max(worst_flow, float(np.max(np.abs(flow))))
    elapsed = time.perf_counter() - t0
    ok = worst_series < 1e-10 and worst_flow < 1e-9 and elapsed < 10.0
    assert report(2, ok, f"series err {worst_series:.2e}, flow err {worst_flow:.2e}, {elapsed:.2f}s")


TREE_CONFIGS = ((1, 6), (2, 4), (3, 3))


def _tree_sup(p):
    """Largest zero-policy inner sup over the tree sizes allowed by the caps."""
    vals = []
    for N, M in TREE_CONFIGS:
        sup = tree_inner_sup(p, N, M, zero_policy(p, N, M)[0])
        if not sup.bounded:
            return np.inf
        vals.append(sup.value)
    return max(vals)


def test_criterion_3_certificate_coherence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    verdicts, disagree = [], 0
    for j in range(20):
        p = random_instance(rng, n=int(rng.integers(1, 3)), r=1)
        # bimodal: heavy adversary penalty, or a weak penalty with strong common-noise coupling
        p = p.replace(R0=4.0 * p.R0) if j % 2 == 0 else p.replace(R0=1e-3 * p.R0, C0=6.0 * p.C0)
        g = TimeGrid(p.T, 128)
        hp = certify_model_h2prime(p, g).h2prime_ok
        fin = [certify_h2_finite_n(p, N, g).h2_ok for N in (1, 2, 4)]
        disagree += any(f != hp for f in fin)
        verdicts.append((hp, _tree_sup(p)))
    passing = [v for hp, v in verdicts if hp == PASS]
    baseline = float(np.median(passing)) if passing else np.nan
    fails = [v for hp, v in verdicts if hp == FAIL]
    confirmed = sum(1 for v in fails if not np.isfinite(v) or v > 10.0 * abs(baseline))
    elapsed = time.perf_counter() - t0
    ok = disagree == 0 and confirmed == len(fails) and elapsed < 60.0
    assert report(3, ok, f"{len(passing)} pass / {len(fails)} fail, {disagree} disagreements, "
                         f"tree confirms {confirmed}/{len(fails)} fails (baseline {baseline:.3g}), {elapsed:.1f}s")


def _criterion4_instances():
    ex = load_scenario("bundled:example61")[0]
    eye = np.eye(2)
    yield "benchmark", load_scenario("bundled:benchmark")[0]
    # at T = 1 the reference example is not certified and the system is near singular
    yield "example61-T0.5", ex.replace(T=0.5)
    yield "example61-coupled-T0.8", ex.replace(B=eye, D=eye, D0=eye, T=0.8)
    yield "random", passing_instance(np.random.default_rng(404), n=2, r=2)


def test_criterion_4_consistency_residuals(report):
    lines, ok = [], True
    for name, p in _criterion4_instances():
        t0 = time.perf_counter()
        g = TimeGrid(p.T, 256)
        cs = solve_consistency(p, None, g)
        res = residuals(cs, paths=64, seed=0)
        worst_row = max(res[r] for r in ROWS)
        pic = solve_consistency(p, None, g, method="picard")
        agree = max(float(np.max(np.abs(cs.Pi - pic.Pi))), float(np.max(np.abs(cs.pi - pic.pi))),
                    float(np.max(np.abs(cs.P - pic.P))))
        elapsed = time.perf_counter() - t0
        ok &= worst_row < 1e-6 and agree < 1e-5 and elapsed < 60.0
        lines.append(f"{name}: resid {worst_row:.1e}, affine-picard {agree:.1e}, {elapsed:.1f}s")
    assert report(4, ok, "; ".join(lines))


def test_criterion_5_tree_oracle_equivalence(report):
    t0 = time.perf_counter()
    p = load_scenario("bundled:benchmark")[0]
    gaps, errs = [], []
    for M in (2, 4):
        cs = solve_consistency(p, None, TimeGrid(p.T, 64 * M))
        u, _ = tree_policies(cs, 2, M)
        sup = tree_inner_sup(p, 2, M, u)
        mm = tree_minmax(p, 2, M)
        gaps.append(sup.value - mm.value)
        errs.append(float(np.max(np.abs(sup.root_s - worst_case_volatility(cs)(0, cs.X0())))))
    elapsed = time.perf_counter() - t0
    ok = (min(gaps) >= -1e-10 and gaps[1] < gaps[0] and errs[1] <= 0.5 * errs[0]
          and elapsed < 120.0)
    assert report(5, ok, f"gap M=2 {gaps[0]:.3e}, M=4 {gaps[1]:.3e}; root sigma0 err {errs[0]:.3e} -> "
                         f"{errs[1]:.3e} (ratio {errs[0] / errs[1]:.2f}), {elapsed:.1f}s")


def test_criterion_6_rates(report):
    t0 = time.perf_counter()
    p, run = load_scenario("bundled:benchmark")
    cs = solve_consistency(p, None, TimeGrid(p.T, run["steps"]))
    cfg = SimConfig((2, 4, 8, 16, 32, 64), max(200, run["paths"]), cs.grid, seed=run["seed"])
    res = convergence_study(p, cs, cfg)
    mf = res.slopes["mf_error_sup_sq"]["slope"]
    cg = res.slopes["cost_gap"]["slope"] if "cost_gap" in res.slopes else np.nan
    elapsed = time.perf_counter() - t0
    ok = -1.2 <= mf <= -0.8 and cg <= -0.4 and res.bounded and elapsed < 600.0
    assert report(6, ok, f"mf slope {mf:.3f}, cost-gap slope {cg:.3f}, bounded={res.bounded} "
                         f"(growth {res.slopes['per_capita_cost_growth']:.3f}), {cfg.paths} paths, {elapsed:.1f}s")


def test_criterion_7_adversary_optimality(report):
    t0 = time.perf_counter()
    p, run = load_scenario("bundled:benchmark")
    g = TimeGrid(p.T, run["steps"])
    certified = certify_model_h2prime(p, g).h2prime_ok == PASS
    cs = solve_consistency(p, None, g)
    recs = adversary_perturbation_check(p, cs, 16, 400, seed=run["seed"])
    worst = max(r["increase"] / r["se"] for r in recs)
    elapsed = time.perf_counter() - t0
    ok = certified and len(recs) == 12 and all(r["ok"] for r in recs) and elapsed < 120.0
    assert report(7, ok, f"H2' certified={certified}, {sum(r['ok'] for r in recs)}/12 perturbations "
                         f"within 3 SE (max increase {worst:.2f} SE), {elapsed:.1f}s")


def test_criterion_8_scaling_invariance(report):
    t0 = time.perf_counter()
    p = load_scenario("bundled:benchmark")[0]
    g = TimeGrid(p.T, 128)
    base = solve_consistency(p, None, g)
    u = random_policy(p, 2, 3, np.random.default_rng(8))
    s_base = tree_inner_sup(p, 2, 3, u).s_policy
    worst_gain = worst_tree = 0.0
    for c in (0.5, 2.0, 10.0):
        q = p.scaled_costs(c)
        cs = solve_consistency(q, None, g)
        for a, b in ((cs.Kx, base.Kx), (cs.kX, base.kX), (cs.kc, base.kc)):
            worst_gain = max(worst_gain, float(np.max(np.abs(a - b))))
        s = tree_inner_sup(q, 2, 3, u).s_policy
        worst_tree = max(worst_tree, max(float(np.max(np.abs(a - b))) for a, b in zip(s, s_base)))
    elapsed = time.perf_counter() - t0
    ok = worst_gain < 1e-8 and worst_tree < 1e-8 and elapsed < 60.0
    assert report(8, ok, f"strategy change {worst_gain:.1e}, tree argmax change {worst_tree:.1e}, {elapsed:.1f}s")


SUBCOMMANDS = (
    ("validate", []),
    ("certify", ["--N", "1,2"]),
    ("solve", ["--steps", "64"]),
    ("simulate", ["--steps", "64", "--N", "4,8", "--paths", "40"]),
    ("study", ["--steps", "64", "--N", "2,4,8", "--paths", "40"]),
    ("oracle-compare", ["--steps", "2", "--N", "1,2"]),
)


def _outputs(d):
    out = {}
    for root, _, files in os.walk(d):
        for f in files:
            if f == "timings.txt":
                continue
            path = os.path.join(root, f)
            with open(path, "rb") as fh:
                data = fh.read()
            if f == "manifest.json":
                man = json.loads(data)
                man.pop("out")
                data = json.dumps(man, sort_keys=True).encode()
            out[os.path.relpath(path, d)] = data
    return out


def test_criterion_9_determinism(report, tmp_path):
    bad = []
    for cmd, extra in SUBCOMMANDS:
        trees = []
        for tag, threads in (("a", "1"), ("b", "1"), ("c", "4")):
            out = tmp_path / f"{cmd}-{tag}"
            code = cli_run([cmd, "--scenario", "bundled:benchmark", "--out", str(out), "--seed", "5",
                            "--threads", threads] + extra)
            if code != 0:
                bad.append(f"{cmd} exit {code}")
            trees.append(_outputs(out))
        if not (trees[0] == trees[1] == trees[2]):
            bad.append(f"{cmd} differs")
    ok = not bad
    assert report(9, ok, f"{len(SUBCOMMANDS)} subcommands x 3 runs (threads 1, 1, 4): "
                         + ("byte-identical" if ok else ", ".join(bad)))
