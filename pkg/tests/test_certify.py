import numpy as np
import pytest

from mflqg.certify import (FAIL, PASS, UNDETERMINED, CertificateReport, certify_all, certify_h2_finite_n,
                           certify_h2prime, certify_model_h2prime, probe_h3, solve_k_riccati, solve_p_riccati)
from mflqg.model import ModelParams, derive_offsets
from mflqg.numerics import TimeGrid, min_eig
from mflqg.oracle import eval_j0_soc, tree_inner_sup, zero_policy
from conftest import passing_instance, random_instance


def _zero_k_instance(rng, n=2):
    # C0 = 0 and Gamma = Gamma0 = I make Q - Xi1 = 0 and G - Xi1^G = 0, so K = 0 solves the equation
    p = random_instance(rng, n=n)
    return p.replace(C0=np.zeros((n, n)), Gamma=np.eye(n), Gamma0=np.eye(n))


def test_k_zero_solution():
    p = _zero_k_instance(np.random.default_rng(20))
    k = solve_k_riccati(p, TimeGrid(p.T, 64))
    assert np.allclose(k.K.values, 0.0, atol=1e-14)
    assert k.margin == pytest.approx(min_eig(p.R0), abs=1e-12)
    rep = certify_h2prime(k)
    assert rep.h2prime_ok == PASS


def test_k_zero_scalar():
    p = ModelParams.build(A=[[0.0]], C0=[[1.0]], Q=[[1.0]], R=[[1.0]], R0=[[1.0]], G=[[1.0]], Gamma=[[1.0]],
                          Gamma0=[[1.0]])
    k = solve_k_riccati(p, TimeGrid(1.0, 32))
    assert np.allclose(k.K.values, 0.0, atol=1e-14)
    assert certify_h2prime(k).margins["h2prime_min_eig_K_plus_R0"] == pytest.approx(1.0)


def test_k_terminal_and_symmetry():
    rng = np.random.default_rng(21)
    p = passing_instance(rng, n=3)
    d = derive_offsets(p)
    k = solve_k_riccati(p, TimeGrid(p.T, 128))
    assert np.array_equal(k.K.values[-1], -d.Gm)
    assert np.allclose(k.K.values[-1], d.Xi1G - p.G, atol=1e-12)
    assert max(np.max(np.abs(K - K.T)) for K in k.K.values) < 1e-9


def test_k_step_refinement_reference_example(example61):
    # the full unit horizon loses K + R0 > 0 (see test below); T = 0.5 keeps it
    p = example61.replace(T=0.5)
    coarse = solve_k_riccati(p, TimeGrid(0.5, 256)).K.values[0]
    fine = solve_k_riccati(p, TimeGrid(0.5, 2048)).K.values[0]
    assert np.max(np.abs(coarse - fine)) < 1e-6


def test_reference_example_verdict(example61):
    rep = certify_model_h2prime(example61, TimeGrid(1.0, 256))
    assert rep.h2prime_ok == FAIL
    assert rep.margins["h2prime_margin_node"] is not None


def test_k_scaling():
    rng = np.random.default_rng(22)
    p = passing_instance(rng, n=2)
    g = TimeGrid(p.T, 64)
    K1 = solve_k_riccati(p, g).K.values
    for c in (0.5, 2.0, 10.0):
        Kc = solve_k_riccati(p.scaled_costs(c), g).K.values
        assert np.allclose(Kc, c * K1, rtol=1e-8, atol=1e-12 * c)


def test_finite_n_trivial_pass():
    rng = np.random.default_rng(23)
    p = random_instance(rng, n=2).replace(Q=np.zeros((2, 2)), G=np.zeros((2, 2)))
    for N in (1, 2, 4):
        path, margins = solve_p_riccati(p, N, TimeGrid(p.T, 32))
        assert np.allclose(path.values, 0.0)
        assert certify_h2_finite_n(p, N, TimeGrid(p.T, 32)).h2_ok == PASS


def test_finite_n_agrees_with_k():
    rng = np.random.default_rng(24)
    for j in range(8):
        p = random_instance(rng, n=2)
        if j % 2:
            p = p.replace(R0=p.R0 * 1e-3, C0=p.C0 * 6)
        g = TimeGrid(p.T, 128)
        hp = certify_model_h2prime(p, g).h2prime_ok
        for N in (1, 2, 4):
            assert certify_h2_finite_n(p, N, g).h2_ok == hp


def test_tiny_r0_fails_and_tree_unbounded():
    p = ModelParams.build(A=[[1.0]], C0=[[2.0]], Q=[[5.0]], R=[[1.0]], R0=[[1e-6]], G=[[3.0]], x0=[1.0])
    assert certify_model_h2prime(p, TimeGrid(1.0, 128)).h2prime_ok == FAIL
    sup = tree_inner_sup(p, 1, 3, zero_policy(p, 1, 3)[0])
    assert not sup.bounded and sup.value == np.inf


def test_large_terminal_cost_fails_near_T():
    p = ModelParams.build(A=[[0.0]], C0=[[1.0]], Q=[[0.0]], R=[[1.0]], R0=[[0.1]], G=[[1000.0]], x0=[1.0])
    g = TimeGrid(1.0, 128)
    rep = certify_h2_finite_n(p, 2, g)
    assert rep.h2_ok == FAIL
    assert rep.margins["h2_N2_node"] >= 120


def test_report_merge_invariant():
    rep = CertificateReport().merge(CertificateReport(h2prime_ok=PASS))
    assert rep.h2_ok == PASS


def test_probe_h3_zero_policy_and_large_r0():
    rng = np.random.default_rng(25)
    p = random_instance(rng, n=1, r=1).replace(D=np.zeros((1, 1)), D0=np.zeros((1, 1)))
    assert eval_j0_soc(p, 2, 3, zero_policy(p, 2, 3)[0]).value == pytest.approx(0.0, abs=1e-14)
    rep = probe_h3(p.replace(R0=np.eye(1) * 1e6), samples=4, seed=1)
    assert rep.h3_ok == PASS and rep.margins["h3_min_j0"] >= 0
    assert any("not a proof" in n for n in rep.notes)


def test_probe_h3_unbounded_is_undetermined():
    p = ModelParams.build(A=[[1.0]], C0=[[2.0]], Q=[[5.0]], R=[[1.0]], R0=[[1e-6]], G=[[3.0]])
    assert probe_h3(p, samples=2, seed=0).h3_ok == UNDETERMINED


def test_certify_all_h1_failure():
    p = ModelParams.build(A=[[0.0]], Q=[[1.0]], R=[[0.0]], R0=[[1.0]])
    rep = certify_all(p, TimeGrid(1.0, 16))
    assert rep.h1_ok == FAIL and any("R > 0" in n for n in rep.notes)


def test_certify_all_pass_instance(bench):
    rep = certify_all(bench, TimeGrid(1.0, 64), probe_samples=2)
    d = rep.to_dict()
    assert d["h1"] == d["h2prime"] == d["h2"] == PASS
    assert d["h3"] == PASS
