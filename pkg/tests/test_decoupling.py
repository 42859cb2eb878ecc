import numpy as np
import pytest

from mflqg.decoupling import (LAMBDA_DISCREPANCY_NOTE, build_ahat, check_solvability, condition2_matrix,
                              lambda_series, lambda_terms, psi1, solvability_with_notes)
from mflqg.model import derive_offsets
from mflqg.numerics import TimeGrid, mat_exp, min_singular
from conftest import random_instance
from reference_values import EX61_AHAT, EX61_COND1_RESIDUAL_T1, EX61_COND2_MIN_SV_T1


def test_ahat_reference_example_exact(example61):
    assert np.array_equal(build_ahat(example61), EX61_AHAT)


def test_ahat_trivial_cases():
    rng = np.random.default_rng(10)
    p = random_instance(rng, n=2)
    g0 = p.replace(G=np.zeros((2, 2)))
    assert np.allclose(build_ahat(g0), derive_offsets(g0).Xi1 - g0.Q, atol=1e-12)
    # Gamma = Gamma0 = I gives Q = Xi1 and G = Xi1^G
    eye = p.replace(Gamma=np.eye(2), Gamma0=np.eye(2))
    d = derive_offsets(eye)
    assert np.allclose(d.Xi1, eye.Q) and np.allclose(d.Xi1G, eye.G)
    assert np.allclose(build_ahat(eye), np.zeros((2, 2)), atol=1e-12)


def test_psi1_structure():
    rng = np.random.default_rng(11)
    p = random_instance(rng, n=3)
    d = derive_offsets(p)
    n = p.n
    assert np.allclose(psi1(p, d, 0.4, 0.4), np.eye(2 * n), atol=1e-14)
    P = psi1(p, d, 1.0, 0.25)
    assert np.all(P[:n, n:] == 0.0)
    assert np.allclose(P[:n, :n], mat_exp(p.A, 0.75), atol=1e-12)
    assert np.allclose(P[n:, n:], mat_exp(-p.A.T, 0.75), atol=1e-12)
    assert np.allclose(psi1(p, d, 1.0, 0.6) @ psi1(p, d, 0.6, 0.1), psi1(p, d, 1.0, 0.1), atol=1e-9)


def test_psi1_block_diagonal_when_ahat_zero():
    rng = np.random.default_rng(12)
    p = random_instance(rng, n=2).replace(Gamma=np.eye(2), Gamma0=np.eye(2))
    P = psi1(p, None, 0.8, 0.0)
    assert np.allclose(P[2:, :2], 0.0, atol=1e-12)


def test_lambda_recursion_and_commuting_case():
    A = np.diag([1.0, 2.0])
    Ah = np.diag([0.5, -0.3])
    L = lambda_terms(A, Ah, 3)
    assert np.array_equal(L[0], Ah)
    assert np.allclose(L[1], 0.0)


def test_lambda_series_matches_psi1_lower_left():
    rng = np.random.default_rng(13)
    for _ in range(20):
        p = random_instance(rng, n=int(rng.integers(1, 5)))
        d = derive_offsets(p)
        tau = float(rng.uniform(0.1, 2.0))
        S = lambda_series(p, d, tau)
        n = p.n
        assert np.allclose(psi1(p, d, tau, 0.0)[n:, :n], S, atol=1e-10, rtol=0)


def test_reference_example_solvability(example61):
    rep = solvability_with_notes(example61, None, TimeGrid(1.0, 64))
    assert np.array_equal(rep.lambda1, EX61_AHAT)
    assert rep.condition1_residual == pytest.approx(EX61_COND1_RESIDUAL_T1, abs=1e-14)
    assert rep.condition2_min_sv == pytest.approx(EX61_COND2_MIN_SV_T1, rel=1e-10)
    assert rep.verdict == "not-certified"
    assert LAMBDA_DISCREPANCY_NOTE in rep.notes
    two = solvability_with_notes(example61.replace(T=2.0), None, TimeGrid(2.0, 64))
    assert two.condition1_residual == pytest.approx(2 * EX61_COND1_RESIDUAL_T1, abs=1e-12)


def test_condition2_identity():
    rng = np.random.default_rng(14)
    for _ in range(5):
        p = random_instance(rng, n=2)
        d = derive_offsets(p)
        t = float(rng.uniform(0, p.T))
        Psi = psi1(p, d, p.T, t)
        lhs = Psi[2:, :2] @ d.IG @ np.linalg.inv(p.R0) + Psi[2:, 2:]
        assert np.allclose(lhs, condition2_matrix(p, d, p.T - t), atol=1e-10)


def test_ahat_zero_is_solvable():
    rng = np.random.default_rng(15)
    p = random_instance(rng, n=2).replace(Gamma=np.eye(2), Gamma0=np.eye(2))
    g = TimeGrid(p.T, 32)
    rep = check_solvability(p, None, g)
    assert rep.condition1_residual < 1e-12
    expected = min(min_singular(mat_exp(-p.A.T, p.T - t)) for t in g.nodes)
    assert rep.condition2_min_sv == pytest.approx(expected, rel=1e-9)
    assert rep.verdict == "solvable"
