import math

import numpy as np
import pytest

from mflqg.errors import BlowUpError, DimensionError, ShapeError
from mflqg.numerics import (RandomStreams, TimeGrid, fd_derivative, integrate_backward_ode, mat_exp, max_eig,
                            min_eig, min_singular, symmetrize)
from reference_values import RK4_EXP_REF, companion_min_root


def test_grid_nodes_and_refine():
    g = TimeGrid(2.0, 8)
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 2.0
    assert np.all(np.diff(g.nodes) > 0)
    assert g.refine(2).steps == 16
    with pytest.raises(DimensionError):
        TimeGrid(0.0, 4)
    with pytest.raises(DimensionError):
        TimeGrid(1.0, 0)


def test_mat_exp_identities():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((3, 3))
    assert np.array_equal(mat_exp(M, 0.0), np.eye(3))
    assert np.allclose(mat_exp(np.zeros((2, 2)), 1.0), np.eye(2), atol=0)
    assert np.allclose(mat_exp(np.diag([2.0, 0.0]), 1.0), np.diag([math.exp(2.0), 1.0]), rtol=1e-12)
    assert np.allclose(mat_exp(M, 0.7) @ mat_exp(M, 0.4), mat_exp(M, 1.1), atol=1e-10)
    with pytest.raises(DimensionError):
        mat_exp(np.ones((2, 3)), 1.0)


def test_backward_rk4_examples():
    g = TimeGrid(1.0, 50)
    G = np.array([[1.0, 2.0], [2.0, 5.0]])
    path = integrate_backward_ode(lambda t, K: np.zeros_like(K), G, g)
    assert all(np.array_equal(v, G) for v in path.values)
    lin = integrate_backward_ode(lambda t, k: -np.ones_like(k), np.zeros((1, 1)), g)
    assert lin.values[0, 0, 0] == pytest.approx(1.0, abs=1e-13)
    ex = integrate_backward_ode(lambda t, k: -2 * k, np.ones((1, 1)), g)
    assert ex.values[0, 0, 0] == pytest.approx(RK4_EXP_REF, rel=1e-7)


def test_backward_rk4_fourth_order():
    errs = []
    for steps in (10, 20):
        p = integrate_backward_ode(lambda t, k: -2 * k + np.sin(t), np.ones((1, 1)), TimeGrid(1.0, steps))
        ref = integrate_backward_ode(lambda t, k: -2 * k + np.sin(t), np.ones((1, 1)), TimeGrid(1.0, 2000))
        errs.append(abs(p.values[0, 0, 0] - ref.values[0, 0, 0]))
    assert 12 < errs[0] / errs[1] < 20


def test_backward_blowup_names_node():
    with pytest.raises(BlowUpError) as exc, np.errstate(over="ignore", invalid="ignore"):
        integrate_backward_ode(lambda t, k: -k * k, np.ones((1, 1)) * 10.0, TimeGrid(1.0, 20))
    assert exc.value.node is not None


def test_deterministic_integration():
    f = lambda t, K: -(K @ K) + np.cos(t) * np.eye(2)
    a = integrate_backward_ode(f, np.eye(2), TimeGrid(1.0, 40)).values
    b = integrate_backward_ode(f, np.eye(2), TimeGrid(1.0, 40)).values
    assert np.array_equal(a, b)


def test_eigen_helpers():
    assert min_eig(np.eye(3)) == 1.0
    assert min_eig(np.diag([0.1, 2.0])) == pytest.approx(0.1, abs=1e-12)
    rng = np.random.default_rng(1)
    for _ in range(5):
        S = rng.standard_normal((4, 4))
        S = S + S.T
        assert min_eig(S) == pytest.approx(companion_min_root(S), abs=1e-8)
        assert max_eig(S) >= min_eig(S)
    with pytest.raises(ShapeError):
        min_eig(np.array([[1.0, 1.0], [0.0, 1.0]]))
    near = np.array([[1.0, 1e-12], [0.0, 1.0]])
    assert np.allclose(symmetrize(near), symmetrize(near).T)
    assert min_singular(np.diag([3.0, 0.5])) == pytest.approx(0.5)


def test_fd_derivative_fourth_order():
    t = np.linspace(0, 1, 41)
    d = fd_derivative(np.sin(t)[:, None], t[1] - t[0])[:, 0]
    assert np.max(np.abs(d - np.cos(t))) < 1e-6


def test_random_streams_reproducible_and_independent():
    rs = RandomStreams(42)
    a = rs.normals("W", 1, 0, 1000)
    assert np.array_equal(a, RandomStreams(42).normals("W", 1, 0, 1000))
    assert not np.array_equal(a, rs.normals("W", 2, 0, 1000))
    assert not np.array_equal(a, rs.normals("W0", 1, 0, 1000))
    assert abs(np.corrcoef(a, rs.normals("W", 2, 0, 1000))[0, 1]) < 0.15
    blk = rs.block("W", [3, 1], [5], 7, 2)
    assert np.array_equal(blk[0, 1], rs.normals("W", 1, 5, (7, 2)))


def test_random_stream_moments():
    x = RandomStreams(7).normals("moments", 0, 0, 1_000_000)
    se = 1 / math.sqrt(len(x))
    assert abs(x.mean()) < 4 * se
    assert abs(x.var() - 1.0) < 4 * math.sqrt(2) * se
