"""Shared numerical kernels: time grids, matrix exponentials, backward RK4,
eigenvalue extraction and reproducible normal streams."""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import BlowUpError, DimensionError, ShapeError, SolverBreakdown

SYM_TOL = 1e-10


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with ``steps`` intervals."""

    T: float
    steps: int

    def __post_init__(self):
        if not (self.T > 0 and np.isfinite(self.T)):
            raise DimensionError(f"horizon must be positive, got {self.T}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise DimensionError(f"steps must be a positive integer, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.steps + 1, dtype=float) * self.dt
        t[-1] = self.T
        return t

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.steps * factor)


@dataclass(frozen=True)
class MatrixPath:
    """Values of a matrix-valued function at every node of a grid."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape[0] != self.grid.steps + 1:
            raise DimensionError("path length must equal steps + 1")

    def __getitem__(self, k):
        return self.values[k]

    def __len__(self):
        return self.values.shape[0]


def mat_exp(M, t: float = 1.0) -> np.ndarray:
    """exp(M t) by scaling and squaring with a Pade core (scipy's expm)."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"mat_exp needs a square matrix, got shape {M.shape}")
    return sla.expm(M * t)


def symmetrize(M, tol: float = SYM_TOL) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {M.shape}")
    asym = np.max(np.abs(M - M.T)) if M.size else 0.0
    if asym > tol * max(1.0, np.max(np.abs(M))):
        raise ShapeError(f"matrix is not symmetric (asymmetry {asym:.3e})")
    return 0.5 * (M + M.T)


def min_eig(M) -> float:
    """Smallest eigenvalue of a (numerically) symmetric matrix."""
    S = symmetrize(M)
    return float(np.linalg.eigvalsh(S)[0])


def max_eig(M) -> float:
    S = symmetrize(M)
    return float(np.linalg.eigvalsh(S)[-1])


def min_singular(M) -> float:
    return float(np.linalg.svd(np.asarray(M, dtype=float), compute_uv=False)[-1])


def integrate_backward_ode(rhs, terminal, grid: TimeGrid) -> MatrixPath:
    """Classical RK4 for Y' = rhs(t, Y) from Y(T) = terminal back to t = 0.

    ``rhs`` may return any array with the shape of ``terminal``. A non-finite
    value raises BlowUpError carrying the first bad node; a SolverBreakdown
    raised inside ``rhs`` is re-raised with the node attached.
    """
    Y = np.array(terminal, dtype=float)
    if not np.all(np.isfinite(Y)):
        raise BlowUpError("non-finite terminal value", node=grid.steps)
    t = grid.nodes
    h = grid.dt
    out = np.empty((grid.steps + 1,) + Y.shape)
    out[-1] = Y
    for k in range(grid.steps, 0, -1):
        tk = t[k]
        try:
            k1 = np.asarray(rhs(tk, Y))
            if k1.shape != Y.shape:
                raise DimensionError(f"rhs returned shape {k1.shape}, expected {Y.shape}")
            k2 = rhs(tk - h / 2, Y - (h / 2) * k1)
            k3 = rhs(tk - h / 2, Y - (h / 2) * k2)
            k4 = rhs(t[k - 1], Y - h * k3)
        except SolverBreakdown as exc:
            if exc.node is None:
                exc.node = k - 1
            raise
        Y = Y - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(Y)):
            raise BlowUpError(f"non-finite value at node {k - 1} (t={t[k - 1]:.6g})", node=k - 1)
        out[k - 1] = Y
    return MatrixPath(grid, out)


def fd_derivative(values: np.ndarray, h: float) -> np.ndarray:
    """Fourth-order finite-difference derivative along axis 0.

    Central five-point stencil in the interior, one-sided five-point stencils
    at the two nodes next to each end.
    """
    v = np.asarray(values, dtype=float)
    m = v.shape[0]
    if m < 5:
        raise DimensionError("need at least 5 nodes for a fourth-order derivative")
    d = np.empty_like(v)
    d[2:-2] = (v[:-4] - 8 * v[1:-3] + 8 * v[3:-1] - v[4:]) / (12 * h)
    fwd0 = np.array([-25, 48, -36, 16, -3]) / (12 * h)
    fwd1 = np.array([-3, -10, 18, -6, 1]) / (12 * h)
    d[0] = np.tensordot(fwd0, v[:5], axes=1)
    d[1] = np.tensordot(fwd1, v[:5], axes=1)
    d[-1] = -np.tensordot(fwd0, v[::-1][:5], axes=1)
    d[-2] = -np.tensordot(fwd1, v[::-1][:5], axes=1)
    return d


_PURPOSES = {}


def _purpose_id(purpose) -> int:
    if isinstance(purpose, int):
        return purpose
    if purpose not in _PURPOSES:
        _PURPOSES[purpose] = zlib.crc32(purpose.encode("utf-8"))
    return _PURPOSES[purpose]


@dataclass(frozen=True)
class RandomStreams:
    """Counter-based normal streams keyed by (seed, purpose, agent, path).

    Each key seeds an independent Philox generator; the k-th draw of a stream
    belongs to time step k, so a value never depends on which other streams
    were generated, or in what order.
    """

    seed: int

    def generator(self, purpose, agent: int, path: int) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.seed), spawn_key=(_purpose_id(purpose), int(agent), int(path))
        )
        return np.random.Generator(np.random.Philox(ss))

    def normals(self, purpose, agent: int, path: int, shape) -> np.ndarray:
        return self.generator(purpose, agent, path).standard_normal(shape)

    def block(self, purpose, agents, paths, steps: int, dim: int) -> np.ndarray:
        """Array of shape (len(paths), len(agents), steps, dim)."""
        agents = list(agents)
        paths = list(paths)
        out = np.empty((len(paths), len(agents), steps, dim))
        for ip, p in enumerate(paths):
            for ia, a in enumerate(agents):
                out[ip, ia] = self.normals(purpose, a, p, (steps, dim))
        return out
