"""Problem instance, (H1) validation, derived offsets and the compact
N-agent matrices."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, DimensionError, NonInvertibleError
from .numerics import SYM_TOL, TimeGrid, max_eig, min_eig

DEFAULT_COMPACT_CAP = 64


class VectorFunction:
    """Deterministic R^n-valued function of time.

    Either a constant vector or samples at increasing times, linearly
    interpolated in between (and held constant outside the sample range).
    """

    def __init__(self, value, times=None):
        v = np.array(value, dtype=float)
        if times is None:
            if v.ndim != 1:
                raise DimensionError("constant vector function needs a 1-d value")
            self.times = None
            self.values = v
        else:
            t = np.array(times, dtype=float)
            if v.ndim != 2 or v.shape[0] != t.shape[0]:
                raise DimensionError("sampled vector function needs values of shape (len(times), n)")
            if np.any(np.diff(t) <= 0):
                raise DimensionError("sample times must be strictly increasing")
            self.times = t
            self.values = v
        if not np.all(np.isfinite(self.values)):
            raise DimensionError("vector function has non-finite entries")

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    @property
    def is_constant(self) -> bool:
        return self.times is None

    def __call__(self, t):
        if self.times is None:
            if np.ndim(t) == 0:
                return self.values.copy()
            return np.broadcast_to(self.values, (np.size(t), self.dim)).copy()
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.stack([np.interp(ts, self.times, self.values[:, j]) for j in range(self.dim)], axis=-1)
        return out[0] if np.ndim(t) == 0 else out

    def map(self, M) -> "VectorFunction":
        """The function t -> M @ self(t)."""
        M = np.asarray(M, dtype=float)
        if self.times is None:
            return VectorFunction(M @ self.values)
        return VectorFunction(self.values @ M.T, self.times)

    def scaled(self, c: float) -> "VectorFunction":
        return VectorFunction(c * self.values, self.times)

    def is_zero(self) -> bool:
        return not np.any(self.values)

    def __eq__(self, other):
        if not isinstance(other, VectorFunction):
            return NotImplemented
        same_t = (self.times is None and other.times is None) or (
            self.times is not None and other.times is not None and np.array_equal(self.times, other.times)
        )
        return same_t and np.array_equal(self.values, other.values)


def _as_vf(v, n):
    if isinstance(v, VectorFunction):
        return v
    if v is None:
        return VectorFunction(np.zeros(n))
    return VectorFunction(v)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Coefficients of the agent dynamics and costs.

    Matrices: A, C0, Gamma, Gamma0 (n x n); B, D, D0 (n x r); Q, G (n x n
    symmetric); R (r x r); R0 (n x n). Offsets f, sigma, eta are vector
    functions of time; eta0 and x0 are vectors; T is the horizon.
    """

    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    C0: np.ndarray
    D0: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    R0: np.ndarray
    G: np.ndarray
    Gamma: np.ndarray
    Gamma0: np.ndarray
    f: VectorFunction
    sigma: VectorFunction
    eta: VectorFunction
    eta0: np.ndarray
    x0: np.ndarray
    T: float

    @staticmethod
    def build(A, Q, R, R0, *, B=None, D=None, C0=None, D0=None, G=None, Gamma=None, Gamma0=None,
              f=None, sigma=None, eta=None, eta0=None, x0=None, T=1.0) -> "ModelParams":
        """Construct with zero defaults for every optional coefficient."""
        A = np.atleast_2d(np.array(A, dtype=float))
        n = A.shape[0]
        R = np.atleast_2d(np.array(R, dtype=float))
        r = R.shape[0]

        def mat(M, rows, cols):
            return np.zeros((rows, cols)) if M is None else np.array(np.atleast_2d(M), dtype=float)

        def vec(v):
            return np.zeros(n) if v is None else np.array(np.atleast_1d(v), dtype=float)

        return ModelParams(
            A=A, B=mat(B, n, r), D=mat(D, n, r), C0=mat(C0, n, n), D0=mat(D0, n, r),
            Q=mat(Q, n, n), R=R, R0=mat(R0, n, n), G=mat(G, n, n),
            Gamma=mat(Gamma, n, n), Gamma0=mat(Gamma0, n, n),
            f=_as_vf(f, n), sigma=_as_vf(sigma, n), eta=_as_vf(eta, n),
            eta0=vec(eta0), x0=vec(x0), T=float(T),
        )

    def __post_init__(self):
        n, r = self.n, self.r
        shapes = {
            "A": (n, n), "B": (n, r), "D": (n, r), "C0": (n, n), "D0": (n, r), "Q": (n, n),
            "R": (r, r), "R0": (n, n), "G": (n, n), "Gamma": (n, n), "Gamma0": (n, n),
        }
        for name, shp in shapes.items():
            M = getattr(self, name)
            if M.shape != shp:
                raise DimensionError(f"{name} has shape {M.shape}, expected {shp}")
            if not np.all(np.isfinite(M)):
                raise DimensionError(f"{name} has non-finite entries")
        for name in ("f", "sigma", "eta"):
            if getattr(self, name).dim != n:
                raise DimensionError(f"{name} must have dimension {n}")
        for name in ("eta0", "x0"):
            if getattr(self, name).shape != (n,):
                raise DimensionError(f"{name} must have shape ({n},)")
        if not (self.T > 0 and np.isfinite(self.T)):
            raise DimensionError("horizon T must be positive")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def r(self) -> int:
        return self.R.shape[0]

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def scaled_costs(self, c: float) -> "ModelParams":
        """Joint scaling (Q, R, R0, G) -> c (Q, R, R0, G)."""
        return self.replace(Q=c * self.Q, R=c * self.R, R0=c * self.R0, G=c * self.G)

    def zero_offsets(self) -> "ModelParams":
        """Homogeneous version: zero f, sigma, eta, eta0 and zero initial state."""
        n = self.n
        z = VectorFunction(np.zeros(n))
        return self.replace(f=z, sigma=z, eta=z, eta0=np.zeros(n), x0=np.zeros(n))


@dataclass
class ValidationReport:
    ok: bool
    violations: list = field(default_factory=list)
    margins: dict = field(default_factory=dict)

    def to_dict(self):
        return {"ok": self.ok, "violations": list(self.violations), "margins": dict(self.margins)}


def _asym(M):
    return float(np.max(np.abs(M - M.T))) if M.size else 0.0


def validate_h1(p: ModelParams, tol: float = 0.0) -> ValidationReport:
    """Check Q >= 0, G >= 0, R > 0, R0 > 0 and symmetry; report, never raise."""
    viol = []
    margins = {}
    for name, strict in (("Q", False), ("G", False), ("R", True), ("R0", True)):
        M = getattr(p, name)
        if _asym(M) > SYM_TOL * max(1.0, np.max(np.abs(M))):
            viol.append(f"{name} symmetric")
            margins[name] = float("nan")
            continue
        lam = min_eig(M)
        margins[name] = lam
        if strict and not lam > tol:
            viol.append(f"{name} > 0")
        elif not strict and lam < -max(tol, 1e-12 * max(1.0, np.max(np.abs(M)))):
            viol.append(f"{name} >= 0")
    return ValidationReport(ok=not viol, violations=viol, margins=margins)


@dataclass(frozen=True, eq=False)
class DerivedQuantities:
    Xi1: np.ndarray
    Xi2: VectorFunction
    Xi1G: np.ndarray
    Xi2G: np.ndarray
    IG: np.ndarray
    Qm: np.ndarray  # Q - Xi1, assembled as (I - Gamma)^T Q (I - Gamma)
    Gm: np.ndarray  # G - Xi1^G, assembled as (I - Gamma0)^T G (I - Gamma0)


def derive_offsets(p: ModelParams) -> DerivedQuantities:
    """Population-coupling offsets and the matrix I^G = [I + R0^{-1}(G - Xi1^G)]^{-1}."""
    n = p.n
    Q, G, Gm, Gm0 = p.Q, p.G, p.Gamma, p.Gamma0
    Xi1 = Gm.T @ Q + Q @ Gm - Gm.T @ Q @ Gm
    Xi1G = Gm0.T @ G + G @ Gm0 - Gm0.T @ G @ Gm0
    Xi2 = p.eta.map(Q - Gm.T @ Q)
    Xi2G = G @ p.eta0 - Gm0.T @ G @ p.eta0
    I = np.eye(n)
    Qm = (I - Gm).T @ Q @ (I - Gm)
    GmG = (I - Gm0).T @ G @ (I - Gm0)
    Qm, GmG = 0.5 * (Qm + Qm.T), 0.5 * (GmG + GmG.T)
    M = I + np.linalg.solve(p.R0, GmG)
    if np.linalg.cond(M) > 1e12:
        raise NonInvertibleError("I + R0^{-1}(G - Xi1^G) is singular")
    IG = np.linalg.inv(M)
    return DerivedQuantities(Xi1=0.5 * (Xi1 + Xi1.T), Xi2=Xi2, Xi1G=0.5 * (Xi1G + Xi1G.T), Xi2G=Xi2G, IG=IG,
                             Qm=Qm, Gm=GmG)


@dataclass(frozen=True, eq=False)
class CompactModel:
    N: int
    Qhat: np.ndarray
    Ghat: np.ndarray
    eta_hat: VectorFunction
    eta0_hat: np.ndarray
    blocks: list

    def gamma_gram(self) -> np.ndarray:
        """Sum of Gamma_i^T Gamma_i over agents."""
        return sum(Gi.T @ Gi for Gi in self.blocks)


def block_map(Gamma, i: int, N: int) -> np.ndarray:
    """The n x nN map X -> x_i - Gamma x^(N)."""
    n = Gamma.shape[0]
    row = np.tile(-Gamma / N, (1, N))
    row[:, i * n:(i + 1) * n] += np.eye(n)
    return row


def build_compact(p: ModelParams, N: int, d: DerivedQuantities | None = None,
                  cap: int = DEFAULT_COMPACT_CAP) -> CompactModel:
    if N < 1:
        raise DimensionError("N must be at least 1")
    n = p.n
    if N * n > cap:
        raise CapacityError(f"compact dimension {N * n} exceeds cap {cap}")
    d = d or derive_offsets(p)
    ones = np.ones((N, N))
    Qhat = np.kron(np.eye(N), p.Q) - np.kron(ones, d.Xi1) / N
    Ghat = np.kron(np.eye(N), p.G) - np.kron(ones, d.Xi1G) / N
    eta_hat = d.Xi2.map(np.kron(np.ones((N, 1)), np.eye(n)))
    eta0_hat = np.kron(np.ones(N), d.Xi2G)
    blocks = [block_map(p.Gamma, i, N) for i in range(N)]
    return CompactModel(N=N, Qhat=0.5 * (Qhat + Qhat.T), Ghat=0.5 * (Ghat + Ghat.T),
                        eta_hat=eta_hat, eta0_hat=eta0_hat, blocks=blocks)


def sandwich_margins(p: ModelParams, cm: CompactModel) -> tuple[float, float]:
    """Eigen-margins of Qhat - lmin(Q) S and lmax(Q) S - Qhat, with S = sum Gamma_i^T Gamma_i."""
    S = cm.gamma_gram()
    lo = min_eig(cm.Qhat - min_eig(p.Q) * S)
    hi = min_eig(max_eig(p.Q) * S - cm.Qhat)
    return lo, hi


def default_grid(p: ModelParams, steps: int) -> TimeGrid:
    return TimeGrid(p.T, steps)
