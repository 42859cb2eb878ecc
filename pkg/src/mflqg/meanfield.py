"""Consistency-condition solver and decentralized strategy synthesis.

The common-noise state is X = (xhat, h). The backward variables
Y = (phat, y, phi) and their W0-diffusions Z = (beta0hat, z, phi0) are
sought as affine functions of X,

    Y = Pi(t) X + pi(t),    Z = L(t) X + ell(t).

Here phi is the common-noise part of the agent adjoint, k_i = P(t) x_i + phi,
with P the agent Riccati solution. Matching drift and diffusion terms turns
the whole system into terminal-value ODEs for (P, Pi, pi). The diffusion
identity Z = Pi * (diffusion of X) is implicit in Z, because the strategy
feeds Z back into the diffusion of xhat; it is solved by one linear system
per evaluation.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, NonInvertibleError, ScenarioIOError
from .model import DerivedQuantities, ModelParams, derive_offsets
from .numerics import TimeGrid, fd_derivative, integrate_backward_ode

SOLUTION_VERSION = 1
COND_LIMIT = 1e12


class _Layout:
    """Column layout of the stacked vector v = (X, Y, Z, 1)."""

    def __init__(self, n):
        self.n = n
        self.nX, self.nY = 2 * n, 3 * n
        self.dim = 8 * n + 1
        self.one = 8 * n

    def sel(self, start):
        M = np.zeros((self.n, self.dim))
        M[:, start:start + self.n] = np.eye(self.n)
        return M

    def const(self, vec):
        M = np.zeros((len(vec), self.dim))
        M[:, self.one] = vec
        return M


@dataclass
class _Maps:
    """Linear maps (rows x dim) of the stacked vector at one time."""

    drift: np.ndarray  # forward drift of X
    diff: np.ndarray  # forward W0-diffusion of X
    back: np.ndarray  # c in dY = -c dt + Z dW0
    kappa: np.ndarray  # control offset: u_i = -Kx x_i - kappa
    s0: np.ndarray  # worst-case volatility -R0^{-1} beta0hat
    g2: np.ndarray
    rho: np.ndarray
    q: np.ndarray  # linear state weight of the agent problem
    Kx: np.ndarray
    Sigma: np.ndarray


class _System:
    """Coefficient assembly for the consistency system of one model."""

    def __init__(self, p: ModelParams, d: DerivedQuantities):
        self.p, self.d = p, d
        n = p.n
        self.lay = lay = _Layout(n)
        self.R0inv = np.linalg.inv(p.R0)
        self.xh, self.h = lay.sel(0), lay.sel(n)
        self.ph, self.y, self.phi = lay.sel(2 * n), lay.sel(3 * n), lay.sel(4 * n)
        self.b0, self.z, self.phi0 = lay.sel(5 * n), lay.sel(6 * n), lay.sel(7 * n)

    def terminal(self):
        p, d = self.p, self.d
        n = p.n
        Pi = np.zeros((3 * n, 2 * n))
        Pi[:n, :n] = -d.Gm
        Pi[n:2 * n, :n] = d.Gm
        Pi[2 * n:, :n] = -d.Xi1G
        pi = np.concatenate([d.Xi2G, -d.Xi2G, -d.Xi2G])
        return p.G.copy(), Pi, pi

    def p_rhs(self, P):
        p = self.p
        Sig = p.R + p.D.T @ P @ p.D + p.D0.T @ P @ p.D0
        S = P @ p.B + p.C0.T @ P @ p.D0
        F = P @ p.A + p.A.T @ P + p.C0.T @ P @ p.C0 + p.Q - S @ np.linalg.solve(Sig, S.T)
        return -0.5 * (F + F.T)

    def maps(self, t, P) -> _Maps:
        p, d, lay = self.p, self.d, self.lay
        A, B, D, C0, D0 = p.A, p.B, p.D, p.C0, p.D0
        Gm, Qm = d.Gm, d.Qm
        Sig = p.R + D.T @ P @ D + D0.T @ P @ D0
        Kx = np.linalg.solve(Sig, B.T @ P + D0.T @ P @ C0)
        f, sig, Xi2 = p.f(t), p.sigma(t), d.Xi2(t)
        s0 = -self.R0inv @ self.b0
        g2 = d.IG @ (C0 @ self.h + self.R0inv @ (self.z + self.b0))
        rho = B.T @ Gm @ self.h + D0.T @ Gm @ g2
        kappa = np.linalg.solve(Sig, B.T @ self.phi + D0.T @ (P @ s0 + self.phi0)
                                + lay.const(D.T @ P @ sig) + rho)
        uhat = -Kx @ self.xh - kappa
        Kterm = A.T @ Gm @ self.h + Gm @ A @ self.h + C0.T @ Gm @ g2
        q = -d.Xi1 @ self.xh - lay.const(Xi2) + Qm @ self.h + Kterm
        drift = np.vstack([A @ self.xh + B @ uhat + lay.const(f), A @ self.h])
        diff = np.vstack([C0 @ self.xh + D0 @ uhat + s0, g2])
        c_ph = A.T @ self.ph + C0.T @ self.b0 - Qm @ self.xh + lay.const(Xi2)
        c_y = A.T @ self.y + C0.T @ self.z + Qm @ self.h + Qm @ self.xh - lay.const(Xi2) - Kterm
        c_phi = (A.T @ self.phi + C0.T @ self.phi0 + C0.T @ P @ s0 + q + lay.const(P @ f)
                 - (P @ B + C0.T @ P @ D0) @ kappa)
        back = np.vstack([c_ph, c_y, c_phi])
        return _Maps(drift, diff, back, kappa, s0, g2, rho, q, Kx, Sig)

    def split(self, M):
        lay = self.lay
        return (M[:, :lay.nX], M[:, lay.nX:lay.nX + lay.nY], M[:, lay.nX + lay.nY:lay.one], M[:, lay.one])

    def z_map(self, mp: _Maps, Pi, pi):
        """Solve Z = Pi (bX X + bY Y + bZ Z + b0) with Y = Pi X + pi."""
        bX, bY, bZ, b0 = self.split(mp.diff)
        Mz = np.eye(Pi.shape[0]) - Pi @ bZ
        if np.linalg.cond(Mz) > COND_LIMIT:
            raise NonInvertibleError("diffusion identity for Z is singular")
        L = np.linalg.solve(Mz, Pi @ (bX + bY @ Pi))
        ell = np.linalg.solve(Mz, Pi @ (bY @ pi + b0))
        return L, ell

    def closed(self, M, Pi, pi, L, ell):
        """Affine-in-X form (gain, offset) of a linear map M of v."""
        mX, mY, mZ, m0 = self.split(M)
        return mX + mY @ Pi + mZ @ L, mY @ pi + mZ @ ell + m0

    def pi_rhs(self, t, P, Pi, pi):
        mp = self.maps(t, P)
        L, ell = self.z_map(mp, Pi, pi)
        aX, aY, aZ, a0 = self.split(mp.drift)
        cX, cY, cZ, c0 = self.split(mp.back)
        dPi = -(Pi @ (aX + aY @ Pi + aZ @ L) + cX + cY @ Pi + cZ @ L)
        dpi = -(Pi @ (aY @ pi + aZ @ ell + a0) + cY @ pi + cZ @ ell + c0)
        return dPi, dpi


class _Packer:
    def __init__(self, n):
        self.n = n
        self.sizes = [n * n, 6 * n * n, 3 * n]

    def pack(self, P, Pi, pi):
        return np.concatenate([P.ravel(), Pi.ravel(), pi.ravel()])

    def unpack(self, v):
        n = self.n
        a, b = self.sizes[0], self.sizes[0] + self.sizes[1]
        return v[:a].reshape(n, n), v[a:b].reshape(3 * n, 2 * n), v[b:]


@dataclass
class StrategyMap:
    """u_i(t_k) = -Kx[k] x_i - kappa_X[k] X - kappa_c[k], with X = (xhat, h)."""

    Kx: np.ndarray
    kappa_X: np.ndarray
    kappa_c: np.ndarray

    def control(self, k, x_i, X):
        return -(x_i @ self.Kx[k].T) - X @ self.kappa_X[k].T - self.kappa_c[k]


@dataclass
class ConsistencySolution:
    p: ModelParams
    d: DerivedQuantities
    grid: TimeGrid
    method: str
    P: np.ndarray  # (M+1, n, n)
    Pi: np.ndarray  # (M+1, 3n, 2n)
    pi: np.ndarray  # (M+1, 3n)
    iterations: int = 0
    residuals: dict = field(default_factory=dict)

    def __post_init__(self):
        sysm = _System(self.p, self.d)
        self._sys = sysm
        m = self.grid.steps + 1
        n, r = self.p.n, self.p.r
        self.L = np.empty((m, 3 * n, 2 * n))
        self.ell = np.empty((m, 3 * n))
        self.fX = np.empty((m, 2 * n, 2 * n))
        self.fc = np.empty((m, 2 * n))
        self.gX = np.empty((m, 2 * n, 2 * n))
        self.gc = np.empty((m, 2 * n))
        self.cX = np.empty((m, 3 * n, 2 * n))
        self.cc = np.empty((m, 3 * n))
        self.Kx = np.empty((m, r, n))
        self.kX = np.empty((m, r, 2 * n))
        self.kc = np.empty((m, r))
        self.sX = np.empty((m, n, 2 * n))
        self.sc = np.empty((m, n))
        self.g2X = np.empty((m, n, 2 * n))
        self.g2c = np.empty((m, n))
        self.rhoX = np.empty((m, r, 2 * n))
        self.rhoc = np.empty((m, r))
        self.Sigma = np.empty((m, r, r))
        for k, t in enumerate(self.grid.nodes):
            mp = sysm.maps(t, self.P[k])
            L, ell = sysm.z_map(mp, self.Pi[k], self.pi[k])
            self.L[k], self.ell[k] = L, ell
            args = (self.Pi[k], self.pi[k], L, ell)
            self.fX[k], self.fc[k] = sysm.closed(mp.drift, *args)
            self.gX[k], self.gc[k] = sysm.closed(mp.diff, *args)
            self.cX[k], self.cc[k] = sysm.closed(mp.back, *args)
            self.kX[k], self.kc[k] = sysm.closed(mp.kappa, *args)
            self.sX[k], self.sc[k] = sysm.closed(mp.s0, *args)
            self.g2X[k], self.g2c[k] = sysm.closed(mp.g2, *args)
            self.rhoX[k], self.rhoc[k] = sysm.closed(mp.rho, *args)
            self.Kx[k] = mp.Kx
            self.Sigma[k] = mp.Sigma

    @property
    def n(self):
        return self.p.n

    @property
    def strategy(self) -> StrategyMap:
        return StrategyMap(self.Kx, self.kX, self.kc)

    def X0(self):
        return np.concatenate([self.p.x0, np.zeros(self.n)])

    def backward(self, k, X):
        """(Y, Z) at node k for common-noise states X of shape (..., 2n)."""
        return X @ self.Pi[k].T + self.pi[k], X @ self.L[k].T + self.ell[k]

    def named(self, k, X):
        """Dictionary of every process value at node k."""
        n = self.n
        Y, Z = self.backward(k, X)
        return {
            "xhat": X[..., :n], "h": X[..., n:], "phat": Y[..., :n], "y": Y[..., n:2 * n],
            "phi": Y[..., 2 * n:], "beta0": Z[..., :n], "z": Z[..., n:2 * n], "phi0": Z[..., 2 * n:],
            "g2": X @ self.g2X[k].T + self.g2c[k], "sigma0": X @ self.sX[k].T + self.sc[k],
            "kbar": X[..., :n] @ self.P[k].T + Y[..., 2 * n:],
        }

    def simulate_common(self, dW0: np.ndarray) -> np.ndarray:
        """Euler paths of X for W0 increments of shape (paths, M, 1); returns (paths, M+1, 2n)."""
        paths, M = dW0.shape[0], dW0.shape[1]
        if M != self.grid.steps:
            raise ValueError("increment count must match the grid")
        X = np.empty((paths, M + 1, 2 * self.n))
        X[:, 0] = self.X0()
        dt = self.grid.dt
        for k in range(M):
            Xk = X[:, k]
            X[:, k + 1] = (Xk + dt * (Xk @ self.fX[k].T + self.fc[k])
                           + dW0[:, k] * (Xk @ self.gX[k].T + self.gc[k]))
        return X

    def sup_norm(self) -> float:
        return float(max(np.max(np.abs(self.P)), np.max(np.abs(self.Pi)), np.max(np.abs(self.pi))))


def _solve_affine(sysm: _System, grid: TimeGrid):
    pk = _Packer(sysm.p.n)
    P_T, Pi_T, pi_T = sysm.terminal()

    def rhs(t, v):
        P, Pi, pi = pk.unpack(v)
        dP = sysm.p_rhs(P)
        dPi, dpi = sysm.pi_rhs(t, P, Pi, pi)
        return pk.pack(dP, dPi, dpi)

    path = integrate_backward_ode(rhs, pk.pack(P_T, Pi_T, pi_T), grid)
    parts = [pk.unpack(v) for v in path.values]
    return (np.array([a for a, _, _ in parts]), np.array([b for _, b, _ in parts]),
            np.array([c for _, _, c in parts]))


def _hermite(values, slopes, nodes, h):
    """Cubic Hermite interpolant through node values with given slopes."""

    def ev(t):
        k = min(int(np.floor(t / h + 1e-12)), len(nodes) - 2)
        k = max(k, 0)
        s = (t - nodes[k]) / h
        h00 = 2 * s ** 3 - 3 * s ** 2 + 1
        h10 = s ** 3 - 2 * s ** 2 + s
        h01 = -2 * s ** 3 + 3 * s ** 2
        h11 = s ** 3 - s ** 2
        return h00 * values[k] + h10 * h * slopes[k] + h01 * values[k + 1] + h11 * h * slopes[k + 1]

    return ev


def _picard_window(sysm, pk, t0, steps, h, P_T, Pi_T, pi_T, damping, max_iter, tol, node0):
    """Damped fixed point on one window [t0, t0 + steps h].

    The feedback of Y into the forward equation is frozen at the previous
    iterate; the diffusion identity for Z stays implicit in the current
    unknown, since its self-gain can be large. Each sweep is one RK4 pass
    followed by relaxation."""
    sub = TimeGrid(steps * h, steps)
    nodes = sub.nodes
    m = steps + 1
    Pi_old = np.broadcast_to(Pi_T, (m,) + Pi_T.shape).copy()
    pi_old = np.broadcast_to(pi_T, (m,) + pi_T.shape).copy()
    changes = []
    for it in range(1, max_iter + 1):
        Pi_i = _hermite(Pi_old, fd_derivative(Pi_old, h), nodes, h)
        pi_i = _hermite(pi_old, fd_derivative(pi_old, h), nodes, h)

        def rhs(s, v):
            P, Pi, pi = pk.unpack(v)
            mp = sysm.maps(t0 + s, P)
            Pt, pt = Pi_i(s), pi_i(s)
            aX, aY, aZ, a0 = sysm.split(mp.drift)
            bX, bY, bZ, b0 = sysm.split(mp.diff)
            cX, cY, cZ, c0 = sysm.split(mp.back)
            # Y enters the forward coefficients through the frozen iterate;
            # the Z identity is solved with the current Pi.
            Mz = np.eye(Pi.shape[0]) - Pi @ bZ
            if np.linalg.cond(Mz) > COND_LIMIT:
                raise NonInvertibleError("diffusion identity for Z is singular")
            L = np.linalg.solve(Mz, Pi @ (bX + bY @ Pt))
            ell = np.linalg.solve(Mz, Pi @ (bY @ pt + b0))
            dPi = -(Pi @ (aX + aY @ Pt + aZ @ L) + cX + cY @ Pi + cZ @ L)
            dpi = -(Pi @ (aY @ pt + aZ @ ell + a0) + cY @ pi + cZ @ ell + c0)
            return pk.pack(sysm.p_rhs(P), dPi, dpi)

        path = integrate_backward_ode(rhs, pk.pack(P_T, Pi_T, pi_T), sub)
        parts = [pk.unpack(v) for v in path.values]
        P_new = np.array([a for a, _, _ in parts])
        Pi_raw = np.array([b for _, b, _ in parts])
        pi_raw = np.array([c for _, _, c in parts])
        # stop on the undamped fixed-point residual, which damping would understate
        change = max(np.max(np.abs(Pi_raw - Pi_old)), np.max(np.abs(pi_raw - pi_old)))
        changes.append(change)
        scale = 1.0 + max(np.max(np.abs(Pi_raw)), np.max(np.abs(pi_raw)))
        if change < tol * scale:
            return P_new, Pi_raw, pi_raw, it
        Pi_old = (1 - damping) * Pi_old + damping * Pi_raw
        pi_old = (1 - damping) * pi_old + damping * pi_raw
        if len(changes) >= 6 and all(changes[-j] > changes[-j - 1] for j in range(1, 6)):
            raise DivergenceError(f"Picard change grew for 5 successive iterations (last {change:.3e})",
                                  node=node0)
    raise DivergenceError(f"Picard did not converge in {max_iter} iterations "
                          f"(last change {changes[-1]:.3e})", node=node0)


def _solve_picard(sysm: _System, grid: TimeGrid, damping=0.5, max_iter=200, tol=1e-9, window=8):
    """Windowed damped Picard iteration, marching backward window by window.

    Each window of ``window`` steps is iterated to convergence and its value
    at the left end becomes the terminal value of the next window."""
    if window < 4:
        raise ValueError("window must span at least 4 steps")
    pk = _Packer(sysm.p.n)
    P_T, Pi_T, pi_T = sysm.terminal()
    M, h = grid.steps, grid.dt
    P_all = np.empty((M + 1,) + P_T.shape)
    Pi_all = np.empty((M + 1,) + Pi_T.shape)
    pi_all = np.empty((M + 1,) + pi_T.shape)
    P_all[M], Pi_all[M], pi_all[M] = P_T, Pi_T, pi_T
    end = M
    total = 0
    while end > 0:
        start = max(0, end - window)
        if end - start < 4:
            start = max(0, end - 4)
        steps = end - start
        if steps < 4:
            raise ValueError("grid needs at least 4 steps for the Picard solver")
        Pw, Piw, piw, its = _picard_window(sysm, pk, start * h, steps, h, P_all[end], Pi_all[end],
                                           pi_all[end], damping, max_iter, tol, start)
        P_all[start:end + 1], Pi_all[start:end + 1], pi_all[start:end + 1] = Pw, Piw, piw
        total = max(total, its)
        end = start
    return P_all, Pi_all, pi_all, total


def solve_consistency(p: ModelParams, d: DerivedQuantities | None, grid: TimeGrid,
                      method: str = "affine", **picard_opts) -> ConsistencySolution:
    """Solve the consistency system; ``method`` is 'affine' or 'picard'."""
    d = d or derive_offsets(p)
    sysm = _System(p, d)
    if method == "affine":
        P, Pi, pi = _solve_affine(sysm, grid)
        its = 0
    elif method == "picard":
        P, Pi, pi, its = _solve_picard(sysm, grid, **picard_opts)
    else:
        raise ValueError(f"unknown method {method!r}")
    return ConsistencySolution(p, d, grid, method, P, Pi, pi, iterations=its)


# ---------------------------------------------------------------------------
# Standalone sub-systems


def solve_linear_fbsde(coeffs, Pi_T, pi_T, grid: TimeGrid):
    """Decouple dX = (aX X + aY Y + aZ Z + a0) dt + (bX X + bY Y + bZ Z + b0) dW0,
    dY = -(cX X + cY Y + cZ Z + c0) dt + Z dW0 with Y = Pi X + pi.

    ``coeffs(t)`` returns the twelve blocks in that order. Returns node arrays
    (Pi, pi, L, ell) with Z = L X + ell."""
    nY, nX = Pi_T.shape

    def zsolve(cf, Pi, pi):
        _, _, _, _, bX, bY, bZ, b0 = cf[:8]
        Mz = np.eye(nY) - Pi @ bZ
        if np.linalg.cond(Mz) > COND_LIMIT:
            raise NonInvertibleError("diffusion identity for Z is singular")
        return np.linalg.solve(Mz, Pi @ (bX + bY @ Pi)), np.linalg.solve(Mz, Pi @ (bY @ pi + b0))

    def rhs(t, v):
        Pi, pi = v[:nY * nX].reshape(nY, nX), v[nY * nX:]
        cf = coeffs(t)
        aX, aY, aZ, a0 = cf[:4]
        cX, cY, cZ, c0 = cf[8:]
        L, ell = zsolve(cf, Pi, pi)
        dPi = -(Pi @ (aX + aY @ Pi + aZ @ L) + cX + cY @ Pi + cZ @ L)
        dpi = -(Pi @ (aY @ pi + aZ @ ell + a0) + cY @ pi + cZ @ ell + c0)
        return np.concatenate([dPi.ravel(), dpi])

    path = integrate_backward_ode(rhs, np.concatenate([np.ravel(Pi_T), pi_T]), grid)
    Pis = path.values[:, :nY * nX].reshape(-1, nY, nX)
    pis = path.values[:, nY * nX:]
    Ls, ells = [], []
    for k, t in enumerate(grid.nodes):
        L, ell = zsolve(coeffs(t), Pis[k], pis[k])
        Ls.append(L)
        ells.append(ell)
    return Pis, pis, np.array(Ls), np.array(ells)


def solve_limit_pair(p: ModelParams, d: DerivedQuantities | None, U_X, u_c, grid: TimeGrid):
    """Limit pair (xhat, phat, beta0hat) for a given control uhat = U_X(t) xhat + u_c(t).

    ``U_X`` and ``u_c`` are callables of t. Returns (Pi, pi, L, ell) with
    phat = Pi xhat + pi and beta0hat = L xhat + ell at the grid nodes."""
    d = d or derive_offsets(p)
    n = p.n
    R0i = np.linalg.inv(p.R0)
    Z0 = np.zeros((n, n))

    def coeffs(t):
        UX, uc = np.atleast_2d(U_X(t)), np.atleast_1d(u_c(t))
        return (p.A + p.B @ UX, Z0, Z0, p.B @ uc + p.f(t),
                p.C0 + p.D0 @ UX, Z0, -R0i, p.D0 @ uc,
                -d.Qm, p.A.T, p.C0.T, d.Xi2(t))

    return solve_linear_fbsde(coeffs, -d.Gm, d.Xi2G.copy(), grid)


def solve_hyz(p: ModelParams, d: DerivedQuantities | None, xhat_rep, beta_rep, grid: TimeGrid):
    """(h, y, z) for a given affine common-noise model of xhat.

    ``xhat_rep(t)`` returns (FX, fc, GX, gc): drift FX xhat + fc and diffusion
    GX xhat + gc of xhat. ``beta_rep(t)`` returns (LX, lc) with
    beta0hat = LX xhat + lc. The state is (xhat, h); returns (Pi, pi, L, ell)
    with y = Pi (xhat, h) + pi and z = L (xhat, h) + ell."""
    d = d or derive_offsets(p)
    n = p.n
    R0i = np.linalg.inv(p.R0)
    IG, Gm, Qm = d.IG, d.Gm, d.Qm
    A, C0 = p.A, p.C0
    Zn = np.zeros((n, n))

    def coeffs(t):
        FX, fc, GX, gc = xhat_rep(t)
        LX, lc = beta_rep(t)
        # g2 = IG (C0 h + R0^{-1}(z + LX xhat + lc))
        g2X = np.hstack([IG @ R0i @ LX, IG @ C0])
        g2Z = IG @ R0i
        g2c = IG @ R0i @ lc
        aX = np.block([[FX, Zn], [Zn, A]])
        bX = np.vstack([np.hstack([GX, Zn]), g2X])
        bZ = np.vstack([Zn, g2Z])
        K = A.T @ Gm + Gm @ A
        cX = np.hstack([Qm, Qm - K]) - C0.T @ Gm @ g2X
        cZ = C0.T - C0.T @ Gm @ g2Z
        c0 = -d.Xi2(t) - C0.T @ Gm @ g2c
        return (aX, np.zeros((2 * n, n)), np.zeros((2 * n, n)), np.concatenate([fc, np.zeros(n)]),
                bX, np.zeros((2 * n, n)), bZ, np.concatenate([gc, g2c]),
                cX, A.T, cZ, c0)

    Pi_T = np.hstack([Gm, Zn])
    return solve_linear_fbsde(coeffs, Pi_T, -d.Xi2G, grid)


# ---------------------------------------------------------------------------
# Agent level


@dataclass
class AgentPaths:
    k: np.ndarray
    zeta0: np.ndarray
    zeta_i: np.ndarray
    u: np.ndarray


def agent_bsde(cs: ConsistencySolution, x_path: np.ndarray, X_path: np.ndarray) -> AgentPaths:
    """Agent adjoint (k_i, zeta0, zeta_i) and control along given paths.

    ``x_path`` (M+1, n) is the agent state and ``X_path`` (M+1, 2n) the common
    state on the solution grid."""
    p = cs.p
    M = cs.grid.steps
    n, r = p.n, p.r
    ks, z0s, zis, us = (np.empty((M + 1, n)), np.empty((M + 1, n)), np.empty((M + 1, n)),
                        np.empty((M + 1, r)))
    for j, t in enumerate(cs.grid.nodes):
        x, X = x_path[j], X_path[j]
        v = cs.named(j, X)
        u = cs.strategy.control(j, x, X)
        P = cs.P[j]
        ks[j] = P @ x + v["phi"]
        z0s[j] = P @ (p.C0 @ x + p.D0 @ u + v["sigma0"]) + v["phi0"]
        zis[j] = P @ (p.D @ u + p.sigma(t))
        us[j] = u
    return AgentPaths(ks, z0s, zis, us)


def worst_case_volatility(cs: ConsistencySolution):
    """Evaluator (k, X) -> sigma0hat = -R0^{-1} beta0hat at node k."""

    def sigma0(k, X):
        return X @ cs.sX[k].T + cs.sc[k]

    return sigma0


# ---------------------------------------------------------------------------
# Residuals


def residuals(cs: ConsistencySolution, paths: int = 64, seed: int = 0) -> dict:
    """RMS residuals of the six rows (x, k, phat, y, h, boundary) along sampled paths.

    Drift rows compare the Ito drift of each affine representation, with time
    derivatives taken by fourth-order finite differences of the stored node
    values, against the prescribed backward drift. Diffusion rows check the
    implicit identities (Z against Pi times the X diffusion, stationarity of
    the control, the g2 fixed point). Each row is divided by 1 + RMS norm of
    the solution along the same paths."""
    from .numerics import RandomStreams

    p, d = cs.p, cs.d
    n, M, dt = p.n, cs.grid.steps, cs.grid.dt
    rs = RandomStreams(seed)
    dW0 = rs.block("residual-w0", [0], range(paths), M, 1)[:, 0] * np.sqrt(dt)
    dWi = rs.block("residual-wi", [1], range(paths), M, 1)[:, 0] * np.sqrt(dt)
    X = cs.simulate_common(dW0)
    # one agent per path, driven by its own W_i
    x = np.empty((paths, M + 1, n))
    x[:, 0] = p.x0
    strat = cs.strategy
    for k in range(M):
        t = cs.grid.nodes[k]
        u = strat.control(k, x[:, k], X[:, k])
        s0 = X[:, k] @ cs.sX[k].T + cs.sc[k]
        x[:, k + 1] = (x[:, k] + dt * (x[:, k] @ p.A.T + u @ p.B.T + p.f(t))
                       + dW0[:, k] * (x[:, k] @ p.C0.T + u @ p.D0.T + s0)
                       + (u @ p.D.T + p.sigma(t)) * dWi[:, k])

    dPi = fd_derivative(cs.Pi, dt)
    dpi = fd_derivative(cs.pi, dt)
    dP = fd_derivative(cs.P, dt)
    rows = {key: [] for key in ("x", "k", "phat", "y", "h", "boundary")}
    norms = []
    R0i = np.linalg.inv(p.R0)
    for k, t in enumerate(cs.grid.nodes):
        Xk, xk = X[:, k], x[:, k]
        v = cs.named(k, Xk)
        Y, Z = cs.backward(k, Xk)
        fX = Xk @ cs.fX[k].T + cs.fc[k]
        gX = Xk @ cs.gX[k].T + cs.gc[k]
        norms.append(np.concatenate([Xk, Y, Z, xk], axis=1))
        # Ito drift and diffusion of Y = Pi X + pi
        dY = Xk @ dPi[k].T + dpi[k] + fX @ cs.Pi[k].T
        zY = gX @ cs.Pi[k].T
        c = Xk @ cs.cX[k].T + cs.cc[k]
        for name, sl in (("phat", slice(0, n)), ("y", slice(n, 2 * n))):
            rows[name].append(np.concatenate([dY[:, sl] + c[:, sl], Z[:, sl] - zY[:, sl]], axis=1))
        # x row: conditional mean of the agent coefficients equals the xhat coefficients
        uhat = strat.control(k, v["xhat"], Xk)
        drift_mean = v["xhat"] @ p.A.T + uhat @ p.B.T + p.f(t)
        diff_mean = v["xhat"] @ p.C0.T + uhat @ p.D0.T + v["sigma0"]
        rows["x"].append(np.concatenate([drift_mean - fX[:, :n], diff_mean - gX[:, :n]], axis=1))
        # k row: k = P x + phi solves the agent BSDE and the control is stationary
        u = strat.control(k, xk, Xk)
        P = cs.P[k]
        drift_x = xk @ p.A.T + u @ p.B.T + p.f(t)
        diff0_x = xk @ p.C0.T + u @ p.D0.T + v["sigma0"]
        diffi_x = u @ p.D.T + p.sigma(t)
        kk = xk @ P.T + v["phi"]
        zeta0 = diff0_x @ P.T + v["phi0"]
        zetai = diffi_x @ P.T
        g2 = v["g2"]
        Kterm = v["h"] @ (p.A.T @ d.Gm + d.Gm @ p.A).T + g2 @ (p.C0.T @ d.Gm).T
        drift_k = xk @ dP[k].T + drift_x @ P.T + dY[:, 2 * n:]
        target = -(kk @ p.A + zeta0 @ p.C0 + xk @ p.Q.T - v["xhat"] @ d.Xi1.T + v["h"] @ d.Qm.T
                   - d.Xi2(t) + Kterm)
        stat = (u @ p.R.T + kk @ p.B + zeta0 @ p.D0 + zetai @ p.D + v["h"] @ (p.B.T @ d.Gm).T
                + g2 @ (p.D0.T @ d.Gm).T)
        phi0_id = v["phi0"] - zY[:, 2 * n:]
        rows["k"].append(np.concatenate([drift_k - target, stat, phi0_id], axis=1))
        # h row: g2 solves (I + R0^{-1} Gm) g2 = C0 h + R0^{-1}(z + beta0)
        lhs = g2 + g2 @ (R0i @ d.Gm).T
        rhs = v["h"] @ p.C0.T + (v["z"] + v["beta0"]) @ R0i.T
        rows["h"].append(np.concatenate([lhs - rhs, gX[:, n:] - g2], axis=1))
        if k == 0:
            rows["boundary"].append(np.concatenate([v["h"], v["xhat"] - p.x0, np.zeros((paths, 2 * n))], axis=1))
        if k == M:
            xT = v["xhat"]
            rows["boundary"].append(np.concatenate([
                v["kbar"] - (xT @ d.Gm.T - d.Xi2G),
                v["phat"] - (-xT @ d.Gm.T + d.Xi2G),
                v["y"] - (xT @ d.Gm.T - d.Xi2G),
                kk - (xk @ p.G.T - xT @ d.Xi1G.T - d.Xi2G)], axis=1))
    scale = float(np.sqrt(np.mean(np.sum(np.concatenate(norms, axis=0) ** 2, axis=1))))
    out = {}
    for name, parts in rows.items():
        R = np.concatenate(parts, axis=0)
        rms = float(np.sqrt(np.mean(np.sum(R ** 2, axis=1))))
        out[name] = rms / (1.0 + scale)
    out["solution_scale"] = scale
    return out


# ---------------------------------------------------------------------------
# Serialization


_FIELDS = ("P", "Pi", "pi")


def _fmt(x):
    return format(float(x), ".17g")


def save_solution(cs: ConsistencySolution, directory: str) -> list:
    """CSV per coefficient (one row per node, entries row-major) plus meta.json."""
    try:
        os.makedirs(directory, exist_ok=True)
        files = []
        for name in _FIELDS:
            arr = getattr(cs, name)
            flat = arr.reshape(arr.shape[0], -1)
            path = os.path.join(directory, f"{name}.csv")
            with open(path, "w", newline="\n") as fh:
                fh.write("t," + ",".join(f"c{j}" for j in range(flat.shape[1])) + "\n")
                for t, row in zip(cs.grid.nodes, flat):
                    fh.write(_fmt(t) + "," + ",".join(_fmt(v) for v in row) + "\n")
            files.append(path)
        meta = {"version": SOLUTION_VERSION, "n": cs.p.n, "r": cs.p.r, "T": cs.grid.T,
                "steps": cs.grid.steps, "method": cs.method, "iterations": cs.iterations,
                "shapes": {k: list(getattr(cs, k).shape[1:]) for k in _FIELDS}}
        path = os.path.join(directory, "meta.json")
        with open(path, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        files.append(path)
        return files
    except OSError as exc:
        raise ScenarioIOError(f"cannot write solution to {directory}: {exc}") from exc


def load_solution(directory: str, p: ModelParams) -> ConsistencySolution:
    try:
        with open(os.path.join(directory, "meta.json")) as fh:
            meta = json.load(fh)
        if meta.get("version") != SOLUTION_VERSION:
            raise ScenarioIOError(f"unsupported solution version {meta.get('version')}")
        if meta["n"] != p.n or meta["r"] != p.r or float(meta["T"]) != p.T:
            raise ScenarioIOError("solution does not match the scenario dimensions")
        arrays = {}
        for name in _FIELDS:
            data = np.loadtxt(os.path.join(directory, f"{name}.csv"), delimiter=",", skiprows=1, ndmin=2)
            arrays[name] = data[:, 1:].reshape((data.shape[0],) + tuple(meta["shapes"][name]))
    except (OSError, ValueError, KeyError) as exc:
        raise ScenarioIOError(f"cannot read solution from {directory}: {exc}") from exc
    grid = TimeGrid(p.T, int(meta["steps"]))
    return ConsistencySolution(p, derive_offsets(p), grid, meta["method"], arrays["P"], arrays["Pi"],
                               arrays["pi"], iterations=int(meta.get("iterations", 0)))
