"""Exact small-scale ground truth on binomial trees.

Every Brownian motion is replaced by +-sqrt(dt) increments, so one step has
2^(N+1) equally likely branches (one common sign, N idiosyncratic signs).
The state is propagated by the Euler map, running costs use the left-point
rule, and value functions are exact quadratics in the stacked state
X = (x_1, ..., x_N). Their Hessian depends only on depth; the linear and
constant parts are stored per node.

Policies are lists indexed by depth k = 0..M-1: ``u[k]`` has shape
(B**k, N, r) and ``s[k]`` has shape (B**k, n), with B = 2**(N+1). Node j at
depth k has children j*B + b, where bit 0 of b is the common sign and bit i
is agent i's sign (set bit means +1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, UnboundedError
from .model import ModelParams, build_compact, derive_offsets

MAX_AGENTS = 3
MAX_STEPS = 6
NODE_CAP = 3_000_000
DEF_MARGIN = 1e-10


@dataclass(frozen=True)
class TreeSpec:
    N: int
    M: int
    T: float

    def __post_init__(self):
        if not 1 <= self.N <= MAX_AGENTS:
            raise CapacityError(f"tree oracle supports 1 <= N <= {MAX_AGENTS}")
        if not 1 <= self.M <= MAX_STEPS:
            raise CapacityError(f"tree oracle supports 1 <= M <= {MAX_STEPS}")
        if self.leaves > NODE_CAP:
            raise CapacityError(f"{self.leaves} leaves exceed the cap {NODE_CAP}")

    @property
    def branching(self) -> int:
        return 2 ** (self.N + 1)

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def leaves(self) -> int:
        return self.branching ** self.M

    def signs(self) -> np.ndarray:
        """(B, N+1) matrix of +-1; column 0 is the common sign."""
        b = np.arange(self.branching)[:, None]
        bits = (b >> np.arange(self.N + 1)[None, :]) & 1
        return 2.0 * bits - 1.0

    def width(self, k: int) -> int:
        return self.branching ** k


class _Compact:
    """Stacked N-agent matrices used by every tree routine."""

    def __init__(self, p: ModelParams, N: int):
        n, r = p.n, p.r
        self.p, self.N, self.n, self.r = p, N, n, r
        self.d = derive_offsets(p)
        cm = build_compact(p, N, self.d)
        self.Qhat, self.Ghat = cm.Qhat, cm.Ghat
        self.eta0_hat = cm.eta0_hat
        self.eta_hat = cm.eta_hat
        I_N = np.eye(N)
        self.A = np.kron(I_N, p.A)
        self.B = np.kron(I_N, p.B)
        self.C0 = np.kron(I_N, p.C0)
        self.D0 = np.kron(I_N, p.D0)
        self.one = np.kron(np.ones((N, 1)), np.eye(n))
        self.Rbig = np.kron(I_N, p.R)
        self.Dblk = [np.kron(np.outer(I_N[i], I_N[i]), p.D) for i in range(N)]
        self.E = [np.kron(I_N[:, [i]], np.eye(n)) for i in range(N)]
        self.X0 = np.kron(np.ones(N), p.x0)

    def const_run(self, t):
        eta = self.p.eta(t)
        return 0.5 * self.N * float(eta @ self.p.Q @ eta)

    def const_term(self):
        e0 = self.p.eta0
        return 0.5 * self.N * float(e0 @ self.p.G @ e0)


def _check_policy(arr, k, width, shape_tail, name):
    a = np.asarray(arr, dtype=float)
    if a.shape != (width,) + shape_tail:
        raise ValueError(f"{name}[{k}] has shape {a.shape}, expected {(width,) + shape_tail}")
    return a


def tree_evaluate(p: ModelParams, N: int, M: int, u, s) -> float:
    """Exact expected social cost (with the soft-constraint penalty) by enumeration."""
    spec = TreeSpec(N, M, p.T)
    c = _Compact(p, N)
    xi = spec.signs()
    dt, sq = spec.dt, np.sqrt(spec.dt)
    X = c.X0[None, :]
    total = 0.0
    for k in range(M):
        t = k * dt
        w = spec.width(k)
        U = _check_policy(u[k], k, w, (N, p.r), "u")
        S = _check_policy(s[k], k, w, (p.n,), "s")
        Uf = U.reshape(w, N * p.r)
        run = (0.5 * np.einsum("ni,ij,nj->n", X, c.Qhat, X) - X @ c.eta_hat(t) + c.const_run(t)
               + 0.5 * np.einsum("ni,ij,nj->n", Uf, c.Rbig, Uf)
               - 0.5 * N * np.einsum("ni,ij,nj->n", S, p.R0, S))
        total += dt * float(np.mean(run))
        drift = X @ c.A.T + Uf @ c.B.T + np.tile(np.tile(p.f(t), N), (w, 1))
        d0 = X @ c.C0.T + Uf @ c.D0.T + S @ c.one.T
        di = [Uf @ c.Dblk[i].T + np.tile(c.E[i] @ p.sigma(t), (w, 1)) for i in range(N)]
        m = X + dt * drift
        Xn = m[:, None, :] + sq * xi[None, :, 0, None] * d0[:, None, :]
        for i in range(N):
            Xn = Xn + sq * xi[None, :, i + 1, None] * di[i][:, None, :]
        X = Xn.reshape(w * spec.branching, -1)
    term = 0.5 * np.einsum("ni,ij,nj->n", X, c.Ghat, X) - X @ c.eta0_hat + c.const_term()
    return total + float(np.mean(term))


@dataclass
class InnerSupResult:
    bounded: bool
    value: float
    s_policy: list | None
    root_s: np.ndarray | None
    depth: int | None = None
    hessian_max_eig: float | None = None


@dataclass
class MinmaxResult:
    value: float
    u_policy: list
    s_policy: list
    root_u: np.ndarray
    root_s: np.ndarray


def _backward(p, spec, c, mode, U_given=None, margin=DEF_MARGIN):
    """Backward induction. mode 'sup': decision s, u given. mode 'minmax':
    decisions (u, s). Returns per-depth gains, per-node offsets, root value.
    Raises UnboundedError when a node Hessian lacks the required definiteness."""
    N, n, r = spec.N, p.n, p.r
    nX = N * n
    nU = N * r if mode == "minmax" else 0
    nw = nU + n
    xi = spec.signs()
    B = spec.branching
    dt, sq = spec.dt, np.sqrt(spec.dt)

    P = c.Ghat.copy()
    pv = np.tile(-c.eta0_hat, (spec.width(spec.M), 1))
    cv = np.full(spec.width(spec.M), c.const_term())
    gains = [None] * spec.M
    offs = [None] * spec.M

    for k in range(spec.M - 1, -1, -1):
        t = k * dt
        w = spec.width(k)
        # affine maps of z = (X, w_dec)
        nz = nX + nw
        Mz = np.zeros((nX, nz))
        Mz[:, :nX] = np.eye(nX) + dt * c.A
        D0z = np.zeros((nX, nz))
        D0z[:, :nX] = c.C0
        D0z[:, nX + nU:] = c.one
        Diz = [np.zeros((nX, nz)) for _ in range(N)]
        Lq = np.zeros((nz, nz))
        Lq[:nX, :nX] = c.Qhat
        Lq[nX + nU:, nX + nU:] = -N * p.R0
        Fv = np.tile(p.f(t), N)
        sig = [c.E[i] @ p.sigma(t) for i in range(N)]
        if mode == "minmax":
            Mz[:, nX:nX + nU] = dt * c.B
            D0z[:, nX:nX + nU] = c.D0
            for i in range(N):
                Diz[i][:, nX:nX + nU] = c.Dblk[i]
            Lq[nX:nX + nU, nX:nX + nU] = c.Rbig
            m0 = np.tile(dt * Fv, (w, 1))
            d00 = np.zeros((w, nX))
            di0 = [np.tile(sig[i], (w, 1)) for i in range(N)]
            const_u = np.zeros(w)
        else:
            Uf = np.asarray(U_given[k], dtype=float).reshape(w, N * r)
            m0 = dt * (Uf @ c.B.T + Fv[None, :])
            d00 = Uf @ c.D0.T
            di0 = [Uf @ c.Dblk[i].T + sig[i][None, :] for i in range(N)]
            const_u = 0.5 * np.einsum("ni,ij,nj->n", Uf, c.Rbig, Uf)

        pc = pv.reshape(w, B, nX)
        pbar = pc.mean(axis=1)
        ptil = np.einsum("wbd,bj->wjd", pc, xi) / B
        cbar = cv.reshape(w, B).mean(axis=1)

        H = Mz.T @ P @ Mz + dt * (D0z.T @ P @ D0z + sum(Dz.T @ P @ Dz for Dz in Diz)) + dt * Lq
        H = 0.5 * (H + H.T)
        h = (P @ m0.T + pbar.T).T @ Mz
        h += dt * (d00 @ P) @ D0z + sq * ptil[:, 0, :] @ D0z
        for i in range(N):
            h += dt * (di0[i] @ P) @ Diz[i] + sq * ptil[:, i + 1, :] @ Diz[i]
        h[:, :nX] -= dt * c.eta_hat(t)[None, :]
        const = (0.5 * np.einsum("wi,ij,wj->w", m0, P, m0) + np.einsum("wi,wi->w", pbar, m0)
                 + 0.5 * dt * np.einsum("wi,ij,wj->w", d00, P, d00) + sq * np.einsum("wi,wi->w", ptil[:, 0, :], d00)
                 + cbar + dt * (c.const_run(t) + const_u))
        for i in range(N):
            const += 0.5 * dt * np.einsum("wi,ij,wj->w", di0[i], P, di0[i])
            const += sq * np.einsum("wi,wi->w", ptil[:, i + 1, :], di0[i])

        Hww = H[nX:, nX:]
        Hss = Hww[nU:, nU:]
        ev_s = np.linalg.eigvalsh(Hss)
        if ev_s[-1] >= -margin:
            raise UnboundedError(f"adversary Hessian not negative definite at depth {k}"
                                 f" (max eigenvalue {ev_s[-1]:.3e})", node=k)
        if mode == "minmax":
            Huu = Hww[:nU, :nU]
            Hus = Hww[:nU, nU:]
            schur = Huu - Hus @ np.linalg.solve(Hss, Hus.T)
            ev_u = np.linalg.eigvalsh(0.5 * (schur + schur.T))
            if ev_u[0] <= margin:
                raise UnboundedError(f"control Hessian not positive definite at depth {k}"
                                     f" (min eigenvalue {ev_u[0]:.3e})", node=k)
        HwX = H[nX:, :nX]
        F = -np.linalg.solve(Hww, HwX)
        fo = -np.linalg.solve(Hww, h[:, nX:].T).T
        gains[k] = F
        offs[k] = fo
        P = H[:nX, :nX] + H[:nX, nX:] @ F
        P = 0.5 * (P + P.T)
        pv = h[:, :nX] + fo @ H[nX:, :nX]
        cv = const + 0.5 * np.einsum("wi,wi->w", h[:, nX:], fo)
    X0 = c.X0
    value = float(0.5 * X0 @ P @ X0 + pv[0] @ X0 + cv[0])
    return gains, offs, value


def _forward_decisions(p, spec, c, mode, gains, offs, U_given=None):
    """Roll the optimal feedback forward through the tree; return policies."""
    N, n, r = spec.N, p.n, p.r
    nU = N * r if mode == "minmax" else 0
    xi = spec.signs()
    dt, sq = spec.dt, np.sqrt(spec.dt)
    X = c.X0[None, :]
    u_pol, s_pol = [], []
    for k in range(spec.M):
        t = k * dt
        w = spec.width(k)
        dec = X @ gains[k].T + offs[k]
        if mode == "minmax":
            Uf = dec[:, :nU]
        else:
            Uf = np.asarray(U_given[k], dtype=float).reshape(w, N * r)
        S = dec[:, nU:]
        u_pol.append(Uf.reshape(w, N, r).copy())
        s_pol.append(S.copy())
        drift = X @ c.A.T + Uf @ c.B.T + np.tile(p.f(t), N)[None, :]
        d0 = X @ c.C0.T + Uf @ c.D0.T + S @ c.one.T
        m = X + dt * drift
        Xn = m[:, None, :] + sq * xi[None, :, 0, None] * d0[:, None, :]
        for i in range(N):
            di = Uf @ c.Dblk[i].T + (c.E[i] @ p.sigma(t))[None, :]
            Xn = Xn + sq * xi[None, :, i + 1, None] * di[:, None, :]
        X = Xn.reshape(w * spec.branching, -1)
    return u_pol, s_pol


def tree_inner_sup(p: ModelParams, N: int, M: int, u, margin: float = DEF_MARGIN) -> InnerSupResult:
    """Exact sup over adapted adversary policies for a fixed control policy."""
    spec = TreeSpec(N, M, p.T)
    c = _Compact(p, N)
    try:
        gains, offs, value = _backward(p, spec, c, "sup", U_given=u, margin=margin)
    except UnboundedError as exc:
        return InnerSupResult(False, float("inf"), None, None, depth=exc.node)
    _, s_pol = _forward_decisions(p, spec, c, "sup", gains, offs, U_given=u)
    return InnerSupResult(True, value, s_pol, s_pol[0][0].copy())


def tree_minmax(p: ModelParams, N: int, M: int, margin: float = DEF_MARGIN) -> MinmaxResult:
    """Exact saddle point over centralized adapted controls and adversary policies."""
    spec = TreeSpec(N, M, p.T)
    c = _Compact(p, N)
    gains, offs, value = _backward(p, spec, c, "minmax", margin=margin)
    u_pol, s_pol = _forward_decisions(p, spec, c, "minmax", gains, offs)
    return MinmaxResult(value, u_pol, s_pol, u_pol[0][0].copy(), s_pol[0][0].copy())


def eval_j0_soc(p: ModelParams, N: int, M: int, u, margin: float = DEF_MARGIN) -> InnerSupResult:
    """Homogeneous functional: zero offsets, zero initial state, adversary at its optimum."""
    return tree_inner_sup(p.zero_offsets(), N, M, u, margin=margin)


def zero_policy(p: ModelParams, N: int, M: int):
    spec = TreeSpec(N, M, p.T)
    u = [np.zeros((spec.width(k), N, p.r)) for k in range(M)]
    s = [np.zeros((spec.width(k), p.n)) for k in range(M)]
    return u, s


def random_policy(p: ModelParams, N: int, M: int, rng: np.random.Generator, scale: float = 1.0):
    spec = TreeSpec(N, M, p.T)
    return [scale * rng.standard_normal((spec.width(k), N, p.r)) for k in range(M)]


def constant_adversary(p: ModelParams, N: int, M: int, value):
    spec = TreeSpec(N, M, p.T)
    v = np.asarray(value, dtype=float)
    return [np.tile(v, (spec.width(k), 1)) for k in range(M)]
