"""Finite-N population simulation under the decentralized strategies,
realized social cost, and convergence studies in N.

The realized system is driven by the mean-field adversary
sigma0hat = -R0^{-1} beta0hat evaluated on the simulated common state, which
is what each agent's strategy assumes. At tree scale the exact finite-N
adversary is available from the oracle and the substitution error is
reported next to the Monte Carlo results.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import kernels
from .errors import BlowUpError, DimensionError, ValidationError
from .meanfield import ConsistencySolution
from .model import ModelParams
from .numerics import RandomStreams, TimeGrid

CHUNK = 16  # paths per work item; fixed so results never depend on thread count
EXCLUDE_GAIN = 0.30


def _threads(threads):
    if threads is None or threads <= 0:
        return os.cpu_count() or 1
    return int(threads)


@dataclass(frozen=True)
class SimConfig:
    Ns: tuple
    paths: int
    grid: TimeGrid
    seed: int = 0
    adversary: str = "meanfield"
    threads: int | None = None

    def __post_init__(self):
        Ns = tuple(int(v) for v in self.Ns)
        object.__setattr__(self, "Ns", Ns)
        if not Ns or any(v < 1 for v in Ns) or list(Ns) != sorted(set(Ns)):
            raise ValidationError("N list must be nonempty, positive and strictly ascending")
        if self.paths < 2:
            raise ValidationError("at least two paths per N are needed for standard errors")
        if self.adversary not in ("meanfield", "tree-exact"):
            raise ValidationError(f"unknown adversary mode {self.adversary!r}")
        if self.adversary == "tree-exact" and (max(Ns) > 3 or self.grid.steps > 6):
            raise ValidationError("tree-exact adversary needs N <= 3 and at most 6 grid steps")


@dataclass
class PopulationPaths:
    """Simulated paths; arrays are indexed (path, node, agent, component)."""

    grid: TimeGrid
    N: int
    x: np.ndarray
    u: np.ndarray
    X: np.ndarray  # common state (xhat, h), (paths, M+1, 2n)
    sigma0: np.ndarray  # (paths, M+1, n)
    dW0: np.ndarray  # (paths, M)
    dW: np.ndarray  # (paths, N, M)

    @property
    def paths(self) -> int:
        return self.x.shape[0]

    @property
    def xbar(self) -> np.ndarray:
        return self.x.mean(axis=2)

    @property
    def xhat(self) -> np.ndarray:
        return self.X[..., : self.x.shape[-1]]


def _check_grid(cs: ConsistencySolution, grid: TimeGrid | None) -> TimeGrid:
    if grid is None:
        return cs.grid
    if grid.steps != cs.grid.steps or grid.T != cs.grid.T:
        raise DimensionError("simulation grid must equal the solution grid")
    return grid


def _simulate_chunk(p, cs, N, path_ids, streams, sigma0_override, agent_ids):
    grid = cs.grid
    M, dt = grid.steps, grid.dt
    P = len(path_ids)
    n, r = p.n, p.r
    sq = np.sqrt(dt)
    dW0 = streams.block("W0", [0], path_ids, M, 1)[:, 0, :, 0] * sq
    dW = np.ascontiguousarray(streams.block("W", agent_ids, path_ids, M, 1)[..., 0] * sq)
    X = cs.simulate_common(dW0[:, :, None])
    kap = np.ascontiguousarray(np.einsum("pkj,kbj->pkb", X, cs.kX) + cs.kc[None])
    if sigma0_override is None:
        s0 = np.einsum("pkj,kaj->pka", X, cs.sX) + cs.sc[None]
    else:
        s0 = sigma0_override
    s0 = np.ascontiguousarray(s0, dtype=float)
    nodes = grid.nodes
    f = np.ascontiguousarray(p.f(nodes).reshape(M + 1, n))
    sig = np.ascontiguousarray(p.sigma(nodes).reshape(M + 1, n))
    x = np.empty((P, M + 1, N, n))
    u = np.empty((P, M + 1, N, r))
    c = np.ascontiguousarray
    bad = kernels.euler_population(c(p.x0), c(p.A), c(p.B), c(p.D), c(p.C0), c(p.D0), c(cs.Kx), kap, f, sig,
                                   s0, dW, c(dW0), float(dt), x, u)
    if bad >= 0:
        ia = bad % N
        rest = bad // N
        node, ip = rest % (M + 1), rest // (M + 1)
        raise BlowUpError(f"non-finite state for agent {agent_ids[ia]} on path {path_ids[ip]}", node=int(node))
    return x, u, X, s0, dW0, dW


def simulate_population(p: ModelParams, cs: ConsistencySolution, N: int, paths: int, seed: int,
                        grid: TimeGrid | None = None, threads: int | None = None, path_start: int = 0,
                        sigma0=None, agent_ids=None) -> PopulationPaths:
    """Euler-Maruyama simulation of N agents on ``paths`` replicates.

    Agent i (1-based) draws from stream ("W", i, path) and the common noise
    from ("W0", 0, path), so the same path index gives the same noise for
    every N. ``sigma0`` replaces the mean-field adversary by a given path
    array (paths, M+1, n). ``agent_ids`` relabels the idiosyncratic streams.
    """
    if N < 1 or paths < 1:
        raise ValidationError("N and paths must be positive")
    grid = _check_grid(cs, grid)
    M = grid.steps
    agent_ids = list(range(1, N + 1)) if agent_ids is None else [int(a) for a in agent_ids]
    if len(agent_ids) != N:
        raise ValidationError("agent_ids must list one stream id per agent")
    if sigma0 is not None:
        sigma0 = np.asarray(sigma0, dtype=float)
        if sigma0.shape != (paths, M + 1, p.n):
            raise DimensionError(f"sigma0 must have shape {(paths, M + 1, p.n)}")
    streams = RandomStreams(seed)
    ids = np.arange(path_start, path_start + paths)
    chunks = [ids[i:i + CHUNK] for i in range(0, paths, CHUNK)]

    def work(j):
        lo = j * CHUNK
        ov = None if sigma0 is None else sigma0[lo:lo + len(chunks[j])]
        return _simulate_chunk(p, cs, N, list(chunks[j]), streams, ov, agent_ids)

    nt = min(_threads(threads), len(chunks))
    if nt <= 1:
        parts = [work(j) for j in range(len(chunks))]
    else:
        with ThreadPoolExecutor(max_workers=nt) as ex:
            parts = list(ex.map(work, range(len(chunks))))
    x, u, X, s0, dW0, dW = (np.concatenate([pt[i] for pt in parts]) for i in range(6))
    return PopulationPaths(grid, N, x, u, X, s0, dW0, dW)


def resimulate_open_loop(p: ModelParams, pop: PopulationPaths, sigma0) -> PopulationPaths:
    """Same noise and the same control paths, a different adversary path.

    This is the inner problem's view: controls are fixed processes and only
    sigma0 changes."""
    s0 = np.asarray(sigma0, dtype=float)
    if s0.shape != pop.sigma0.shape:
        raise DimensionError(f"sigma0 must have shape {pop.sigma0.shape}")
    grid = pop.grid
    dt = grid.dt
    f = p.f(grid.nodes).reshape(grid.steps + 1, p.n)
    sig = p.sigma(grid.nodes).reshape(grid.steps + 1, p.n)
    x = np.empty_like(pop.x)
    x[:, 0] = pop.x[:, 0]
    for k in range(grid.steps):
        xk, uk = x[:, k], pop.u[:, k]
        x[:, k + 1] = (xk + dt * (xk @ p.A.T + uk @ p.B.T + f[k])
                       + pop.dW[:, :, k, None] * (uk @ p.D.T + sig[k])
                       + pop.dW0[:, k, None, None] * (xk @ p.C0.T + uk @ p.D0.T + s0[:, k, None, :]))
    if not np.all(np.isfinite(x)):
        raise BlowUpError("non-finite state in open-loop resimulation", node=None)
    return PopulationPaths(grid, pop.N, x, pop.u, pop.X, s0, pop.dW0, pop.dW)


def _trapezoid(values, dt):
    return dt * (values[:, 1:].sum(axis=1) + values[:, :-1].sum(axis=1)) * 0.5


def social_cost_paths(p: ModelParams, pop: PopulationPaths, sigma0=None) -> np.ndarray:
    """Realized social cost per path replicate, penalty included."""
    grid = pop.grid
    if abs(grid.T - p.T) > 1e-12 * max(1.0, p.T):
        raise DimensionError("paths and model have different horizons")
    s0 = pop.sigma0 if sigma0 is None else np.asarray(sigma0, dtype=float)
    if s0.shape != pop.sigma0.shape:
        raise DimensionError(f"sigma0 must have shape {pop.sigma0.shape}")
    nodes = grid.nodes
    eta = p.eta(nodes).reshape(len(nodes), p.n)
    xbar = pop.xbar
    e = pop.x - (xbar @ p.Gamma.T)[:, :, None, :] - eta[None, :, None, :]
    run = 0.5 * (np.einsum("pkia,ab,pkib->pk", e, p.Q, e) + np.einsum("pkia,ab,pkib->pk", pop.u, p.R, pop.u))
    run -= 0.5 * pop.N * np.einsum("pka,ab,pkb->pk", s0, p.R0, s0)
    eT = pop.x[:, -1] - (xbar[:, -1] @ p.Gamma0.T)[:, None, :] - p.eta0
    term = 0.5 * np.einsum("pia,ab,pib->p", eT, p.G, eT)
    return _trapezoid(run, grid.dt) + term


def social_cost(p: ModelParams, pop: PopulationPaths, sigma0=None) -> float:
    """Trapezoidal running cost, exact terminal cost, minus the soft-constraint
    penalty, summed over agents and averaged over replicates."""
    return float(np.mean(social_cost_paths(p, pop, sigma0)))


# ---------------------------------------------------------------------------
# Convergence study


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    residual: float
    Ns: list

    def to_dict(self):
        return {"slope": self.slope, "intercept": self.intercept, "ci95": [self.ci_low, self.ci_high],
                "residual_rms": self.residual, "N": list(self.Ns)}


def fit_loglog(Ns, values) -> SlopeFit:
    """Least-squares slope of log(values) against log(N) with a 95% t interval."""
    Ns = np.asarray(Ns, dtype=float)
    v = np.asarray(values, dtype=float)
    if len(Ns) < 3:
        raise ValidationError("slope fit needs at least 3 values of N")
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValidationError("slope fit needs positive finite values")
    lx, ly = np.log(Ns), np.log(v)
    (b, a), cov = np.polyfit(lx, ly, 1, cov="unscaled")
    res = ly - (a + b * lx)
    dof = len(Ns) - 2
    s2 = float(res @ res) / dof if dof > 0 else 0.0
    se = float(np.sqrt(cov[0, 0] * s2))
    q = float(stats.t.ppf(0.975, dof)) if dof > 0 else np.inf
    return SlopeFit(float(b), float(a), float(b - q * se), float(b + q * se),
                    float(np.sqrt(np.mean(res ** 2))), [int(n) for n in Ns])


def fit_with_exclusion(Ns, values) -> dict:
    """Fit over all N and without the smallest N; the reduced fit is preferred
    when its residual is more than 30% lower. Both are always reported."""
    full = fit_loglog(Ns, values)
    out = {"all": full.to_dict(), "excluding_smallest": None, "preferred": "all", "slope": full.slope}
    if len(Ns) >= 4:
        red = fit_loglog(Ns[1:], values[1:])
        out["excluding_smallest"] = red.to_dict()
        if red.residual < (1.0 - EXCLUDE_GAIN) * full.residual:
            out["preferred"] = "excluding_smallest"
            out["slope"] = red.slope
    return out


@dataclass
class SimulationResult:
    Ns: list
    per_N: list
    rows: list
    slopes: dict
    bounded: bool
    notes: list = field(default_factory=list)
    scalars: dict = field(default_factory=dict)

    def to_dict(self):
        return {"N": list(self.Ns), "per_N": self.per_N, "slopes": self.slopes, "bounded": self.bounded,
                "scalars": dict(self.scalars), "notes": list(self.notes)}


ROW_FIELDS = ("N", "replicate", "per_capita_cost", "mf_error_sup_sq", "sigma0_gap_sq")


def mean_se(v):
    v = np.asarray(v, dtype=float)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


def path_metrics(p, cs, pop):
    n = p.n
    e = pop.xbar - pop.xhat
    mf = np.max(np.sum(e ** 2, axis=-1), axis=1)
    # R0 sigma0 evaluated at the empirical mean minus its mean-field value -beta0hat
    Lb = cs.L[:, :n, :n]
    g = np.einsum("kab,pkb->pka", Lb, e)
    gap = _trapezoid(np.sum(g ** 2, axis=-1), pop.grid.dt)
    cost = social_cost_paths(p, pop) / pop.N
    return cost, mf, gap


def convergence_study(p: ModelParams, cs: ConsistencySolution, cfg: SimConfig) -> SimulationResult:
    """Per-N realized per-capita cost, mean-field errors and their log-log slopes.

    Path replicate j uses the same common and idiosyncratic streams for every
    N, so cost differences across N are common-random-number estimates."""
    if len(cfg.Ns) < 3:
        raise ValidationError("convergence study needs at least 3 values of N")
    _check_grid(cs, cfg.grid)
    per, rows, costs = [], [], {}
    for N in cfg.Ns:
        pop = simulate_population(p, cs, N, cfg.paths, cfg.seed, cfg.grid, threads=cfg.threads)
        cost, mf, gap = path_metrics(p, cs, pop)
        costs[N] = cost
        for j in range(cfg.paths):
            rows.append((N, j, float(cost[j]), float(mf[j]), float(gap[j])))
        cm, cse = mean_se(cost)
        mm, mse = mean_se(mf)
        gm, gse = mean_se(gap)
        per.append({"N": N, "paths": cfg.paths, "per_capita_cost": cm, "per_capita_cost_se": cse,
                    "mf_error_sup_sq": mm, "mf_error_sup_sq_se": mse, "sigma0_gap_sq": gm,
                    "sigma0_gap_sq_se": gse})
    Nref = cfg.Ns[-1]
    for entry in per:
        d = costs[entry["N"]] - costs[Nref]
        entry["cost_gap"], entry["cost_gap_se"] = (abs(float(d.mean())), mean_se(d)[1]) if entry["N"] != Nref \
            else (0.0, 0.0)
    notes = []
    slopes = {
        "mf_error_sup_sq": fit_with_exclusion(list(cfg.Ns), [e["mf_error_sup_sq"] for e in per]),
        "sigma0_gap_sq": fit_with_exclusion(list(cfg.Ns), [e["sigma0_gap_sq"] for e in per]),
    }
    gNs = [e["N"] for e in per if e["N"] != Nref]
    gv = [e["cost_gap"] for e in per if e["N"] != Nref]
    if len(gNs) >= 3 and all(v > 0 for v in gv):
        slopes["cost_gap"] = fit_with_exclusion(gNs, gv)
    else:
        notes.append("cost-gap slope not fitted: fewer than 3 positive gaps below the reference N")
    pc = np.array([abs(e["per_capita_cost"]) for e in per])
    growth = fit_loglog(list(cfg.Ns), pc).slope if np.all(pc > 0) else 0.0
    bounded = bool(np.all(np.isfinite(pc)) and growth <= 0.1)
    slopes["per_capita_cost_growth"] = growth
    scalars = {}
    if cfg.adversary == "tree-exact":
        for N in cfg.Ns:
            scalars[f"tree_substitution_gap_N{N}"] = tree_substitution_gap(p, cs, N, cfg.grid.steps)
    return SimulationResult(list(cfg.Ns), per, rows, slopes, bounded, notes, scalars)


# ---------------------------------------------------------------------------
# Decentralized strategy restricted to the tree


def tree_policies(cs: ConsistencySolution, N: int, M: int):
    """(u, s) tree policies of the decentralized strategy and the mean-field
    adversary, with states propagated by the tree's Euler map.

    The solution grid must refine the tree grid: node k of the tree uses the
    coefficients at solution node k * steps / M."""
    from .oracle import TreeSpec

    p = cs.p
    spec = TreeSpec(N, M, p.T)
    S = cs.grid.steps
    if S % M:
        raise DimensionError(f"solution steps {S} are not a multiple of tree steps {M}")
    stride = S // M
    n = p.n
    dt, sq = spec.dt, np.sqrt(spec.dt)
    xi = spec.signs()
    X = cs.X0()[None, :]
    x = np.broadcast_to(p.x0, (1, N, n)).copy()
    u_pol, s_pol = [], []
    for k in range(M):
        j = k * stride
        t = k * dt
        u = -(x @ cs.Kx[j].T) - (X @ cs.kX[j].T + cs.kc[j])[:, None, :]
        s = X @ cs.sX[j].T + cs.sc[j]
        u_pol.append(u)
        s_pol.append(s)
        Xd = X + dt * (X @ cs.fX[j].T + cs.fc[j])
        Xv = X @ cs.gX[j].T + cs.gc[j]
        X = (Xd[:, None, :] + sq * xi[None, :, 0, None] * Xv[:, None, :]).reshape(-1, 2 * n)
        xd = x + dt * (x @ p.A.T + u @ p.B.T + p.f(t))
        v0 = x @ p.C0.T + u @ p.D0.T + s[:, None, :]
        vi = u @ p.D.T + p.sigma(t)
        xn = (xd[:, None] + sq * xi[None, :, 0, None, None] * v0[:, None]
              + sq * xi[None, :, 1:, None] * vi[:, None])
        x = xn.reshape(-1, N, n)
    return u_pol, s_pol


def tree_substitution_gap(p: ModelParams, cs: ConsistencySolution, N: int, M: int) -> float:
    """Exact worst-case tree cost of the decentralized strategy minus its tree
    cost under the mean-field adversary (nonnegative up to rounding)."""
    from .oracle import tree_evaluate, tree_inner_sup

    u, s = tree_policies(cs, N, M)
    sup = tree_inner_sup(p, N, M, u)
    if not sup.bounded:
        return float("inf")
    return float(sup.value - tree_evaluate(p, N, M, u, s))


# ---------------------------------------------------------------------------
# Adversary optimality probe


def default_directions(grid: TimeGrid, n: int) -> dict:
    """Four deterministic unit-scale perturbation shapes for sigma0."""
    t = grid.nodes / grid.T
    e = np.ones(n) / np.sqrt(n)
    return {
        "const_plus": np.outer(np.ones_like(t), e),
        "const_minus": -np.outer(np.ones_like(t), e),
        "cosine": np.outer(np.cos(np.pi * t), e),
        "ramp": np.outer(2.0 * t - 1.0, e),
    }


def adversary_perturbation_check(p: ModelParams, cs: ConsistencySolution, N: int, paths: int, seed: int,
                                 magnitudes=(0.05, 0.1, 0.2), directions=None, threads=None,
                                 n_se: float = 3.0) -> list:
    """Common-random-number check that sigma0hat + eps * delta never raises
    the inner objective by more than ``n_se`` standard errors.

    Controls are held fixed as processes. Returns one record per
    (direction, magnitude), each with the paired mean increase, its standard
    error and a pass flag."""
    pop = simulate_population(p, cs, N, paths, seed, threads=threads)
    base = social_cost_paths(p, pop)
    directions = default_directions(cs.grid, p.n) if directions is None else directions
    out = []
    for name, delta in directions.items():
        for eps in magnitudes:
            s_new = pop.sigma0 + eps * np.asarray(delta)[None]
            cost = social_cost_paths(p, resimulate_open_loop(p, pop, s_new))
            d = cost - base
            m, se = mean_se(d)
            out.append({"direction": name, "magnitude": float(eps), "increase": m, "se": se,
                        "ok": bool(m <= n_se * se)})
    return out
