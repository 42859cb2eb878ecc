"""Time the compiled Euler kernel against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--paths 64] [--N 2,16,128] [--steps 128] [--repeat 5]

Both kernels receive identical inputs; the script also reports their largest
absolute disagreement.
"""
import argparse
import time

import numpy as np

from mflqg import _kernels_py
from mflqg.meanfield import solve_consistency
from mflqg.numerics import TimeGrid
from mflqg.scenario import load_scenario

try:
    from mflqg import _kernels
except ImportError:
    _kernels = None


def _inputs(p, cs, P, N, rng):
    M1 = cs.grid.steps + 1
    M, dt = cs.grid.steps, cs.grid.dt
    c = np.ascontiguousarray
    return dict(
        x0=c(p.x0), A=c(p.A), B=c(p.B), D=c(p.D), C0=c(p.C0), D0=c(p.D0), Kx=c(cs.Kx),
        kap=rng.standard_normal((P, M1, p.r)), f=np.zeros((M1, p.n)), sig=np.full((M1, p.n), 0.4),
        s0=rng.standard_normal((P, M1, p.n)) * 0.1,
        dW=rng.standard_normal((P, N, M)) * np.sqrt(dt), dW0=rng.standard_normal((P, M)) * np.sqrt(dt), dt=dt,
    )


def _time(fn, args, shape_x, shape_u, repeat):
    best = np.inf
    for _ in range(repeat):
        x, u = np.empty(shape_x), np.empty(shape_u)
        t0 = time.perf_counter()
        fn(**args, x_out=x, u_out=u)
        best = min(best, time.perf_counter() - t0)
    return best, x


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=64)
    ap.add_argument("--N", default="2,16,128")
    ap.add_argument("--steps", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    p = load_scenario("bundled:benchmark")[0]
    cs = solve_consistency(p, None, TimeGrid(p.T, a.steps))
    rng = np.random.default_rng(0)
    print(f"{'N':>6} {'numpy [s]':>11} {'cython [s]':>11} {'speedup':>8} {'max diff':>10}")
    for N in (int(v) for v in a.N.split(",")):
        args = _inputs(p, cs, a.paths, N, rng)
        sx, su = (a.paths, a.steps + 1, N, p.n), (a.paths, a.steps + 1, N, p.r)
        tp, xp = _time(_kernels_py.euler_population, args, sx, su, a.repeat)
        if _kernels is None:
            print(f"{N:>6} {tp:>11.4f} {'n/a':>11} {'n/a':>8} {'n/a':>10}")
            continue
        tc, xc = _time(_kernels.euler_population, args, sx, su, a.repeat)
        print(f"{N:>6} {tp:>11.4f} {tc:>11.4f} {tp / tc:>8.1f} {np.max(np.abs(xp - xc)):>10.1e}")


if __name__ == "__main__":
    main()
