"""Pure-numpy population Euler step; the fallback for the compiled kernel."""
from __future__ import annotations

import numpy as np


def euler_population(x0, A, B, D, C0, D0, Kx, kap, f, sig, s0, dW, dW0, dt, x_out, u_out):
    """Euler-Maruyama for N agents over P paths, in place.

    Shapes: Kx (M+1, r, n); kap, s0 (P, M+1, r|n); f, sig (M+1, n);
    dW (P, N, M); dW0 (P, M); x_out (P, M+1, N, n); u_out (P, M+1, N, r).
    The control at node k is u = -Kx[k] x - kap[:, k]. Returns the flat
    (path, node, agent) index of the first non-finite state, or -1.
    """
    P, M1, N, n = x_out.shape
    x = np.broadcast_to(x0, (P, N, n)).copy()
    x_out[:, 0] = x
    for k in range(M1):
        u = -(x @ Kx[k].T) - kap[:, k, None, :]
        u_out[:, k] = u
        if k == M1 - 1:
            break
        drift = x @ A.T + u @ B.T + f[k]
        vol_i = u @ D.T + sig[k]
        vol_0 = x @ C0.T + u @ D0.T + s0[:, k, None, :]
        x = x + dt * drift + dW[:, :, k, None] * vol_i + dW0[:, k, None, None] * vol_0
        x_out[:, k + 1] = x
        bad = ~np.isfinite(x).all(axis=-1)
        if bad.any():
            ip, ia = np.argwhere(bad)[0]
            return int((ip * M1 + k + 1) * N + ia)
    return -1
