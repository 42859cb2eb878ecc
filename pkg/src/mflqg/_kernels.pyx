# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled population Euler step. Same contract as _kernels_py.euler_population."""
from libc.math cimport isfinite


def euler_population(const double[::1] x0, const double[:, ::1] A, const double[:, ::1] B,
                     const double[:, ::1] D, const double[:, ::1] C0, const double[:, ::1] D0,
                     const double[:, :, ::1] Kx, const double[:, :, ::1] kap,
                     const double[:, ::1] f, const double[:, ::1] sig, const double[:, :, ::1] s0,
                     const double[:, :, ::1] dW, const double[:, ::1] dW0, double dt,
                     double[:, :, :, ::1] x_out, double[:, :, :, ::1] u_out):
    cdef Py_ssize_t P = x_out.shape[0], M1 = x_out.shape[1], N = x_out.shape[2], n = x_out.shape[3]
    cdef Py_ssize_t r = u_out.shape[3]
    cdef Py_ssize_t ip, k, ia, a, b, j
    cdef double acc, v_i, v_0, w, w0
    cdef long long bad = -1
    with nogil:
        for ip in range(P):
            for ia in range(N):
                for a in range(n):
                    x_out[ip, 0, ia, a] = x0[a]
            for k in range(M1):
                for ia in range(N):
                    for b in range(r):
                        acc = -kap[ip, k, b]
                        for j in range(n):
                            acc = acc - Kx[k, b, j] * x_out[ip, k, ia, j]
                        u_out[ip, k, ia, b] = acc
                if k == M1 - 1:
                    break
                w0 = dW0[ip, k]
                for ia in range(N):
                    w = dW[ip, ia, k]
                    for a in range(n):
                        acc = f[k, a]
                        v_i = sig[k, a]
                        v_0 = s0[ip, k, a]
                        for j in range(n):
                            acc = acc + A[a, j] * x_out[ip, k, ia, j]
                            v_0 = v_0 + C0[a, j] * x_out[ip, k, ia, j]
                        for b in range(r):
                            acc = acc + B[a, b] * u_out[ip, k, ia, b]
                            v_i = v_i + D[a, b] * u_out[ip, k, ia, b]
                            v_0 = v_0 + D0[a, b] * u_out[ip, k, ia, b]
                        x_out[ip, k + 1, ia, a] = x_out[ip, k, ia, a] + dt * acc + w * v_i + w0 * v_0
                        if bad < 0 and not isfinite(x_out[ip, k + 1, ia, a]):
                            bad = (ip * M1 + k + 1) * N + ia
                if bad >= 0:
                    break
            if bad >= 0:
                break
    return bad
