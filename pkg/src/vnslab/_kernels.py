"""Compiled particle-grid kernels (triangular-shaped-cloud shape, 3D).

Grid node g sits at x = g*h.  Positions may be unwrapped; indices are taken
modulo n.  Deposition accumulates into one buffer per fixed-size particle
chunk and the buffers are merged in chunk order, so the result does not depend
on how many threads ran the loop.
"""
import numpy as np
import numba
from numba import njit, prange

numba.config.THREADING_LAYER = "workqueue"

CHUNK = 65536
NQ = 6  # rho, j_x, j_y, j_z, m1, m2


@njit(inline="always")
def _tsc(s):
    i0 = int(np.floor(s + 0.5))
    d = s - i0
    return i0, 0.5 * (0.5 - d) ** 2, 0.75 - d * d, 0.5 * (0.5 + d) ** 2


@njit(parallel=True, cache=True)
def _deposit_chunks(x, v, w, n, h, nchunks):
    buf = np.zeros((nchunks, NQ, n, n, n))
    npart = x.shape[0]
    for c in prange(nchunks):
        lo = c * CHUNK
        hi = min(npart, lo + CHUNK)
        out = buf[c]
        for p in range(lo, hi):
            ix, ax0, ax1, ax2 = _tsc(x[p, 0] / h)
            iy, ay0, ay1, ay2 = _tsc(x[p, 1] / h)
            iz, az0, az1, az2 = _tsc(x[p, 2] / h)
            wx = (ax0, ax1, ax2)
            wy = (ay0, ay1, ay2)
            wz = (az0, az1, az2)
            vx, vy, vz = v[p, 0], v[p, 1], v[p, 2]
            sp2 = vx * vx + vy * vy + vz * vz
            sp1 = np.sqrt(sp2)
            wp = w[p]
            for a in range(3):
                gx = (ix - 1 + a) % n
                for b in range(3):
                    gy = (iy - 1 + b) % n
                    wab = wp * wx[a] * wy[b]
                    for cc in range(3):
                        gz = (iz - 1 + cc) % n
                        s = wab * wz[cc]
                        out[0, gx, gy, gz] += s
                        out[1, gx, gy, gz] += s * vx
                        out[2, gx, gy, gz] += s * vy
                        out[3, gx, gy, gz] += s * vz
                        out[4, gx, gy, gz] += s * sp1
                        out[5, gx, gy, gz] += s * sp2
    return buf


def deposit(x, v, w, n, h):
    """Return an array (6, n, n, n) of kernel-weighted sums (not divided by h^3)."""
    nchunks = max(1, -(-x.shape[0] // CHUNK))
    buf = _deposit_chunks(np.ascontiguousarray(x), np.ascontiguousarray(v),
                          np.ascontiguousarray(w), n, h, nchunks)
    total = buf[0].copy()
    for c in range(1, nchunks):
        total += buf[c]
    return total


@njit(parallel=True, cache=True)
def gather(x, field, h):
    """Interpolate a (3, n, n, n) physical field at positions with the TSC kernel,
    the adjoint of the deposition."""
    n = field.shape[1]
    npart = x.shape[0]
    out = np.zeros((npart, 3))
    for p in prange(npart):
        ix, ax0, ax1, ax2 = _tsc(x[p, 0] / h)
        iy, ay0, ay1, ay2 = _tsc(x[p, 1] / h)
        iz, az0, az1, az2 = _tsc(x[p, 2] / h)
        wx = (ax0, ax1, ax2)
        wy = (ay0, ay1, ay2)
        wz = (az0, az1, az2)
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        for a in range(3):
            gx = (ix - 1 + a) % n
            for b in range(3):
                gy = (iy - 1 + b) % n
                wab = wx[a] * wy[b]
                for c in range(3):
                    gz = (iz - 1 + c) % n
                    s = wab * wz[c]
                    s0 += s * field[0, gx, gy, gz]
                    s1 += s * field[1, gx, gy, gz]
                    s2 += s * field[2, gx, gy, gz]
        out[p, 0] = s0
        out[p, 1] = s1
        out[p, 2] = s2
    return out


@njit(parallel=True, cache=True)
def _relative_sq(x, v, field, h):
    n = field.shape[1]
    npart = x.shape[0]
    out = np.zeros(npart)
    for p in prange(npart):
        ix, ax0, ax1, ax2 = _tsc(x[p, 0] / h)
        iy, ay0, ay1, ay2 = _tsc(x[p, 1] / h)
        iz, az0, az1, az2 = _tsc(x[p, 2] / h)
        wx = (ax0, ax1, ax2)
        wy = (ay0, ay1, ay2)
        wz = (az0, az1, az2)
        acc = 0.0
        for a in range(3):
            gx = (ix - 1 + a) % n
            for b in range(3):
                gy = (iy - 1 + b) % n
                wab = wx[a] * wy[b]
                for c in range(3):
                    gz = (iz - 1 + c) % n
                    d0 = v[p, 0] - field[0, gx, gy, gz]
                    d1 = v[p, 1] - field[1, gx, gy, gz]
                    d2 = v[p, 2] - field[2, gx, gy, gz]
                    acc += wab * wz[c] * (d0 * d0 + d1 * d1 + d2 * d2)
        out[p] = acc
    return out


def kernel_relative_sq(x, v, field, h):
    """Per particle: sum_g S(x_p - x_g) |v_p - u(x_g)|^2."""
    return _relative_sq(np.ascontiguousarray(x), np.ascontiguousarray(v), field, h)
