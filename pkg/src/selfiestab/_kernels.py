"""Compiled inner loops for rigid MLS warping and raster remapping.

Per-point sums over warp nodes run sequentially in node order, so results do
not depend on how points are scheduled across threads.
"""

import math
import os

import numba
import numpy as np
from numba import njit, prange

# TBB shipped in some images is too old for numba; OpenMP is always present.
numba.config.THREADING_LAYER = "omp"


def configure_threads() -> int:
    """Honour ``STAB_THREADS`` (0 or unset means numba's default)."""
    raw = os.environ.get("STAB_THREADS", "0").strip() or "0"
    n = int(raw)
    if n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return numba.get_num_threads()


DEGENERATE_NORM = 1e-12


@njit(parallel=True, cache=True)
def mls_points(V, Q, Qh, alpha, eps, out, status):
    N = V.shape[0]
    M = Q.shape[0]
    eps2 = eps * eps
    for n in prange(N):
        vx = V[n, 0]
        vy = V[n, 1]
        status[n] = 0
        snap = -1
        for i in range(M):
            dx = vx - Q[i, 0]
            dy = vy - Q[i, 1]
            if dx * dx + dy * dy < eps2:
                snap = i
                break
        if snap >= 0:
            out[n, 0] = Qh[snap, 0]
            out[n, 1] = Qh[snap, 1]
            continue
        w = np.empty(M)
        sw = 0.0
        cx = 0.0
        cy = 0.0
        chx = 0.0
        chy = 0.0
        for i in range(M):
            dx = vx - Q[i, 0]
            dy = vy - Q[i, 1]
            wi = math.exp(-alpha * math.log(dx * dx + dy * dy))
            w[i] = wi
            sw += wi
            cx += wi * Q[i, 0]
            cy += wi * Q[i, 1]
            chx += wi * Qh[i, 0]
            chy += wi * Qh[i, 1]
        cx /= sw
        cy /= sw
        chx /= sw
        chy /= sw
        ux = vx - cx
        uy = vy - cy
        sx = 0.0
        sy = 0.0
        for i in range(M):
            px = Q[i, 0] - cx
            py = Q[i, 1] - cy
            hx = Qh[i, 0] - chx
            hy = Qh[i, 1] - chy
            a = w[i] * (px * ux + py * uy)
            b = w[i] * (px * uy - py * ux)
            # row vector (hx, hy) times [[a, b], [-b, a]]
            sx += a * hx - b * hy
            sy += b * hx + a * hy
        r = math.sqrt(ux * ux + uy * uy)
        s = math.sqrt(sx * sx + sy * sy)
        if r == 0.0:
            out[n, 0] = chx
            out[n, 1] = chy
        elif s < DEGENERATE_NORM:
            status[n] = 1
            out[n, 0] = chx
            out[n, 1] = chy
        else:
            out[n, 0] = r * sx / s + chx
            out[n, 1] = r * sy / s + chy


@njit(parallel=True, cache=True)
def mls_operator(V, Q, alpha, eps, Wn, centroid, weight_sum, snap):
    """Normalised weights, weighted source centroid and weight sum for each
    query point; rows that coincide with a node record its index in ``snap``."""
    N = V.shape[0]
    M = Q.shape[0]
    eps2 = eps * eps
    for n in prange(N):
        vx = V[n, 0]
        vy = V[n, 1]
        snap[n] = -1
        for i in range(M):
            dx = vx - Q[i, 0]
            dy = vy - Q[i, 1]
            if dx * dx + dy * dy < eps2:
                snap[n] = i
                break
        if snap[n] >= 0:
            for i in range(M):
                Wn[n, i] = 0.0
            centroid[n, 0] = vx
            centroid[n, 1] = vy
            weight_sum[n] = 0.0
            continue
        sw = 0.0
        cx = 0.0
        cy = 0.0
        for i in range(M):
            dx = vx - Q[i, 0]
            dy = vy - Q[i, 1]
            wi = math.exp(-alpha * math.log(dx * dx + dy * dy))
            Wn[n, i] = wi
            sw += wi
            cx += wi * Q[i, 0]
            cy += wi * Q[i, 1]
        for i in range(M):
            Wn[n, i] /= sw
        centroid[n, 0] = cx / sw
        centroid[n, 1] = cy / sw
        weight_sum[n] = sw


@njit(inline="always")
def _sample(image, sx, sy, tol, out, yy, xx):
    H = image.shape[0]
    W = image.shape[1]
    C = image.shape[2]
    if sx < -tol or sy < -tol or sx > W - 1 + tol or sy > H - 1 + tol:
        for ch in range(C):
            out[yy, xx, ch] = 0.0
        return
    sx = min(max(sx, 0.0), W - 1.0)
    sy = min(max(sy, 0.0), H - 1.0)
    x0 = int(math.floor(sx))
    y0 = int(math.floor(sy))
    if x0 > W - 2:
        x0 = max(W - 2, 0)
    if y0 > H - 2:
        y0 = max(H - 2, 0)
    ax = sx - x0
    ay = sy - y0
    x1 = min(x0 + 1, W - 1)
    y1 = min(y0 + 1, H - 1)
    for ch in range(C):
        top = (1.0 - ax) * image[y0, x0, ch] + ax * image[y0, x1, ch]
        bot = (1.0 - ax) * image[y1, x0, ch] + ax * image[y1, x1, ch]
        out[yy, xx, ch] = (1.0 - ay) * top + ay * bot


@njit(parallel=True, cache=True)
def remap(image, map_xy, tol, out):
    H = out.shape[0]
    W = out.shape[1]
    for y in prange(H):
        for x in range(W):
            _sample(image, map_xy[y, x, 0], map_xy[y, x, 1], tol, out, y, x)


@njit(inline="always")
def _cell(f, cells):
    r = math.floor(f + 0.5)
    if abs(f - r) < 1e-9:
        f = r
    i = int(math.floor(f))
    if i < 0:
        i = 0
    elif i > cells - 1:
        i = cells - 1
    return i, f - i


@njit(parallel=True, cache=True)
def grid_remap(image, gv, width, height, tol, out):
    """Fused bilinear field interpolation from warped lattice ``gv``
    (rows + 1, cols + 1, 2) and bilinear image sampling."""
    H = out.shape[0]
    W = out.shape[1]
    rows = gv.shape[0] - 1
    cols = gv.shape[1] - 1
    for y in prange(H):
        iy, ty = _cell(y * rows / height, rows)
        for x in range(W):
            ix, tx = _cell(x * cols / width, cols)
            w00 = (1.0 - tx) * (1.0 - ty)
            w10 = tx * (1.0 - ty)
            w01 = (1.0 - tx) * ty
            w11 = tx * ty
            sx = (w00 * gv[iy, ix, 0] + w10 * gv[iy, ix + 1, 0]
                  + w01 * gv[iy + 1, ix, 0] + w11 * gv[iy + 1, ix + 1, 0])
            sy = (w00 * gv[iy, ix, 1] + w10 * gv[iy, ix + 1, 1]
                  + w01 * gv[iy + 1, ix, 1] + w11 * gv[iy + 1, ix + 1, 1])
            _sample(image, sx, sy, tol, out, y, x)
