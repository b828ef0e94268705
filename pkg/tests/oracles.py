"""Slow, literal reference implementations used as test oracles.

None of these share code with the package beyond its data types.
"""

import math

import numpy as np


def perp(p):
    return np.array([-p[1], p[0]])


def rigid_mls_loop(v, Q, Qh, alpha=0.3):
    """Rigid MLS warp of a single point, one node at a time."""
    v = np.asarray(v, dtype=float)
    M = len(Q)
    w = [1.0 / np.linalg.norm(v - Q[i]) ** (2 * alpha) for i in range(M)]
    sw = sum(w)
    c = sum(w[i] * Q[i] for i in range(M)) / sw
    ch = sum(w[i] * Qh[i] for i in range(M)) / sw
    S = np.zeros(2)
    for i in range(M):
        qs = Q[i] - c
        qhs = Qh[i] - ch
        A = w[i] * np.vstack([qs, -perp(qs)]) @ np.column_stack([v - c, -perp(v - c)])
        S += qhs @ A
    return np.linalg.norm(v - c) * S / np.linalg.norm(S) + ch


def rigid_mls_loop_points(V, Q, Qh, alpha=0.3):
    return np.array([rigid_mls_loop(v, Q, Qh, alpha) for v in V])


def naive_conv1d(x, w, stride=1, dilation=1, padding=0):
    """Cross-correlation by explicit loops; w is (C_out, C_in, k)."""
    c_in, L = x.shape
    c_out, _, k = w.shape
    l_out = (L + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    y = np.zeros((c_out, l_out))
    for o in range(c_out):
        for j in range(l_out):
            acc = 0.0
            for c in range(c_in):
                for t in range(k):
                    pos = j * stride + t * dilation - padding
                    if 0 <= pos < L:
                        acc += w[o, c, t] * x[c, pos]
            y[o, j] = acc
    return y


def naive_conv1d_transposed(y, w, stride=1, dilation=1, padding=0):
    """Scatter form of the transposed convolution; w is (C_in, C_out, k)."""
    c_in, L = y.shape
    _, c_out, k = w.shape
    l_out = (L - 1) * stride - 2 * padding + dilation * (k - 1) + 1
    x = np.zeros((c_out, l_out))
    for c in range(c_in):
        for j in range(L):
            for t in range(k):
                pos = j * stride + t * dilation - padding
                if 0 <= pos < l_out:
                    x[:, pos] += w[c, :, t] * y[c, j]
    return x


def naive_losses(window, disp, alpha=0.3, frobenius=False):
    """Background and foreground losses with explicit loops over frames and
    points, warping with :func:`rigid_mls_loop` (snap rule for exact node hits)."""
    T = window.length

    def warp(points, k):
        if k == 0 or k == T - 1:
            return np.array(points, dtype=float)
        Q = window.nodes(k)
        Qh = Q + disp[k - 1]
        out = []
        for v in points:
            d = np.linalg.norm(Q - v, axis=1)
            hit = np.flatnonzero(d < 1e-6)
            out.append(Qh[hit[0]] if hit.size else rigid_mls_loop(v, Q, Qh, alpha))
        return np.array(out)

    def target(k):
        Q = window.nodes(k)
        return Q + disp[k - 1] if 1 <= k <= T - 2 else np.array(Q)

    def dist(a, b):
        if frobenius:
            return math.sqrt(float(((a - b) ** 2).sum()))
        return sum(math.hypot(*(a[i] - b[i])) for i in range(len(a)))

    lb = 0.0
    lf = 0.0
    for t in range(T - 1):
        lb += dist(warp(window.points(t), t), target(t + 1))
        if window.face_valid(t) and window.face_valid(t + 1):
            lf += dist(warp(window.face(t), t), warp(window.face(t + 1), t + 1))
    return lb, lf


LAYERS = [
    # kind, k, stride, dilation, padding
    ("conv", 3, 1, 1, 1), ("conv", 4, 2, 1, 1), ("conv", 3, 1, 1, 1), ("conv", 4, 2, 1, 1),
    ("conv", 3, 1, 1, 1), ("conv", 3, 1, 1, 1), ("conv", 4, 2, 1, 1), ("conv", 3, 1, 1, 1),
    ("conv", 3, 1, 2, 2), ("conv", 3, 1, 2, 2),
    ("convt", 4, 2, 1, 1), ("conv", 3, 1, 1, 1), ("conv", 3, 1, 1, 1), ("convt", 4, 2, 1, 1),
    ("conv", 3, 1, 1, 1), ("convt", 4, 2, 1, 1), ("conv", 3, 1, 1, 1), ("conv", 1, 1, 1, 0),
]


def reference_net(params, x, y, lam):
    """Layer-by-layer evaluation of the two-branch network with the naive
    convolutions."""

    def layer(i, inp, name):
        kind, k, s, d, p = LAYERS[i - 1]
        w = np.asarray(params[name], dtype=float)
        if kind == "conv":
            return naive_conv1d(inp, w, s, d, p)
        return naive_conv1d_transposed(inp, w, s, d, p)

    fe, fa = {}, {}
    h, g = np.asarray(x, float), np.asarray(y, float)
    for i in range(1, 11):
        h = layer(i, h, f"feature.{i}")
        g = layer(i, g, f"face.{i}")
        fe[i], fa[i] = h, g
    d = np.concatenate([(1 - lam) * fe[10], lam * fa[10], (1 - lam) * fe[7], lam * fa[7]])
    d = layer(11, d, "decoder.11")
    d = layer(12, d, "decoder.12")
    d = layer(13, d, "decoder.13")
    d = np.concatenate([d, (1 - lam) * fe[5], lam * fa[5]])
    d = layer(14, d, "decoder.14")
    d = layer(15, d, "decoder.15")
    d = np.concatenate([d, (1 - lam) * fe[3], lam * fa[3]])
    d = layer(16, d, "decoder.16")
    d = layer(17, d, "decoder.17")
    return layer(18, d, "decoder.18")


def umeyama_similarity(src, dst):
    """Scale, rotation angle and translation of the least-squares similarity
    via the SVD of the cross-covariance."""
    ms, md = src.mean(0), dst.mean(0)
    a, b = src - ms, dst - md
    U, S, Vt = np.linalg.svd(b.T @ a / len(src))
    D = np.diag([1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    var = (a ** 2).sum() / len(src)
    scale = np.trace(np.diag(S) @ D) / var
    t = md - scale * R @ ms
    return scale, math.atan2(R[1, 0], R[0, 0]), t


def direct_dft_energy(x):
    """|X_k|^2 for k = 0..N-1 by the defining sum."""
    n = len(x)
    k = np.arange(n)
    E = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return np.abs(E @ x) ** 2


def detrend(x):
    t = np.arange(len(x), dtype=float)
    A = np.column_stack([np.ones_like(t), t])
    return x - A @ np.linalg.lstsq(A, x, rcond=None)[0]
