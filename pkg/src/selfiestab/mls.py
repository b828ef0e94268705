"""Rigid moving-least-squares warping, its grid approximation and raster
resampling.

The warp ``W(v; Q, Qh)`` moves a point ``v`` using source warp nodes ``Q``
and their targets ``Qh``. Weights are ``|v - q_i|^(-2 alpha)``; the local
transform is the rigid (rotation + translation) least-squares fit around the
weighted centroids.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tracks import REF_HEIGHT, REF_WIDTH

# Out-of-frame tolerance when sampling rasters, in pixels.
SAMPLE_TOLERANCE = 1e-6


class DegenerateWarpError(ArithmeticError):
    """The rigid fit's direction vector vanished for some query point."""

    def __init__(self, index: int, point, context: str = ""):
        where = f" ({context})" if context else ""
        super().__init__(
            f"degenerate MLS warp at point {index} = ({point[0]:.6g}, {point[1]:.6g}){where}"
        )
        self.index = index


@dataclass(frozen=True)
class MlsConfig:
    alpha: float = 0.3
    epsilon_snap: float = 1e-6

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.epsilon_snap > 0:
            raise ValueError("epsilon_snap must be positive")


DEFAULT_CONFIG = MlsConfig()


@dataclass(frozen=True)
class NodePair:
    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        src = np.ascontiguousarray(self.source, dtype=np.float64)
        dst = np.ascontiguousarray(self.target, dtype=np.float64)
        if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
            raise ValueError(f"node arrays must share an (M, 2) shape, got {src.shape} / {dst.shape}")
        if len(src) == 0:
            raise ValueError("at least one warp node is required")
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "target", dst)

    @classmethod
    def identity(cls, nodes) -> "NodePair":
        return cls(nodes, nodes)

    def swapped(self) -> "NodePair":
        return NodePair(self.target, self.source)

    @property
    def displacement(self) -> np.ndarray:
        return self.target - self.source

    def scaled(self, sx: float, sy: float) -> "NodePair":
        s = np.array([sx, sy])
        return NodePair(self.source * s, self.target * s)


def mls_warp_points(points, nodes: NodePair, cfg: MlsConfig = DEFAULT_CONFIG,
                    context: str = "") -> np.ndarray:
    pts = np.ascontiguousarray(np.reshape(points, (-1, 2)), dtype=np.float64)
    if np.array_equal(nodes.source, nodes.target):
        return pts.copy()
    out = np.empty_like(pts)
    status = np.zeros(len(pts), dtype=np.int8)
    _kernels.mls_points(pts, nodes.source, nodes.target, cfg.alpha, cfg.epsilon_snap, out, status)
    bad = np.flatnonzero(status)
    if bad.size:
        raise DegenerateWarpError(int(bad[0]), pts[bad[0]], context)
    return out


def mls_warp_point(v, nodes: NodePair, cfg: MlsConfig = DEFAULT_CONFIG) -> np.ndarray:
    return mls_warp_points(np.asarray(v, dtype=np.float64).reshape(1, 2), nodes, cfg)[0]


class MlsOperator:
    """The warp of fixed query points by fixed source nodes, as a function of
    the node targets only.

    With normalised weights ``omega`` (rows sum to one) the rigid direction
    vector for query ``v`` is

        s = sum_i omega_i (qh_i - ch) [[a_i, b_i], [-b_i, a_i]],
        a_i = (q_i - c) . u,   b_i = (q_i - c) x u,   u = v - c,

    and because ``sum_i omega_i (q_i - c) = 0`` the centroid terms cancel.
    Expanding ``a_i`` and ``b_i`` leaves ``s`` a fixed combination of six
    weighted moments ``omega @ [X, Y, qx X, qx Y, qy X, qy Y]`` of the target
    coordinates. The positive factor ``sum_i w_i`` dropped by normalising
    does not change ``s / |s|``. Forward and backward passes therefore each
    stream the weight matrix once.
    """

    def __init__(self, points, sources, cfg: MlsConfig = DEFAULT_CONFIG):
        V = np.ascontiguousarray(np.reshape(points, (-1, 2)), dtype=np.float64)
        Q = np.ascontiguousarray(sources, dtype=np.float64)
        N, M = len(V), len(Q)
        self.points = V
        self.sources = Q
        self.n_nodes = M
        # work in coordinates centred on the node mean to limit cancellation
        self.origin = Q.mean(axis=0)
        self.q = Q - self.origin
        self.weights = np.empty((N, M))
        self.centroid = np.empty((N, 2))
        self.weight_sum = np.empty(N)
        self.snap = np.empty(N, dtype=np.int64)
        _kernels.mls_operator(V - self.origin, self.q, cfg.alpha, cfg.epsilon_snap,
                              self.weights, self.centroid, self.weight_sum, self.snap)
        self.u = (V - self.origin) - self.centroid
        self.radius = np.hypot(self.u[:, 0], self.u[:, 1])
        self.snapped = np.flatnonzero(self.snap >= 0)
        c, u = self.centroid, self.u
        self._cu = c[:, 0] * u[:, 0] + c[:, 1] * u[:, 1]
        self._cxu = c[:, 0] * u[:, 1] - c[:, 1] * u[:, 0]

    def __len__(self):
        return len(self.points)

    def _moments(self, targets):
        X = targets[:, 0] - self.origin[0]
        Y = targets[:, 1] - self.origin[1]
        qx, qy = self.q[:, 0], self.q[:, 1]
        Z = np.stack([X, Y, qx * X, qx * Y, qy * X, qy * Y])
        return (Z @ self.weights.T).T

    def _direction(self, m):
        ux, uy = self.u[:, 0], self.u[:, 1]
        m1, m2, mxX, mxY, myX, myY = m.T
        sx = ux * mxX + uy * myX - self._cu * m1 - (uy * mxY - ux * myY - self._cxu * m2)
        sy = (uy * mxX - ux * myX - self._cxu * m1) + (ux * mxY + uy * myY - self._cu * m2)
        return np.column_stack([sx, sy])

    def apply(self, targets, context: str = ""):
        """Return ``(warped, cache)``; the cache feeds :meth:`vjp`."""
        targets = np.asarray(targets, dtype=np.float64)
        m = self._moments(targets)
        s = self._direction(m)
        norm = np.hypot(s[:, 0], s[:, 1])
        r = self.radius
        bad = (norm * self.weight_sum < _kernels.DEGENERATE_NORM) & (r > 0) & (self.snap < 0)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DegenerateWarpError(i, self.points[i], context)
        safe = np.where(norm > 0, norm, 1.0)
        n = s / safe[:, None]
        out = r[:, None] * n + m[:, :2] + self.origin
        if self.snapped.size:
            out[self.snapped] = targets[self.snap[self.snapped]]
        if np.array_equal(targets, self.sources):
            # the identity warp is exact; skip the rounding of the general path
            out = self.points.copy()
        return out, (n, safe)

    def __call__(self, targets, context: str = "") -> np.ndarray:
        return self.apply(targets, context)[0]

    def vjp(self, grad_out, cache) -> np.ndarray:
        """Gradient with respect to the targets given the output gradient."""
        n, norm = cache
        g = np.array(grad_out, dtype=np.float64)
        if self.snapped.size:
            g_snap = g[self.snapped].copy()
            g[self.snapped] = 0.0
        # d(r s/|s|)/ds = r/|s| (I - n n^T)
        proj = (g * n).sum(axis=1, keepdims=True)
        gs = (self.radius / norm)[:, None] * (g - proj * n)
        gx, gy = gs[:, 0], gs[:, 1]
        ux, uy = self.u[:, 0], self.u[:, 1]
        G = np.column_stack([
            -self._cu * gx - self._cxu * gy + g[:, 0],
            self._cxu * gx - self._cu * gy + g[:, 1],
            ux * gx + uy * gy,
            -uy * gx + ux * gy,
            uy * gx - ux * gy,
            ux * gx + uy * gy,
        ])
        dZ = (G.T @ self.weights).T
        qx, qy = self.q[:, 0], self.q[:, 1]
        grad = np.column_stack([dZ[:, 0] + qx * dZ[:, 2] + qy * dZ[:, 4],
                                dZ[:, 1] + qx * dZ[:, 3] + qy * dZ[:, 5]])
        if self.snapped.size:
            np.add.at(grad, self.snap[self.snapped], g_snap)
        return grad


# ---------------------------------------------------------------------------
# Grid approximation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WarpGrid:
    """A regular lattice of ``(rows + 1) x (cols + 1)`` vertices covering
    ``[0, width] x [0, height]``. ``warped`` holds the mapped vertices."""

    width: float
    height: float
    cols: int
    rows: int
    vertices: np.ndarray
    warped: np.ndarray

    @property
    def cell_size(self) -> tuple[float, float]:
        return self.width / self.cols, self.height / self.rows

    @property
    def n_vertices(self) -> int:
        return (self.cols + 1) * (self.rows + 1)

    def cell_weights(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Enclosing cell indices and bilinear weights D for each point.

        Weights are ordered (x0y0, x1y0, x0y1, x1y1). Points outside the
        coverage use the nearest boundary cell, i.e. they are extrapolated
        linearly from it.
        """
        pts = np.reshape(np.asarray(points, dtype=np.float64), (-1, 2))
        fx = pts[:, 0] * self.cols / self.width
        fy = pts[:, 1] * self.rows / self.height
        ix, tx = _cell_index(fx, self.cols)
        iy, ty = _cell_index(fy, self.rows)
        D = np.column_stack([(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty])
        return ix, iy, D


def _cell_index(f, cells):
    r = np.floor(f + 0.5)
    f = np.where(np.abs(f - r) < 1e-12, r, f)  # absorb rounding at lattice lines
    i = np.clip(np.floor(f).astype(np.int64), 0, cells - 1)
    return i, f - i


def build_grid(width: float = REF_WIDTH, height: float = REF_HEIGHT,
               cols: int = 20, rows: int = 20) -> WarpGrid:
    if cols < 1 or rows < 1:
        raise ValueError("grid needs at least one cell in each direction")
    xs = np.arange(cols + 1) * (width / cols)
    ys = np.arange(rows + 1) * (height / rows)
    xs[-1], ys[-1] = width, height
    gx, gy = np.meshgrid(xs, ys)
    verts = np.stack([gx, gy], axis=-1)
    verts.flags.writeable = False
    return WarpGrid(float(width), float(height), cols, rows, verts, verts)


def warp_grid(grid: WarpGrid, nodes: NodePair, cfg: MlsConfig = DEFAULT_CONFIG) -> WarpGrid:
    flat = grid.vertices.reshape(-1, 2)
    try:
        warped = mls_warp_points(flat, nodes, cfg)
    except DegenerateWarpError as exc:
        raise DegenerateWarpError(exc.index, flat[exc.index], f"grid vertex {exc.index}") from None
    warped = warped.reshape(grid.vertices.shape)
    warped.flags.writeable = False
    return WarpGrid(grid.width, grid.height, grid.cols, grid.rows, grid.vertices, warped)


def grid_warp_points(points, grid: WarpGrid) -> np.ndarray:
    ix, iy, D = grid.cell_weights(points)
    g = grid.warped
    corners = np.stack([g[iy, ix], g[iy, ix + 1], g[iy + 1, ix], g[iy + 1, ix + 1]], axis=1)
    return np.einsum("nk,nkd->nd", D, corners)


def grid_warp_point(v, grid: WarpGrid) -> np.ndarray:
    return grid_warp_points(np.asarray(v, dtype=np.float64).reshape(1, 2), grid)[0]


# ---------------------------------------------------------------------------
# Rasters
# ---------------------------------------------------------------------------


def _as_float_image(image):
    img = np.asarray(image)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    return np.ascontiguousarray(img, dtype=np.float64), squeeze, img.dtype


def _restore(out, squeeze, dtype):
    if squeeze:
        out = out[:, :, 0]
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        out = np.clip(np.rint(out), info.min, info.max)
    return out.astype(dtype, copy=False)


def resample_frame(image, nodes: NodePair, grid_dims: tuple[int, int] = (20, 20),
                   cfg: MlsConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Render a frame warped by ``nodes`` using the grid approximation.

    Backward mapping: the output lattice is warped with source and target
    roles swapped, every output pixel reads the input at the interpolated
    position, and positions outside the input come out black.
    """
    img, squeeze, dtype = _as_float_image(image)
    H, W = img.shape[:2]
    grid = warp_grid(build_grid(W, H, *grid_dims), nodes.swapped(), cfg)
    out = np.empty_like(img)
    _kernels.grid_remap(img, grid.warped, float(W), float(H), SAMPLE_TOLERANCE, out)
    return _restore(out, squeeze, dtype)


def pixel_coordinates(height: int, width: int) -> np.ndarray:
    gx, gy = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return np.stack([gx, gy], axis=-1)


def sample_image(image, coords) -> np.ndarray:
    """Bilinear samples of ``image`` at ``coords`` (H, W, 2) in (x, y)
    order; positions outside the image come out black."""
    img, squeeze, dtype = _as_float_image(image)
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    out = np.empty(coords.shape[:2] + (img.shape[2],))
    _kernels.remap(img, coords, SAMPLE_TOLERANCE, out)
    return _restore(out, squeeze, dtype)


def dense_resample_frame(image, nodes: NodePair, cfg: MlsConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Same contract as :func:`resample_frame` but evaluating the backward
    MLS warp at every pixel."""
    img, squeeze, dtype = _as_float_image(image)
    H, W = img.shape[:2]
    field = mls_warp_points(pixel_coordinates(H, W).reshape(-1, 2), nodes.swapped(), cfg)
    out = np.empty_like(img)
    _kernels.remap(img, np.ascontiguousarray(field.reshape(H, W, 2)), SAMPLE_TOLERANCE, out)
    return _restore(out, squeeze, dtype)


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchResult:
    nodes: int
    grid: tuple[int, int]
    raster: tuple[int, int]   # (height, width)
    dense_ms: float
    grid_ms: float

    @property
    def speedup(self) -> float:
        return self.dense_ms / self.grid_ms

    def row(self) -> list:
        return [self.nodes, f"{self.grid[0]}x{self.grid[1]}", f"{self.raster[1]}x{self.raster[0]}",
                f"{self.dense_ms:.3f}", f"{self.grid_ms:.3f}", f"{self.speedup:.2f}"]


BENCH_HEADER = ["nodes", "grid", "raster", "dense_ms", "grid_ms", "speedup"]


def smooth_node_field(n_nodes: int, width: float, height: float, amplitude: float = 8.0,
                      seed: int = 0) -> NodePair:
    """Random nodes displaced by a low-frequency sinusoidal field."""
    rng = np.random.default_rng(seed)
    q = np.column_stack([rng.uniform(0, width, n_nodes), rng.uniform(0, height, n_nodes)])
    phase = rng.uniform(0, 2 * np.pi, 4)
    kx, ky = 2 * np.pi / width, 2 * np.pi / height
    dx = np.sin(kx * q[:, 0] + phase[0]) * np.cos(ky * q[:, 1] + phase[1])
    dy = np.cos(kx * q[:, 0] + phase[2]) * np.sin(ky * q[:, 1] + phase[3])
    return NodePair(q, q + (amplitude / np.sqrt(2)) * np.column_stack([dx, dy]))


def _median_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def bench_warp(raster: tuple[int, int] = (REF_HEIGHT, REF_WIDTH), n_nodes: int = 512,
               grid_dims: tuple[int, int] = (20, 20), repeats: int = 3,
               dense_repeats: int | None = None, seed: int = 0,
               cfg: MlsConfig = DEFAULT_CONFIG) -> BenchResult:
    """Median wall time of dense per-pixel warping versus the grid path on
    the same frame and nodes. Both include the image resampling."""
    H, W = raster
    rng = np.random.default_rng(seed)
    image = rng.integers(0, 256, (H, W, 3)).astype(np.uint8)
    nodes = smooth_node_field(n_nodes, W, H, seed=seed)
    # compile outside the timed region
    resample_frame(image[:8, :8], smooth_node_field(4, 8, 8), grid_dims, cfg)
    dense_resample_frame(image[:8, :8], smooth_node_field(4, 8, 8), cfg)
    grid_ms = _median_ms(lambda: resample_frame(image, nodes, grid_dims, cfg), repeats)
    dense_ms = _median_ms(lambda: dense_resample_frame(image, nodes, cfg),
                          repeats if dense_repeats is None else dense_repeats)
    return BenchResult(n_nodes, tuple(grid_dims), (H, W), dense_ms, grid_ms)


def bench_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for r in results:
        w.writerow(r.row())
    return buf.getvalue()
