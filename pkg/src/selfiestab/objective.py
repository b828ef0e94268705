"""Window loss: background point motion, face motion and their lambda blend.

Displacements for a window of T frames are an array of shape ``(T - 2, M, 2)``
holding ``Qh_t - Q_t`` for the interior frames. The first frame is never
warped and the last keeps ``Qh_T = Q_T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .mls import DEFAULT_CONFIG, DegenerateWarpError, MlsConfig, MlsOperator
from .tracks import TrackWindow

NORMS = ("point", "frobenius")


@dataclass(frozen=True)
class LossBreakdown:
    background: float
    foreground: float
    total: float
    lam: float


class WindowProblem:
    """Everything about a window that does not depend on the displacements.

    Building one evaluates the MLS weights for every interior frame once;
    the loss can then be evaluated (and differentiated) cheaply for many
    displacement candidates.
    """

    def __init__(self, window: TrackWindow, cfg: MlsConfig = DEFAULT_CONFIG, norm: str = "point"):
        if norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if window.length < 3:
            raise ValueError("a window needs at least three frames")
        self.window = window
        self.cfg = cfg
        self.norm = norm
        T = window.length
        self.T = T
        self.n_points = len(window.points(0))
        self.nodes = [None] + [window.nodes(k) for k in range(1, T)]
        self.n_nodes = len(self.nodes[1])
        self.face_valid = [window.face_valid(k) for k in range(T)]
        self.ops: dict[int, MlsOperator] = {}
        for k in range(1, T - 1):
            pts = window.points(k)
            if self.face_valid[k]:
                pts = np.concatenate([pts, window.face(k)], axis=0)
            self.ops[k] = MlsOperator(pts, self.nodes[k], cfg)

    @property
    def displacement_shape(self) -> tuple[int, int, int]:
        return (self.T - 2, self.n_nodes, 2)

    def zero_displacements(self) -> np.ndarray:
        return np.zeros(self.displacement_shape)

    def _targets(self, disp):
        """Node targets Qh for frames 1..T-1 (index 0 unused)."""
        out = [None]
        for k in range(1, self.T - 1):
            out.append(ad.add(self.nodes[k], disp[k - 1]))
        out.append(ad.as_tensor(self.nodes[self.T - 1]))
        return out

    def _warped(self, targets):
        """Warped (P_k, F_k) for every frame; identity on the endpoints."""
        w = self.window
        n = self.n_points
        P, F = [], []
        for k in range(self.T):
            if k in self.ops:
                try:
                    moved = ad.mls_warp(targets[k], self.ops[k])
                except DegenerateWarpError as exc:
                    raise DegenerateWarpError(exc.index, self.ops[k].points[exc.index],
                                              f"window frame {k + 1}") from None
                P.append(ad.take(moved, slice(0, n)))
                F.append(ad.take(moved, slice(n, 2 * n)) if self.face_valid[k] else None)
            else:
                P.append(ad.as_tensor(w.points(k)))
                F.append(ad.as_tensor(w.face(k)) if self.face_valid[k] else None)
        return P, F

    def _distance(self, residual):
        if self.norm == "point":
            return ad.total(ad.row_norms(residual))
        return ad.total(ad.row_norms(ad.reshape(residual, (1, -1))))

    def graph(self, disp) -> tuple[ad.Tensor, ad.Tensor]:
        """Background and foreground loss tensors for displacements ``disp``
        (a sequence of ``T - 2`` tensors or arrays)."""
        if len(disp) != self.T - 2:
            raise ValueError(f"expected {self.T - 2} displacement sets, got {len(disp)}")
        targets = self._targets(disp)
        P, F = self._warped(targets)
        lb = ad.Tensor(0.0)
        lf = ad.Tensor(0.0)
        for t in range(self.T - 1):
            lb = ad.add(lb, self._distance(ad.add(P[t], ad.scale(targets[t + 1], -1.0))))
            if F[t] is not None and F[t + 1] is not None:
                lf = ad.add(lf, self._distance(ad.add(F[t], ad.scale(F[t + 1], -1.0))))
        return lb, lf

    def total_graph(self, disp, lam: float) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
        lb, lf = self.graph(disp)
        return ad.add(ad.scale(lb, 1.0 - lam), ad.scale(lf, lam)), lb, lf

    def evaluate(self, disp, lam: float) -> LossBreakdown:
        disp = np.asarray(disp, dtype=np.float64)
        total, lb, lf = self.total_graph(list(disp), lam)
        return LossBreakdown(float(lb.value), float(lf.value), float(total.value), lam)

    def value_and_grad(self, disp, lam: float) -> tuple[LossBreakdown, np.ndarray]:
        leaves = [ad.Tensor(d, requires_grad=True) for d in np.asarray(disp, dtype=np.float64)]
        total, lb, lf = self.total_graph(leaves, lam)
        total.backward()
        grad = np.stack([t.grad if t.grad is not None else np.zeros_like(t.value) for t in leaves])
        return LossBreakdown(float(lb.value), float(lf.value), float(total.value), lam), grad


def effective_lambda(window: TrackWindow, lam: float) -> float:
    """Windows with any frame lacking face vertices fall back to the
    background-only loss."""
    return lam if window.all_faces_valid else 0.0


def _check_lambda(lam: float) -> None:
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie strictly inside (0, 1), got {lam}")


def background_loss(window: TrackWindow, disp, cfg: MlsConfig = DEFAULT_CONFIG,
                    norm: str = "point") -> float:
    lb, _ = WindowProblem(window, cfg, norm).graph(list(np.asarray(disp, dtype=np.float64)))
    return float(lb.value)


def foreground_loss(window: TrackWindow, disp, cfg: MlsConfig = DEFAULT_CONFIG,
                    norm: str = "point") -> float:
    _, lf = WindowProblem(window, cfg, norm).graph(list(np.asarray(disp, dtype=np.float64)))
    return float(lf.value)


def total_loss(window: TrackWindow, disp, lam: float = 0.3, cfg: MlsConfig = DEFAULT_CONFIG,
               norm: str = "point") -> LossBreakdown:
    _check_lambda(lam)
    return WindowProblem(window, cfg, norm).evaluate(disp, lam)
