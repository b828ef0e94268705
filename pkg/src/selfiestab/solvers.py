"""Per-window displacement solver that runs Adam directly on the node
displacements."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import AdamState, adam_step
from .mls import DEFAULT_CONFIG, MlsConfig
from .objective import WindowProblem, effective_lambda
from .tracks import TrackWindow


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SolverReport:
    displacements: np.ndarray
    loss_before: float
    loss_after: float
    iterations: int
    wall_time: float
    lam: float


def solve_direct(window: TrackWindow, lam: float = 0.3, iters: int = 1000, lr: float = 1e-1,
                 beta1: float = 0.9, beta2: float = 0.99, cfg: MlsConfig = DEFAULT_CONFIG,
                 tol: float = 1e-9, problem: WindowProblem | None = None) -> SolverReport:
    """Minimise the window loss over the interior node displacements.

    Starts from zero displacement and keeps the best iterate seen, so the
    reported loss never exceeds the starting loss.
    """
    t0 = time.perf_counter()
    if problem is None:
        problem = WindowProblem(window, cfg)
    lam_eff = effective_lambda(window, lam)
    disp = problem.zero_displacements()
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2)
    best, grad = problem.value_and_grad(disp, lam_eff)
    loss_before = best.total
    best_disp = disp.copy()
    it = 0
    for it in range(1, iters + 1):
        if best.total < tol:
            it -= 1
            break
        new, state = adam_step(state, {"d": disp}, {"d": grad})
        disp = new["d"]
        loss, grad = problem.value_and_grad(disp, lam_eff)
        if not math.isfinite(loss.total):
            raise DivergenceError(f"non-finite loss at iterate {it}")
        if loss.total < best.total:
            best, best_disp = loss, disp.copy()
    return SolverReport(best_disp, loss_before, best.total, it, time.perf_counter() - t0, lam)
