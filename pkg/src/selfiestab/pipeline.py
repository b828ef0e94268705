"""Online sliding-window stabilization.

Frames are pushed one at a time. Once a full window is buffered its node
displacements are solved, the window's second frame is warped, and that
frame's points and face vertices are replaced by their warped positions so
that the next window (which starts at this frame) sees stabilized
coordinates. The buffer then drops its oldest frame.

Each push after warm-up emits exactly one frame: the oldest buffered frame,
whose warp (if any) is final by then.
"""

from __future__ import annotations

import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .mls import DEFAULT_CONFIG, DegenerateWarpError, MlsConfig, NodePair, mls_warp_points, resample_frame
from .solvers import DivergenceError, solve_direct
from .tracks import (DEFAULT_LAMBDA, DEFAULT_WINDOW, REF_HEIGHT, REF_WIDTH, FrameTracks,
                     LambdaSchedule, TrackWindow)

log = logging.getLogger(__name__)

Solver = Callable[[TrackWindow, float], np.ndarray]


class SequencingError(ValueError):
    pass


def direct_solver(iters: int = 1000, lr: float = 1e-1, cfg: MlsConfig = DEFAULT_CONFIG) -> Solver:
    def solve(window: TrackWindow, lam: float) -> np.ndarray:
        return solve_direct(window, lam, iters=iters, lr=lr, cfg=cfg).displacements
    return solve


def net_solver(weights) -> Solver:
    from .network import infer_window

    def solve(window: TrackWindow, lam: float) -> np.ndarray:
        return infer_window(window, lam, weights)
    return solve


@dataclass
class StabilizedFrame:
    """One emitted frame. ``nodes`` is ``None`` for a stream's first frame,
    which has no warp nodes; unwarped frames carry an identity pair."""

    frame_index: int
    nodes: NodePair | None
    lam: float
    warped: bool
    solve_ms: float = 0.0
    warp_ms: float = 0.0
    tracks: FrameTracks | None = None     # stabilized coordinates
    raster: np.ndarray | None = None

    def record(self, scale=(1.0, 1.0), timing: bool = True, digits: int | None = 6) -> dict:
        def fmt(a):
            if a is None:
                return None
            a = a * np.asarray(scale)
            return (np.round(a, digits) if digits is not None else a).tolist()

        out = {
            "frame": self.frame_index,
            "Q": fmt(None if self.nodes is None else self.nodes.source),
            "Qhat": fmt(None if self.nodes is None else self.nodes.target),
            "lambda": self.lam,
            "solve_ms": round(self.solve_ms, 3) if timing else None,
            "warp_ms": round(self.warp_ms, 3) if timing else None,
        }
        return out


@dataclass
class _Slot:
    tracks: FrameTracks
    lam: float
    nodes: NodePair | None = None
    warped: bool = False
    solve_ms: float = 0.0
    warp_ms: float = 0.0
    raster: np.ndarray | None = None


@dataclass
class StreamState:
    solver: Solver
    window: int = DEFAULT_WINDOW
    lam: float = DEFAULT_LAMBDA
    schedule: LambdaSchedule | None = None
    cfg: MlsConfig = DEFAULT_CONFIG
    grid_dims: tuple[int, int] = (20, 20)
    buffer: deque = field(default_factory=deque)
    next_index: int | None = None
    failures: int = 0

    def __post_init__(self):
        if self.window < 3:
            raise ValueError("window length must be >= 3")
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"lambda must lie strictly inside (0, 1), got {self.lam}")

    def lambda_for(self, frame_index: int) -> float:
        return self.schedule.at(frame_index) if self.schedule is not None else self.lam


def _identity_nodes(prev: FrameTracks | None) -> NodePair | None:
    if prev is None:
        return None
    return NodePair.identity(prev.nodes_q_next)


def push_frame(state: StreamState, frame: FrameTracks, lam: float | None = None,
               raster: np.ndarray | None = None) -> StabilizedFrame | None:
    """Add a frame; returns the frame leaving the buffer, if any."""
    if state.next_index is not None and frame.frame_index != state.next_index:
        raise SequencingError(f"expected frame {state.next_index}, got {frame.frame_index}")
    if lam is not None and not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie strictly inside (0, 1), got {lam}")
    state.next_index = frame.frame_index + 1
    prev = state.buffer[-1].tracks if state.buffer else None
    if prev is not None and prev.nodes_q_next is None:
        raise SequencingError(f"frame {prev.frame_index} has no Qnext but the stream continued")
    lam = state.lambda_for(frame.frame_index) if lam is None else lam
    state.buffer.append(_Slot(frame, lam, _identity_nodes(prev), raster=raster))
    if len(state.buffer) < state.window:
        return None
    _solve_second(state)
    return _emit(state.buffer.popleft())


def _solve_second(state: StreamState) -> None:
    slots = list(state.buffer)
    second = slots[1]
    # the lambda in force when the window's last frame arrived
    lam = slots[-1].lam
    window = TrackWindow(tuple(s.tracks for s in slots))
    t0 = time.perf_counter()
    try:
        disp = state.solver(window, lam)[0]
        target = window.nodes(1) + disp
        if not np.all(np.isfinite(target)):
            raise DivergenceError("solver returned non-finite displacements")
        nodes = NodePair(window.nodes(1), target)
        f = second.tracks
        pts = mls_warp_points(f.points_p, nodes, state.cfg, f"frame {f.frame_index}")
        face = None if f.face is None else mls_warp_points(f.face, nodes, state.cfg,
                                                           f"frame {f.frame_index} face")
    except (DegenerateWarpError, DivergenceError, FloatingPointError) as exc:
        state.failures += 1
        log.warning("frame %d passed through unwarped: %s", second.tracks.frame_index, exc)
        second.solve_ms = (time.perf_counter() - t0) * 1e3
        second.lam = lam
        return
    second.solve_ms = (time.perf_counter() - t0) * 1e3
    t1 = time.perf_counter()
    second.tracks = replace(second.tracks, points_p=pts, face=face)
    second.nodes = nodes
    second.warped = True
    second.lam = lam
    if second.raster is not None:
        second.raster = warp_raster(second.raster, nodes, state.grid_dims, state.cfg)
    second.warp_ms = (time.perf_counter() - t1) * 1e3


def warp_raster(image: np.ndarray, nodes: NodePair, grid_dims=(20, 20),
                cfg: MlsConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Warp a raster of any size by reference-frame nodes."""
    H, W = image.shape[:2]
    scaled = nodes.scaled(W / REF_WIDTH, H / REF_HEIGHT)
    return resample_frame(image, scaled, grid_dims, cfg)


def _emit(slot: _Slot) -> StabilizedFrame:
    tracks = slot.tracks
    return StabilizedFrame(tracks.frame_index, slot.nodes, slot.lam, slot.warped,
                           slot.solve_ms, slot.warp_ms, tracks, slot.raster)


def flush(state: StreamState) -> list[StabilizedFrame]:
    """Emit everything still buffered; frames past the last full window
    stay unwarped."""
    out = [_emit(s) for s in state.buffer]
    state.buffer.clear()
    return out


def stabilize_stream(frames: Iterable[FrameTracks], solver: Solver, lam: float = DEFAULT_LAMBDA,
                     window: int = DEFAULT_WINDOW, schedule: LambdaSchedule | None = None,
                     cfg: MlsConfig = DEFAULT_CONFIG, rasters: Iterable | None = None,
                     grid_dims=(20, 20)) -> list[StabilizedFrame]:
    state = StreamState(solver, window, lam, schedule, cfg, grid_dims)
    outputs = []
    raster_iter = iter(rasters) if rasters is not None else None
    for frame in frames:
        raster = next(raster_iter) if raster_iter is not None else None
        emitted = push_frame(state, frame, raster=raster)
        if emitted is not None:
            outputs.append(emitted)
    outputs.extend(flush(state))
    return outputs


def stabilized_tracks(outputs: Sequence[StabilizedFrame]) -> list[FrameTracks]:
    """Output tracks: warped P and F of every frame with each frame's
    correspondences replaced by the next frame's node targets."""
    frames = []
    for k, o in enumerate(outputs):
        t = o.tracks
        nxt = None
        if k + 1 < len(outputs) and outputs[k + 1].nodes is not None:
            nxt = outputs[k + 1].nodes.target
        frames.append(replace(t, nodes_q_next=nxt))
    return frames


def apply_outputs(frames: Sequence[FrameTracks], pairs: Sequence[NodePair | None],
                  cfg: MlsConfig = DEFAULT_CONFIG) -> list[FrameTracks]:
    """Stabilized tracks from input frames and per-frame node pairs, as
    read back from an output file."""
    if len(frames) != len(pairs):
        raise ValueError(f"{len(frames)} frames but {len(pairs)} node pairs")
    out = []
    for k, (f, pair) in enumerate(zip(frames, pairs)):
        pts, face = f.points_p, f.face
        if pair is not None:
            pts = mls_warp_points(pts, pair, cfg, f"frame {f.frame_index}")
            if face is not None:
                face = mls_warp_points(face, pair, cfg, f"frame {f.frame_index} face")
        nxt = f.nodes_q_next
        if k + 1 < len(pairs) and pairs[k + 1] is not None:
            nxt = pairs[k + 1].target
        out.append(replace(f, points_p=pts, nodes_q_next=nxt, face=face))
    return out


def read_outputs(source: Iterable[str]) -> tuple[tuple[int, int] | None, list[dict]]:
    """Parse an output JSONL stream into its optional ``(width, height)``
    header and the frame records (coordinates as arrays, source pixels)."""
    size = None
    records = []
    for line_no, line in enumerate(source, 1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"line {line_no}: invalid JSON ({exc.msg})") from None
        if "frame" not in rec:
            size = (int(rec["width"]), int(rec["height"]))
            continue
        for key in ("Q", "Qhat"):
            if rec.get(key) is not None:
                rec[key] = np.asarray(rec[key], dtype=np.float64)
        records.append(rec)
    return size, records
