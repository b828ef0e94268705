"""Point-track data model, JSONL ingestion, synthetic scenes and augmentation.

All coordinates handled by the solvers live in the reference frame of
832x448 pixels. Arrays of points are stored as ``(N, 2)`` float64 arrays with
one ``(x, y)`` row per point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Sequence

import numpy as np

REF_WIDTH = 832
REF_HEIGHT = 448
NUM_POINTS = 512
DEFAULT_LAMBDA = 0.3
DEFAULT_WINDOW = 5


class TrackError(ValueError):
    """Base class for track ingestion problems."""


class TrackParseError(TrackError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class TrackStructureError(TrackError):
    pass


class TrackDataError(TrackError):
    pass


def _frozen(a, name: str) -> np.ndarray | None:
    if a is None:
        return None
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise TrackDataError(f"{name} must have shape (N, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise TrackDataError(f"{name} contains non-finite coordinates")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class FrameTracks:
    """Tracks attached to one frame.

    ``points_p`` are features detected in this frame, ``nodes_q_next`` their
    correspondences in the next frame (index aligned), ``face`` the sampled
    face-mesh projections. ``nodes_q_next`` is ``None`` for the final frame
    of a stream.
    """

    frame_index: int
    points_p: np.ndarray
    nodes_q_next: np.ndarray | None
    face: np.ndarray | None = None
    face_valid: bool = False

    def __post_init__(self):
        object.__setattr__(self, "points_p", _frozen(self.points_p, "points_p"))
        object.__setattr__(self, "nodes_q_next", _frozen(self.nodes_q_next, "nodes_q_next"))
        object.__setattr__(self, "face", _frozen(self.face, "face"))
        if self.frame_index < 1:
            raise TrackStructureError("frame_index must be >= 1")
        if self.face is None and self.face_valid:
            raise TrackStructureError("face_valid requires face vertices")
        if self.face is not None and not self.face_valid:
            object.__setattr__(self, "face", None)
        n = len(self.points_p)
        if self.nodes_q_next is not None and len(self.nodes_q_next) != n:
            raise TrackStructureError(
                f"frame {self.frame_index}: P has {n} points but Qnext has {len(self.nodes_q_next)}"
            )

    @property
    def n_points(self) -> int:
        return len(self.points_p)

    def face_or_zeros(self) -> np.ndarray:
        if self.face_valid:
            return self.face
        return np.zeros((self.n_points, 2))

    def transformed(self, fn) -> "FrameTracks":
        """Apply ``fn`` to every coordinate array living in this frame's image
        (P and F; the next-frame correspondences are left alone)."""
        return replace(
            self,
            points_p=fn(self.points_p),
            face=None if self.face is None else fn(self.face),
        )


@dataclass(frozen=True)
class TrackWindow:
    """T consecutive frames. Frame ``k`` (0-based) has nodes
    ``frames[k - 1].nodes_q_next`` for ``k >= 1``; frame 0 is never warped."""

    frames: tuple[FrameTracks, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if len(frames) < 2:
            raise TrackStructureError("a window needs at least two frames")
        for a, b in zip(frames, frames[1:]):
            if b.frame_index != a.frame_index + 1:
                raise TrackStructureError(
                    f"non-consecutive frames {a.frame_index} -> {b.frame_index}"
                )
        for f in frames[:-1]:
            if f.nodes_q_next is None:
                raise TrackStructureError(
                    f"frame {f.frame_index} lacks Qnext but is not the window's last frame"
                )

    @property
    def length(self) -> int:
        return len(self.frames)

    def points(self, k: int) -> np.ndarray:
        return self.frames[k].points_p

    def nodes(self, k: int) -> np.ndarray:
        """Warp nodes Q of frame ``k`` (0-based, k >= 1)."""
        if k < 1:
            raise IndexError("the first frame of a window has no warp nodes")
        return self.frames[k - 1].nodes_q_next

    def face(self, k: int) -> np.ndarray:
        return self.frames[k].face_or_zeros()

    def face_valid(self, k: int) -> bool:
        return self.frames[k].face_valid

    @property
    def all_faces_valid(self) -> bool:
        return all(f.face_valid for f in self.frames)


def windows_from_frames(frames: Sequence[FrameTracks], length: int = DEFAULT_WINDOW,
                        stride: int = 1) -> list[TrackWindow]:
    return [TrackWindow(tuple(frames[i:i + length]))
            for i in range(0, len(frames) - length + 1, stride)]


@dataclass(frozen=True)
class LambdaSchedule:
    """Per-frame lambda values, held constant (step function) between entries."""

    entries: tuple[tuple[int, float], ...] = ()
    default: float = DEFAULT_LAMBDA

    def __post_init__(self):
        entries = tuple(sorted((int(f), float(v)) for f, v in self.entries))
        object.__setattr__(self, "entries", entries)
        for _, v in entries + ((0, self.default),):
            if not 0.0 < v < 1.0:
                raise ValueError(f"lambda must lie strictly inside (0, 1), got {v}")

    def at(self, frame_index: int) -> float:
        value = self.default
        for f, v in self.entries:
            if f > frame_index:
                break
            value = v
        return value

    @classmethod
    def from_csv(cls, text: str, default: float = DEFAULT_LAMBDA) -> "LambdaSchedule":
        entries = []
        for line_no, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            a, _, b = line.partition(",")
            try:
                entries.append((int(a), float(b)))
            except ValueError:
                if line_no == 1:
                    continue  # header row
                raise TrackParseError(line_no, f"bad lambda schedule row {line!r}")
        return cls(tuple(entries), default)


# ---------------------------------------------------------------------------
# JSONL track files
# ---------------------------------------------------------------------------


def _resample_to(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(points) > n:
        return points[np.sort(rng.choice(len(points), n, replace=False))]
    if len(points) == n:
        return points
    extra = rng.integers(0, len(points), size=n - len(points))
    return np.concatenate([points, points[extra]], axis=0)


def load_tracks(source: IO[str] | IO[bytes] | Iterable[str],
                frame_size: tuple[int, int] | None = None,
                seed: int = 0,
                n_points: int = NUM_POINTS) -> list[FrameTracks]:
    """Read a track JSONL stream and rescale it into the reference frame.

    The header record supplies the source resolution; ``frame_size``
    overrides it. Frames with fewer than ``n_points`` points are padded by
    resampling with replacement (deterministic in ``seed``), keeping P and
    Qnext correspondences paired.
    """
    records = []
    header = None
    for line_no, raw in enumerate(source, 1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        line = raw.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TrackParseError(line_no, f"invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise TrackParseError(line_no, "record is not an object")
        if "frame" not in rec:
            if header is not None or records:
                raise TrackParseError(line_no, "unexpected header record")
            if "width" not in rec or "height" not in rec:
                raise TrackParseError(line_no, "header must carry width and height")
            header = rec
            continue
        records.append((line_no, rec))

    if frame_size is None:
        if header is None:
            raise TrackStructureError("missing {width, height} header record")
        frame_size = (int(header["width"]), int(header["height"]))
    width, height = frame_size
    if width <= 0 or height <= 0:
        raise ValueError("frame_size must be positive")
    scale = np.array([REF_WIDTH / width, REF_HEIGHT / height])

    rng = np.random.default_rng(seed)
    frames: list[FrameTracks] = []
    for i, (line_no, rec) in enumerate(records):
        try:
            index = int(rec["frame"])
            p = np.asarray(rec["P"], dtype=np.float64)
            q = rec.get("Qnext")
            q = None if q is None else np.asarray(q, dtype=np.float64)
            f = rec.get("F")
            f = None if f is None else np.asarray(f, dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise TrackParseError(line_no, f"malformed frame record ({exc})") from None
        for name, arr in (("P", p), ("Qnext", q), ("F", f)):
            if arr is not None and arr.size and (arr.ndim != 2 or arr.shape[1] != 2):
                raise TrackParseError(line_no, f"{name} must be a list of [x, y] pairs")
        if frames and index != frames[-1].frame_index + 1:
            raise TrackStructureError(
                f"line {line_no}: frame {index} does not follow frame {frames[-1].frame_index}"
            )
        if p.size == 0:
            raise TrackDataError(f"line {line_no}: frame {index} has no points")
        last = i == len(records) - 1
        if q is None and not last:
            raise TrackStructureError(f"line {line_no}: only the last frame may omit Qnext")
        if q is not None and len(q) != len(p):
            raise TrackStructureError(f"line {line_no}: P and Qnext lengths differ")

        p = p * scale
        q = None if q is None else q * scale
        if len(p) != n_points:
            idx = _resample_to(np.arange(len(p)), n_points, rng)
            p = p[idx]
            q = None if q is None else q[idx]
        face_valid = f is not None and f.size > 0
        if face_valid:
            f = _resample_to(f * scale, n_points, rng)
        frames.append(FrameTracks(index, p, q, f if face_valid else None, face_valid))
    return frames


def _pairs(a: np.ndarray | None, scale: np.ndarray, digits: int | None):
    if a is None:
        return None
    out = a * scale
    if digits is not None:
        out = np.round(out, digits)
    return out.tolist()


def dump_tracks(frames: Sequence[FrameTracks], out: IO[str],
                frame_size: tuple[int, int] = (REF_WIDTH, REF_HEIGHT),
                digits: int | None = None) -> None:
    """Write frames (reference coordinates) as JSONL at ``frame_size``."""
    width, height = frame_size
    scale = np.array([width / REF_WIDTH, height / REF_HEIGHT])
    out.write(json.dumps({"width": width, "height": height}) + "\n")
    for f in frames:
        rec = {"frame": f.frame_index, "P": _pairs(f.points_p, scale, digits)}
        if f.nodes_q_next is not None:
            rec["Qnext"] = _pairs(f.nodes_q_next, scale, digits)
        rec["F"] = _pairs(f.face, scale, digits) if f.face_valid else None
        out.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """A planar world observed through a jittering camera.

    Camera pose of frame t maps a world point X to
    ``R(theta_t) (X - center) + center + d_t`` with ``d_t`` the translation
    jitter plus ``drift * t``. The face cluster additionally moves by its
    own translation jitter before the camera transform.
    """

    frame_count: int = 60
    background_count: int = 2048
    background_box: tuple[float, float, float, float] = (-40.0, -40.0, REF_WIDTH + 40.0, REF_HEIGHT + 40.0)
    face_count: int = NUM_POINTS
    face_center: tuple[float, float] = (REF_WIDTH / 2, REF_HEIGHT / 2)
    face_radius: float = 90.0
    translation_std: float = 4.0
    rotation_std_deg: float = 0.0
    drift: tuple[float, float] = (0.0, 0.0)
    face_jitter_std: float = 0.0
    correspondence_noise: float = 0.0
    pinned_frames: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.frame_count < 2:
            raise ValueError("frame_count must be >= 2")
        if self.background_count < NUM_POINTS or self.face_count < NUM_POINTS:
            raise ValueError(f"point counts must be >= {NUM_POINTS}")
        for name in ("translation_std", "rotation_std_deg", "face_jitter_std",
                     "correspondence_noise", "face_radius"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class JitterLog:
    """Ground truth for a synthetic sequence (frame order, 0-based rows)."""

    theta: np.ndarray          # camera rotation per frame, radians
    translation: np.ndarray    # camera translation per frame, (T, 2)
    face_offset: np.ndarray    # extra face translation per frame (world space), (T, 2)
    center: tuple[float, float] = (REF_WIDTH / 2, REF_HEIGHT / 2)

    def camera(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(A, b)`` with ``x = A @ X + b`` for frame ``t`` (0-based)."""
        R = rotation(float(self.theta[t]))
        c = np.asarray(self.center)
        return R, c - R @ c + self.translation[t]

    def relative(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Map from frame ``t`` image coordinates to frame ``t + 1``."""
        A0, b0 = self.camera(t)
        A1, b1 = self.camera(t + 1)
        A = A1 @ A0.T
        return A, b1 - A @ b0

    def to_json(self) -> dict:
        return {
            "center": list(self.center),
            "theta_deg": np.degrees(self.theta).tolist(),
            "translation": self.translation.tolist(),
            "face_offset": self.face_offset.tolist(),
        }


def synthesize_scene(spec: SyntheticSceneSpec) -> tuple[list[FrameTracks], JitterLog]:
    rng = np.random.default_rng(spec.seed)
    x0, y0, x1, y1 = spec.background_box
    world = np.column_stack([rng.uniform(x0, x1, spec.background_count),
                             rng.uniform(y0, y1, spec.background_count)])
    # face: uniform disc around the face center
    r = spec.face_radius * np.sqrt(rng.uniform(0, 1, spec.face_count))
    phi = rng.uniform(0, 2 * np.pi, spec.face_count)
    face_world = np.asarray(spec.face_center) + np.column_stack([r * np.cos(phi), r * np.sin(phi)])
    face_world = face_world[rng.choice(spec.face_count, NUM_POINTS, replace=False)]

    T = spec.frame_count
    theta = np.radians(rng.normal(0.0, spec.rotation_std_deg, T)) if spec.rotation_std_deg > 0 else np.zeros(T)
    trans = rng.normal(0.0, spec.translation_std, (T, 2)) if spec.translation_std > 0 else np.zeros((T, 2))
    trans = trans + np.outer(np.arange(T), spec.drift)
    face_off = rng.normal(0.0, spec.face_jitter_std, (T, 2)) if spec.face_jitter_std > 0 else np.zeros((T, 2))
    for t in spec.pinned_frames:
        theta[t] = 0.0
        trans[t] = np.asarray(spec.drift) * t
        face_off[t] = 0.0
    log = JitterLog(theta, trans, face_off)

    def project(t: int, X: np.ndarray) -> np.ndarray:
        A, b = log.camera(t)
        return X @ A.T + b

    frames = []
    for t in range(T):
        idx = rng.choice(spec.background_count, NUM_POINTS, replace=False)
        p = project(t, world[idx])
        q = None
        if t + 1 < T:
            q = project(t + 1, world[idx])
            if spec.correspondence_noise > 0:
                q = q + rng.normal(0.0, spec.correspondence_noise, q.shape)
        f = project(t, face_world + face_off[t])
        frames.append(FrameTracks(t + 1, p, q, f, True))
    return frames, log


# ---------------------------------------------------------------------------
# Training-time augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineDraw:
    frame: int            # 0-based position within the window
    angle_deg: float
    translation: tuple[float, float]

    def matrix(self, center=(REF_WIDTH / 2, REF_HEIGHT / 2)) -> tuple[np.ndarray, np.ndarray]:
        R = rotation(math.radians(self.angle_deg))
        c = np.asarray(center)
        return R, c - R @ c + np.asarray(self.translation)


def augment_window(window: TrackWindow, rng: np.random.Generator,
                   max_angle_deg: float = 10.0, max_shift: float = 50.0,
                   draws: list[AffineDraw] | None = None) -> TrackWindow:
    """Perturb every interior frame by a random rotation and translation
    about the frame center. Endpoints are returned untouched.

    ``draws``, when given a list, receives the sampled transforms.
    """
    if window.length < 3:
        raise TrackStructureError("augmentation needs a window of length >= 3")
    frames = list(window.frames)
    for k in range(1, window.length - 1):
        draw = AffineDraw(k, float(rng.uniform(-max_angle_deg, max_angle_deg)),
                          tuple(rng.uniform(-max_shift, max_shift, 2).tolist()))
        if draws is not None:
            draws.append(draw)
        if draw.angle_deg == 0.0 and draw.translation == (0.0, 0.0):
            continue
        A, b = draw.matrix()

        def fn(x, A=A, b=b):
            return x @ A.T + b

        frames[k] = frames[k].transformed(fn)
        prev = frames[k - 1]
        frames[k - 1] = replace(prev, nodes_q_next=fn(prev.nodes_q_next))
    return TrackWindow(tuple(frames))


def permute_window(window: TrackWindow, rng: np.random.Generator) -> TrackWindow:
    """Shuffle point order: each (P_t, Qnext_t) pair by its own permutation,
    face vertices by one permutation shared across the window."""
    n = window.frames[0].n_points
    face_perm = rng.permutation(n)
    frames = []
    for f in window.frames:
        perm = rng.permutation(n)
        frames.append(replace(
            f,
            points_p=f.points_p[perm],
            nodes_q_next=None if f.nodes_q_next is None else f.nodes_q_next[perm],
            face=None if f.face is None else f.face[face_perm],
        ))
    return TrackWindow(tuple(frames))


def synthetic_windows(count: int, length: int = DEFAULT_WINDOW, seed: int = 0,
                      frames_per_scene: int = 29, **spec) -> list[TrackWindow]:
    """``count`` overlapping windows cut from as many synthetic scenes as
    needed; ``spec`` holds :class:`SyntheticSceneSpec` overrides."""
    per_scene = frames_per_scene - length + 1
    if per_scene < 1:
        raise ValueError("frames_per_scene must be at least the window length")
    windows: list[TrackWindow] = []
    scene = 0
    while len(windows) < count:
        frames, _ = synthesize_scene(SyntheticSceneSpec(
            frame_count=frames_per_scene, seed=seed * 100003 + scene, **spec))
        windows += windows_from_frames(frames, length)
        scene += 1
    return windows[:count]
