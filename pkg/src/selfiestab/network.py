"""Linear two-branch 1-D convolutional stabilization network.

The feature branch sees, for every frame slot of a window, the stacked rows
``[P_t; Q_{t+1}]`` (x and y rows of each), the face branch sees
``[F_t; F_{t+1}]``. Both branches run ten bias-free convolutions
independently; the shared decoder upsamples back to the 512 point columns and
emits one ``(x, y)`` displacement row pair per interior frame. Skip features
from the face branch are scaled by lambda and those from the feature branch by
``1 - lambda`` before concatenation.

There are no biases and no activations, so the map from input coordinates to
displacements is linear for fixed weights and lambda.
"""

from __future__ import annotations

import io
import json
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from typing import IO, Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .mls import DEFAULT_CONFIG, MlsConfig
from .objective import WindowProblem, effective_lambda
from .solvers import DivergenceError
from .tracks import NUM_POINTS, TrackWindow, augment_window, permute_window

DEFAULT_FILTERS = 128
FILE_MAGIC = b"SSTW"
FILE_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: str            # "conv" or "convt"
    c_in: int
    c_out: int
    k: int
    stride: int
    dilation: int
    padding: int
    l_in: int
    l_out: int

    @property
    def weight_shape(self) -> tuple[int, int, int]:
        if self.kind == "conv":
            return (self.c_out, self.c_in, self.k)
        return (self.c_in, self.c_out, self.k)


# (kind, c_in, c_out, k, stride, dilation, padding, l_in, l_out); channel
# counts are multiples of C, with 0 standing for the window-dependent sizes.
_ENCODER = [
    ("conv", 0, 1, 3, 1, 1, 1, 512, 512),
    ("conv", 1, 2, 4, 2, 1, 1, 512, 256),
    ("conv", 2, 2, 3, 1, 1, 1, 256, 256),
    ("conv", 2, 4, 4, 2, 1, 1, 256, 128),
    ("conv", 4, 4, 3, 1, 1, 1, 128, 128),
    ("conv", 4, 4, 3, 1, 1, 1, 128, 128),
    ("conv", 4, 8, 4, 2, 1, 1, 128, 64),
    ("conv", 8, 8, 3, 1, 1, 1, 64, 64),
    ("conv", 8, 8, 3, 1, 2, 2, 64, 64),
    ("conv", 8, 8, 3, 1, 2, 2, 64, 64),
]
_DECODER = [
    # layer 11 uses dilation 1, padding 1 so its output length is 128
    ("convt", 32, 8, 4, 2, 1, 1, 64, 128),
    ("conv", 8, 8, 3, 1, 1, 1, 128, 128),
    ("conv", 8, 8, 3, 1, 1, 1, 128, 128),
    ("convt", 16, 4, 4, 2, 1, 1, 128, 256),
    ("conv", 4, 4, 3, 1, 1, 1, 256, 256),
    ("convt", 8, 2, 4, 2, 1, 1, 256, 512),
    ("conv", 2, 2, 3, 1, 1, 1, 512, 512),
    ("conv", 2, 0, 1, 1, 1, 0, 512, 512),
]
# decoder layer -> encoder layer whose outputs (from both branches) join its input
SKIPS = {11: (10, 7), 14: (5,), 16: (3,)}


def layer_table(C: int = DEFAULT_FILTERS, T: int = 5, n_points: int = NUM_POINTS) -> list[LayerSpec]:
    """Shapes of the 18 layers for base filter count ``C`` and window ``T``.

    Kernel shapes do not depend on the point count; ``n_points`` (a multiple
    of 8) only rescales the lengths, which lets small point sets run through
    the same weights.
    """
    if C < 1 or T < 3:
        raise ValueError("need C >= 1 and T >= 3")
    if n_points < 8 or n_points % 8:
        raise ValueError(f"point count must be a positive multiple of 8, got {n_points}")
    specs = []
    for i, (kind, ci, co, k, s, d, p, li, lo) in enumerate(_ENCODER + _DECODER, start=1):
        c_in = 4 * (T - 1) if (i == 1) else ci * C
        c_out = 2 * (T - 2) if (i == 18) else co * C
        li, lo = li * n_points // NUM_POINTS, lo * n_points // NUM_POINTS
        specs.append(LayerSpec(i, kind, c_in, c_out, k, s, d, p, li, lo))
    return specs


def param_names(C: int = DEFAULT_FILTERS, T: int = 5) -> list[str]:
    names = []
    for spec in layer_table(C, T):
        if spec.index <= 10:
            names.append(f"feature.{spec.index}")
        else:
            names.append(f"decoder.{spec.index}")
    names[10:10] = [f"face.{i}" for i in range(1, 11)]
    return names


def param_shapes(C: int = DEFAULT_FILTERS, T: int = 5) -> dict[str, tuple[int, int, int]]:
    table = {s.index: s for s in layer_table(C, T)}
    return {name: table[int(name.split(".")[1])].weight_shape for name in param_names(C, T)}


@dataclass
class NetWeights:
    """Parameters of one network, stored as float32 arrays keyed by
    ``feature.i``, ``face.i`` (i = 1..10) and ``decoder.i`` (i = 11..18)."""

    C: int
    T: int
    params: dict[str, np.ndarray]
    version: int = FILE_VERSION

    def __post_init__(self):
        expected = param_shapes(self.C, self.T)
        if set(self.params) != set(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ManifestError(f"parameter set mismatch (missing {missing}, unexpected {extra})")
        fixed = {}
        for name in param_names(self.C, self.T):
            arr = np.asarray(self.params[name], dtype=np.float32)
            if arr.shape != expected[name]:
                raise ManifestError(f"{name}: shape {arr.shape}, expected {expected[name]}")
            fixed[name] = arr
        self.params = fixed

    @property
    def n_parameters(self) -> int:
        return sum(a.size for a in self.params.values())

    def as_float64(self) -> dict[str, np.ndarray]:
        return {k: v.astype(np.float64) for k, v in self.params.items()}

    def copy(self) -> "NetWeights":
        return NetWeights(self.C, self.T, {k: v.copy() for k, v in self.params.items()})


def init_weights(C: int = DEFAULT_FILTERS, T: int = 5, rng: np.random.Generator | None = None,
                 zero: bool = False) -> NetWeights:
    """Zero-mean normal kernels with std ``1 / sqrt(C_in * k)``."""
    rng = np.random.default_rng(0) if rng is None else rng
    table = {s.index: s for s in layer_table(C, T)}
    params = {}
    for name, shape in param_shapes(C, T).items():
        spec = table[int(name.split(".")[1])]
        if zero:
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            std = 1.0 / math.sqrt(spec.c_in * spec.k)
            params[name] = rng.normal(0.0, std, shape).astype(np.float32)
    return NetWeights(C, T, params)


# ---------------------------------------------------------------------------
# Inputs and forward pass
# ---------------------------------------------------------------------------


def build_net_input(window: TrackWindow) -> tuple[np.ndarray, np.ndarray]:
    """Feature and face branch tensors, each ``(4 (T - 1), N)``. Frames
    without face vertices contribute zero rows."""
    T = window.length
    xs, ys = [], []
    for t in range(T - 1):
        f = window.frames[t]
        xs.append(np.concatenate([f.points_p.T, f.nodes_q_next.T], axis=0))
        ys.append(np.concatenate([window.face(t).T, window.face(t + 1).T], axis=0))
    return np.concatenate(xs, axis=0), np.concatenate(ys, axis=0)


@dataclass
class ShapeTrace:
    """Input and output ``(channels, length)`` of every evaluated layer."""

    rows: list = field(default_factory=list)

    def record(self, name: str, index: int, x_shape, y_shape):
        self.rows.append((name, index, tuple(x_shape), tuple(y_shape)))


def _apply(spec: LayerSpec, x: ad.Tensor, w, name: str, trace: ShapeTrace | None) -> ad.Tensor:
    if x.shape != (spec.c_in, spec.l_in):
        raise ad.ShapeError(f"layer {spec.index} ({name}): input {x.shape}, "
                            f"expected {(spec.c_in, spec.l_in)}")
    op = ad.conv1d if spec.kind == "conv" else ad.conv1d_transposed
    y = op(x, w, spec.stride, spec.dilation, spec.padding, name=f"layer {spec.index}")
    if y.shape != (spec.c_out, spec.l_out):
        raise ad.ShapeError(f"layer {spec.index} ({name}): output {y.shape}, "
                            f"expected {(spec.c_out, spec.l_out)}")
    if trace is not None:
        trace.record(name, spec.index, x.shape, y.shape)
    return y


def forward_graph(params: Mapping[str, object], x_bar, y_bar, lam: float, C: int, T: int,
                  trace: ShapeTrace | None = None) -> ad.Tensor:
    """Network output ``(2 (T - 2), N)`` as a tensor; ``params`` may hold
    arrays or tensors."""
    x_bar, y_bar = ad.as_tensor(x_bar), ad.as_tensor(y_bar)
    if x_bar.shape != y_bar.shape:
        raise ad.ShapeError(f"branch inputs differ: {x_bar.shape} vs {y_bar.shape}")
    if x_bar.value.ndim != 2 or x_bar.shape[1] < 8 or x_bar.shape[1] % 8:
        raise ad.ShapeError(f"input of shape {x_bar.shape}: need (rows, N) with N a multiple of 8")
    table = {s.index: s for s in layer_table(C, T, x_bar.shape[1])}
    feats = {}
    faces = {}
    h, g = x_bar, y_bar
    for i in range(1, 11):
        h = _apply(table[i], h, params[f"feature.{i}"], f"feature.{i}", trace)
        g = _apply(table[i], g, params[f"face.{i}"], f"face.{i}", trace)
        feats[i], faces[i] = h, g

    def skips(i):
        out = []
        for j in SKIPS[i]:
            out += [ad.scale(feats[j], 1.0 - lam), ad.scale(faces[j], lam)]
        return out

    d = None
    for i in range(11, 19):
        if i == 11:
            d = ad.concat(skips(i), axis=0)
        elif i in SKIPS:
            d = ad.concat([d] + skips(i), axis=0)
        d = _apply(table[i], d, params[f"decoder.{i}"], f"decoder.{i}", trace)
    return d


def output_to_displacements(out: ad.Tensor, T: int) -> list[ad.Tensor]:
    """Split a ``(2 (T - 2), N)`` output into per-frame ``(N, 2)`` tensors."""
    return [ad.transpose(ad.take(out, slice(2 * j, 2 * j + 2))) for j in range(T - 2)]


def net_forward(x_bar, y_bar, lam: float, weights: NetWeights,
                trace: ShapeTrace | None = None) -> np.ndarray:
    """Displacements ``(T - 2, N, 2)`` for the interior frames."""
    if np.asarray(x_bar).shape[0] != 4 * (weights.T - 1):
        raise ad.ShapeError(f"input has {np.asarray(x_bar).shape[0]} rows; weights expect "
                            f"T = {weights.T}")
    out = forward_graph(weights.as_float64(), x_bar, y_bar, lam, weights.C, weights.T, trace)
    T = weights.T
    return out.value.reshape(T - 2, 2, -1).transpose(0, 2, 1).copy()


def infer_window(window: TrackWindow, lam: float, weights: NetWeights) -> np.ndarray:
    lam_eff = effective_lambda(window, lam)
    x_bar, y_bar = build_net_input(window)
    return net_forward(x_bar, y_bar, lam_eff, weights)


def window_loss_graph(params, window: TrackWindow, lam: float, C: int, T: int,
                      cfg: MlsConfig = DEFAULT_CONFIG, problem: WindowProblem | None = None):
    """Total loss tensor of the network's displacements on ``window``."""
    problem = WindowProblem(window, cfg) if problem is None else problem
    x_bar, y_bar = build_net_input(window)
    out = forward_graph(params, x_bar, y_bar, lam, C, T)
    total, _, _ = problem.total_graph(output_to_displacements(out, T), lam)
    return total


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float        # mean network loss over the epoch's samples
    baseline: float    # mean loss of zero displacement on the same samples
    seconds: float


def train(windows: Sequence[TrackWindow], weights: NetWeights, epochs: int, lr: float = 1e-4,
          rng: np.random.Generator | None = None, cfg: MlsConfig = DEFAULT_CONFIG,
          augment: bool = True, beta1: float = 0.9, beta2: float = 0.999,
          progress: Callable[[EpochStats], None] | None = None) -> tuple[NetWeights, list[EpochStats]]:
    """Unsupervised training on the window loss.

    Each sample is augmented, given a fresh lambda drawn from U(0, 1) and a
    fresh point order, then used for one Adam step.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    C, T = weights.C, weights.T
    params = weights.as_float64()
    state = ad.AdamState(lr=lr, beta1=beta1, beta2=beta2)
    curve = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        losses, bases = [], []
        for i in rng.permutation(len(windows)):
            w = windows[i]
            if w.length != T:
                raise ValueError(f"window of length {w.length}; weights expect {T}")
            if augment:
                w = augment_window(w, rng)
            lam = float(rng.uniform(0.0, 1.0))
            w = permute_window(w, rng)
            lam_eff = effective_lambda(w, lam)
            problem = WindowProblem(w, cfg)
            bases.append(problem.evaluate(problem.zero_displacements(), lam_eff).total)
            loss, grads = ad.value_and_grad(
                lambda p: window_loss_graph(p, w, lam_eff, C, T, cfg, problem), params)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, sample {int(i)}")
            losses.append(loss)
            params, state = ad.adam_step(state, params, grads)
        stats = EpochStats(epoch, float(np.mean(losses)), float(np.mean(bases)),
                           time.perf_counter() - t0)
        curve.append(stats)
        if progress is not None:
            progress(stats)
    return NetWeights(C, T, params), curve


def curve_csv(curve: Sequence[EpochStats]) -> str:
    """Loss curve as CSV. Wall time is left out so that reruns with the same
    seed produce identical files."""
    lines = ["epoch,loss,baseline"]
    lines += [f"{s.epoch},{s.loss:.6f},{s.baseline:.6f}" for s in curve]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Weight files
# ---------------------------------------------------------------------------


class WeightFileError(ValueError):
    pass


class VersionError(WeightFileError):
    pass


class ChecksumError(WeightFileError):
    pass


class ManifestError(WeightFileError):
    pass


_HEAD = struct.Struct("<4sHI")


def manifest(weights: NetWeights) -> dict:
    return {
        "C": weights.C,
        "T": weights.T,
        "dtype": "<f4",
        "layers": [{"name": n, "shape": list(weights.params[n].shape)}
                   for n in param_names(weights.C, weights.T)],
    }


def expected_file_size(C: int, T: int) -> int:
    """Byte count of a weight file for the given network size."""
    w = init_weights(C, T, zero=True)
    text = json.dumps(manifest(w), sort_keys=True).encode()
    return _HEAD.size + len(text) + 4 * w.n_parameters + 4


def save_weights(weights: NetWeights, out: IO[bytes] | None = None) -> bytes:
    text = json.dumps(manifest(weights), sort_keys=True).encode()
    body = bytearray(_HEAD.pack(FILE_MAGIC, FILE_VERSION, len(text)))
    body += text
    for name in param_names(weights.C, weights.T):
        body += weights.params[name].astype("<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    data = bytes(body)
    if out is not None:
        out.write(data)
    return data


def load_weights(source: IO[bytes] | bytes) -> NetWeights:
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    if len(data) < _HEAD.size + 4:
        raise ChecksumError("weight file truncated")
    magic, version, n_text = _HEAD.unpack_from(data)
    if magic != FILE_MAGIC:
        raise WeightFileError("not a weight file (bad magic)")
    if version != FILE_VERSION:
        raise VersionError(f"weight file version {version}, this build reads {FILE_VERSION}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError("weight file checksum mismatch (corrupt or truncated)")
    try:
        meta = json.loads(data[_HEAD.size:_HEAD.size + n_text])
        C, T = int(meta["C"]), int(meta["T"])
        layers = meta["layers"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ManifestError(f"unreadable manifest: {exc}") from None
    shapes = param_shapes(C, T)
    if [d["name"] for d in layers] != param_names(C, T) or any(
            tuple(d["shape"]) != shapes[d["name"]] for d in layers):
        raise ManifestError("manifest layer shapes do not match the network layout")
    blob = io.BytesIO(data[_HEAD.size + n_text:-4])
    params = {}
    for d in layers:
        shape = tuple(d["shape"])
        n = int(np.prod(shape))
        raw = blob.read(4 * n)
        if len(raw) != 4 * n:
            raise ManifestError(f"blob too short for {d['name']}")
        params[d["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if blob.read(1):
        raise ManifestError("trailing bytes after parameter blob")
    return NetWeights(C, T, params)
