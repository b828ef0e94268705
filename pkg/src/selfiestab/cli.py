"""Command-line entry point: ``python -m selfiestab <command> ...``.

Commands: synth, stabilize, train, bench, metrics. Exit status is 0 on
success, 1 on a data or runtime error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import _kernels
from .metrics import MetricError, evaluate, metrics_csv
from .mls import DegenerateWarpError, MlsConfig, NodePair, bench_csv, bench_warp, sample_image
from .network import (WeightFileError, curve_csv, init_weights, load_weights, save_weights,
                      train)
from .pipeline import (apply_outputs, direct_solver, flush, net_solver, push_frame,
                       read_outputs, StreamState)
from .pnm import RasterError, read_pnm, write_pnm
from .solvers import DivergenceError
from .tracks import (DEFAULT_LAMBDA, DEFAULT_WINDOW, NUM_POINTS, REF_HEIGHT, REF_WIDTH,
                     LambdaSchedule, SyntheticSceneSpec, TrackError, dump_tracks, load_tracks,
                     synthesize_scene, synthetic_windows, windows_from_frames)

log = logging.getLogger("selfiestab")

DATA_ERRORS = (TrackError, WeightFileError, DegenerateWarpError, DivergenceError, MetricError,
               RasterError, OSError, ValueError, KeyError)


def _dims(text: str) -> tuple[int, int]:
    """Parse ``AxB`` into two positive ints."""
    try:
        a, b = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected AxB, got {text!r}") from None
    if a < 1 or b < 1:
        raise argparse.ArgumentTypeError(f"dimensions must be positive: {text!r}")
    return a, b


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y, got {text!r}") from None
    return a, b


def _lam(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"lambda must lie strictly inside (0, 1), got {v}")
    return v


def _nonneg(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a value >= 0, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="selfiestab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="write a synthetic shaky track file and its jitter log")
    p.add_argument("--out", required=True, help="track JSONL to write")
    p.add_argument("--log", help="jitter log JSON to write")
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--translation-std", type=_nonneg, default=4.0, help="px per frame")
    p.add_argument("--rotation-std", type=_nonneg, default=0.0, help="degrees per frame")
    p.add_argument("--drift", type=_pair, default=(0.0, 0.0), help="intentional motion X,Y px/frame")
    p.add_argument("--face-jitter", type=_nonneg, default=0.0, help="extra face motion std, px")
    p.add_argument("--noise", type=_nonneg, default=0.0, help="correspondence noise std, px")
    p.add_argument("--size", type=_dims, default=(REF_WIDTH, REF_HEIGHT),
                   help="output resolution WxH (default 832x448)")
    p.add_argument("--rasters", help="directory for rendered PPM frames")

    p = sub.add_parser("stabilize", help="run the sliding-window stabilizer over a track file")
    p.add_argument("--input", required=True, help="track JSONL")
    p.add_argument("--output", required=True, help="per-frame node JSONL to write")
    p.add_argument("--solver", choices=("direct", "net"), default="direct")
    p.add_argument("--weights", help="weight file (net solver)")
    p.add_argument("--lambda", dest="lam", type=_lam, default=DEFAULT_LAMBDA)
    p.add_argument("--lambda-schedule", help="CSV of frame,lambda rows")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--nodes", type=int, default=NUM_POINTS, help="points per frame after resampling")
    p.add_argument("--grid", type=_dims, default=(20, 20), help="warp grid COLSxROWS")
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-1)
    p.add_argument("--seed", type=int, default=0, help="resampling seed")
    p.add_argument("--frames-in", help="directory of input PPM/PGM frames (sorted by name)")
    p.add_argument("--frames-out", help="directory for warped frames")
    p.add_argument("--no-timing", action="store_true", help="write null timings")

    p = sub.add_parser("train", help="train the network on track files or synthetic windows")
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--curve", help="loss-curve CSV to write")
    p.add_argument("--tracks", action="append", default=[], help="track JSONL (repeatable)")
    p.add_argument("--synthetic", type=int, default=0, help="number of synthetic windows")
    p.add_argument("--filters", type=int, default=128, help="base filter count C")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--init", help="starting weight file")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="time dense versus grid warping")
    p.add_argument("--nodes", type=int, nargs="+", default=[NUM_POINTS])
    p.add_argument("--raster", type=_dims, default=(REF_WIDTH, REF_HEIGHT), help="WxH")
    p.add_argument("--grid", type=_dims, default=(20, 20))
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--dense-repeats", type=int, default=1)
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV to write (default stdout)")

    p = sub.add_parser("metrics", help="score a stabilization result")
    p.add_argument("--input", required=True, help="input track JSONL")
    p.add_argument("--outputs", help="stabilizer output JSONL or a stabilized track file "
                                     "(default: the input itself)")
    p.add_argument("--csv", help="metric CSV to write (default stdout)")
    p.add_argument("--nodes", type=int, default=NUM_POINTS)
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    return ap


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def render_scene(log_, spec: SyntheticSceneSpec, size: tuple[int, int], seed: int):
    """Yield a textured frame per jitter-log entry (background plane plus a
    face disc following the face offsets)."""
    W, H = size
    rng = np.random.default_rng(seed)
    pad = 64
    tex_h, tex_w = REF_HEIGHT + 2 * pad, REF_WIDTH + 2 * pad
    noise = rng.uniform(0, 1, (tex_h // 8 + 2, tex_w // 8 + 2, 3))
    ys, xs = np.mgrid[0:tex_h, 0:tex_w] / 8.0
    texture = sample_image(noise, np.stack([xs, ys], axis=-1)) * 200.0 + 30.0
    checker = ((np.floor(xs / 4) + np.floor(ys / 4)) % 2)[..., None] * 25.0
    texture = texture + checker
    gx, gy = np.meshgrid(np.arange(W) * (REF_WIDTH / W), np.arange(H) * (REF_HEIGHT / H))
    pix = np.stack([gx, gy], axis=-1)
    fc = np.asarray(spec.face_center)
    for t in range(len(log_.theta)):
        A, b = log_.camera(t)
        world = (pix - b) @ np.linalg.inv(A).T
        img = sample_image(texture, world + pad)
        inside = np.linalg.norm(world - fc - log_.face_offset[t], axis=-1) < spec.face_radius
        img[inside] = (0.6 * img[inside] + np.array([110.0, 80.0, 60.0]))
        yield np.clip(np.rint(img), 0, 255).astype(np.uint8)


def cmd_synth(args) -> int:
    spec = SyntheticSceneSpec(frame_count=args.frames, translation_std=args.translation_std,
                              rotation_std_deg=args.rotation_std, drift=args.drift,
                              face_jitter_std=args.face_jitter,
                              correspondence_noise=args.noise, seed=args.seed)
    frames, jitter = synthesize_scene(spec)
    with open(args.out, "w") as fh:
        dump_tracks(frames, fh, args.size)
    if args.log:
        with open(args.log, "w") as fh:
            json.dump(jitter.to_json(), fh, sort_keys=True)
            fh.write("\n")
    if args.rasters:
        out = Path(args.rasters)
        out.mkdir(parents=True, exist_ok=True)
        for t, img in enumerate(render_scene(jitter, spec, args.size, args.seed), start=1):
            write_pnm(out / f"frame_{t:05d}.ppm", img)
    log.info("wrote %d frames to %s", len(frames), args.out)
    return 0


# ---------------------------------------------------------------------------
# stabilize
# ---------------------------------------------------------------------------


def _read_size(path: str) -> tuple[int, int]:
    with open(path) as fh:
        head = json.loads(fh.readline() or "{}")
    if "width" not in head:
        raise TrackError(f"{path}: missing width/height header")
    return int(head["width"]), int(head["height"])


def _raster_files(directory: str) -> list[Path]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
    if not files:
        raise RasterError(f"no PPM/PGM frames in {directory}")
    return files


def cmd_stabilize(args) -> int:
    cfg = MlsConfig(alpha=args.alpha)
    size = _read_size(args.input)
    with open(args.input) as fh:
        frames = load_tracks(fh, seed=args.seed, n_points=args.nodes)
    if args.solver == "net":
        if not args.weights:
            raise ValueError("--solver net needs --weights")
        with open(args.weights, "rb") as fh:
            weights = load_weights(fh)
        if weights.T != args.window:
            raise ValueError(f"weights were built for T = {weights.T}, not {args.window}")
        solver = net_solver(weights)
    else:
        solver = direct_solver(args.iters, args.lr, cfg)
    schedule = None
    if args.lambda_schedule:
        schedule = LambdaSchedule.from_csv(Path(args.lambda_schedule).read_text(), args.lam)
    rasters = None
    if args.frames_in:
        rasters = _raster_files(args.frames_in)
        if len(rasters) != len(frames):
            raise RasterError(f"{len(rasters)} frames in {args.frames_in}, {len(frames)} in tracks")
    if args.frames_out:
        Path(args.frames_out).mkdir(parents=True, exist_ok=True)

    state = StreamState(solver, args.window, args.lam, schedule, cfg, tuple(args.grid))
    scale = (size[0] / REF_WIDTH, size[1] / REF_HEIGHT)
    n_out = 0
    with open(args.output, "w") as out:
        out.write(json.dumps({"width": size[0], "height": size[1]}) + "\n")

        def emit(o):
            nonlocal n_out
            out.write(json.dumps(o.record(scale, timing=not args.no_timing)) + "\n")
            if args.frames_out and o.raster is not None:
                name = Path(args.frames_out) / f"frame_{o.frame_index:05d}"
                write_pnm(name.with_suffix(".ppm" if o.raster.ndim == 3 else ".pgm"), o.raster)
            n_out += 1

        for k, frame in enumerate(frames):
            raster = read_pnm(rasters[k]) if rasters is not None else None
            o = push_frame(state, frame, raster=raster)
            if o is not None:
                emit(o)
        for o in flush(state):
            emit(o)
    if state.failures:
        log.warning("%d frame(s) passed through unwarped", state.failures)
    log.info("stabilized %d frames into %s", n_out, args.output)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = MlsConfig(alpha=args.alpha)
    windows = []
    for path in args.tracks:
        with open(path) as fh:
            windows += windows_from_frames(load_tracks(fh, seed=args.seed), args.window)
    if args.synthetic:
        windows += synthetic_windows(args.synthetic, args.window, seed=args.seed)
    if not windows:
        raise ValueError("no training windows (give --tracks or --synthetic)")
    rng = np.random.default_rng(args.seed)
    if args.init:
        with open(args.init, "rb") as fh:
            weights = load_weights(fh)
    else:
        weights = init_weights(args.filters, args.window, rng)

    def progress(stats):
        log.info("epoch %d: loss %.3f (baseline %.3f)", stats.epoch, stats.loss, stats.baseline)

    weights, curve = train(windows, weights, args.epochs, args.lr, rng, cfg, progress=progress)
    with open(args.out, "wb") as fh:
        save_weights(weights, fh)
    if args.curve:
        Path(args.curve).write_text(curve_csv(curve))
    return 0


# ---------------------------------------------------------------------------
# bench / metrics
# ---------------------------------------------------------------------------


def cmd_bench(args) -> int:
    cfg = MlsConfig(alpha=args.alpha)
    W, H = args.raster
    results = [bench_warp((H, W), n, tuple(args.grid), args.repeats, args.dense_repeats,
                          args.seed, cfg) for n in args.nodes]
    text = bench_csv(results)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _first_frame_record(lines) -> dict:
    for line in lines:
        if line.strip():
            rec = json.loads(line)
            if "frame" in rec:
                return rec
    return {}


def _pairs_from_records(frames, records, size):
    if len(records) != len(frames):
        raise MetricError(f"{len(records)} output records for {len(frames)} frames")
    scale = np.array([REF_WIDTH / size[0], REF_HEIGHT / size[1]])
    pairs = []
    for f, rec in zip(frames, records):
        if int(rec["frame"]) != f.frame_index:
            raise MetricError(f"output frame {rec['frame']} does not match input {f.frame_index}")
        if rec.get("Q") is None:
            pairs.append(None)
        else:
            pairs.append(NodePair(rec["Q"] * scale, rec["Qhat"] * scale))
    return pairs


def cmd_metrics(args) -> int:
    cfg = MlsConfig(alpha=args.alpha)
    with open(args.input) as fh:
        frames = load_tracks(fh, seed=args.seed, n_points=args.nodes)
    stabilized = frames
    if args.outputs:
        lines = Path(args.outputs).read_text().splitlines()
        if "P" in _first_frame_record(lines):
            stabilized = load_tracks(lines, seed=args.seed, n_points=args.nodes)
        else:
            size, records = read_outputs(lines)
            size = size or _read_size(args.input)
            stabilized = apply_outputs(frames, _pairs_from_records(frames, records, size), cfg)
    report = evaluate(frames, stabilized)
    text = metrics_csv(report, [f.frame_index for f in frames])
    if args.csv:
        Path(args.csv).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"cropping {report.cropping:.4f}  distortion {report.distortion:.4f}  "
          f"stability {report.stability:.4f}", file=sys.stderr)
    return 0


COMMANDS = {"synth": cmd_synth, "stabilize": cmd_stabilize, "train": cmd_train,
            "bench": cmd_bench, "metrics": cmd_metrics}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _kernels.configure_threads()
    except ValueError:
        print(f"selfiestab: error: STAB_THREADS must be an integer, got "
              f"{os.environ.get('STAB_THREADS')!r}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except DATA_ERRORS as exc:
        print(f"selfiestab {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
