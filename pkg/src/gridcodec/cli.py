"""Command-line interface: encode, decode, evaluate, profile, ablate.

Exit codes: 0 success, 2 usage or input error, 3 stream error, 4 training
divergence.
"""

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import codec, octree
from .data import load_video, synthetic_video, to_uint8, write_raw
from .errors import CodecError, StreamError, TrainingDiverged
from .metrics import CSV_COLUMNS, RDPoint
from .synthesis import SynthesisConfig, count_macs
from .trainer import TrainConfig, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_STREAM, EXIT_DIVERGED = 0, 2, 3, 4

PRESETS = {
    "canonical": SynthesisConfig(),
    "single-scale": SynthesisConfig(grid_channels=(4, 0, 0)),
}
ABLATION_MODES = {
    "octree": ("canonical", "octree"),
    "autoregressive": ("canonical", "ar"),
    "single-scale": ("single-scale", "octree"),
}


class UsageError(CodecError):
    pass


def load_config(spec: str, seed: int = 0) -> SynthesisConfig:
    """A preset name or a JSON file of :class:`SynthesisConfig` fields."""
    if spec in PRESETS:
        fields = PRESETS[spec].to_dict()
    else:
        path = Path(spec)
        if not path.is_file():
            raise UsageError(f"--config must be one of {sorted(PRESETS)} or a JSON file, got {spec!r}")
        try:
            fields = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"cannot parse {spec}: {e}") from None
        unknown = set(fields) - set(SynthesisConfig().to_dict())
        if unknown:
            raise UsageError(f"unknown config fields {sorted(unknown)}")
    fields["seed"] = seed
    return SynthesisConfig(**fields)


def write_csv(points, out) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for p in points:
        w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in p.row()])


def read_csv(path) -> list:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise UsageError(f"{path}: expected columns {','.join(CSV_COLUMNS)}")
    return [RDPoint.from_row(r) for r in rows[1:]]


def _video_from_args(args) -> np.ndarray:
    if args.synthetic:
        return synthetic_video(args.frames or 8, args.height or 64, args.width or 64)
    if not args.input:
        raise UsageError("give --input or --synthetic")
    return load_video(args.input, args.width, args.height, args.frames)


def _write_bytes(path, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise UsageError(f"cannot write {path}: {e.strerror}") from None


def _train_config(args, synthesis: SynthesisConfig, entropy_model: str, lam: float) -> TrainConfig:
    return TrainConfig(lam=lam, stage1_steps=args.stage1_steps, stage2_steps=args.stage2_steps, batch=args.batch,
                       seed=args.seed, entropy_model=entropy_model, synthesis=synthesis, verbose=args.verbose)


# ----------------------------------------------------------------------------
# commands


def cmd_encode(args) -> int:
    video = _video_from_args(args)
    synthesis = load_config(args.config, args.seed)
    t0 = time.perf_counter()
    result = train(video, _train_config(args, synthesis, args.entropy_model, args.lam), out=sys.stderr)
    point = result.log.final
    point.enc_s = time.perf_counter() - t0
    _write_bytes(args.out, result.stream)
    write_csv([point], sys.stdout)
    return EXIT_OK


def cmd_decode(args) -> int:
    try:
        data = Path(args.inp).read_bytes()
    except OSError as e:
        raise UsageError(f"cannot read {args.inp}: {e.strerror}") from None
    video = codec.reconstruct(codec.decode(data))
    _write_bytes(args.out, to_uint8(video).tobytes())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        data = Path(args.inp).read_bytes()
    except OSError as e:
        raise UsageError(f"cannot read {args.inp}: {e.strerror}") from None
    if args.synthetic:
        T, H, W = codec.read_stream(data).header.dims
        reference = synthetic_video(T, H, W)
    else:
        reference = load_video(args.reference, args.width, args.height, args.frames)
    point = evaluate(data, reference)
    point.lam = args.lam
    point.kmacs_px = count_macs(codec.read_stream(data).header.config, reference.shape[:3]).kmacs_per_pixel
    write_csv([point], sys.stdout)
    return EXIT_OK


def profile_report(config: SynthesisConfig, dims: tuple) -> tuple:
    rep = count_macs(config, dims)
    lines = [f"{'layer':<10} {'stage':>5} {'kind':<11} {'kMACs/px':>10}"]
    for name, stage, kind, macs in rep.layers:
        lines.append(f"{name:<10} {stage:>5} {kind:<11} {macs / rep.pixels / 1000:>10.4f}")
    per_stage = rep.stage_pointwise()
    for stage, macs in per_stage.items():
        lines.append(f"stage {stage} pointwise MACs: {macs}")
    lines.append(f"total kMACs/pixel: {rep.kmacs_per_pixel:.4f}")
    return rep, lines


def cmd_profile(args) -> int:
    config = load_config(args.config)
    dims = (args.frames, args.height, args.width)
    rep, lines = profile_report(config, dims)
    print("\n".join(lines))
    if args.config in PRESETS:
        vals = list(rep.stage_pointwise().values())
        if vals and max(vals) - min(vals) > 1e-9 * max(vals):
            print("per-stage pointwise cost is not constant", file=sys.stderr)
            return 1
    return EXIT_OK


def entropy_timing(dims=(16, 64, 64), seed: int = 0) -> dict:
    """Encode+decode wall time of one random single-channel grid under both grid coders."""
    T, H, W = dims
    rng = np.random.default_rng(seed)
    q = np.clip(np.rint(rng.normal(0, 2, (T, 1, H, W))), -255, 255).astype(np.int32)
    aux = octree.aux_upsample(rng.normal(0, 1, octree.aux_shape(dims)), dims).data
    out = {}
    for kind, enc, dec in (("octree", octree.encode_grid, octree.decode_grid),
                           ("autoregressive", octree.encode_grid_autoregressive, octree.decode_grid_autoregressive)):
        params = octree.init_context_params("octree" if kind == "octree" else "ar", rng, np.float64)
        for k in params:
            if k.endswith(("w2", "b2")):
                params[k] = rng.normal(0, 0.05, params[k].shape)
        t0 = time.perf_counter()
        payload = enc(q, 0.5, params, aux)
        back = dec(payload, 0.5, params, aux, (T, H, W, 1))
        out[kind] = time.perf_counter() - t0
        if not np.array_equal(back, q):
            raise StreamError(f"{kind} coder failed to round-trip the timing grid")
    return out


def run_sweep(video, synthesis: SynthesisConfig, entropy_model: str, lambdas, stage1: int, stage2: int,
              seed: int = 0, batch: int = 4, verbose: bool = False) -> list:
    points = []
    for lam in lambdas:
        cfg = TrainConfig(lam=lam, stage1_steps=stage1, stage2_steps=stage2, batch=batch, seed=seed,
                          entropy_model=entropy_model, synthesis=synthesis, verbose=verbose)
        t0 = time.perf_counter()
        result = train(video, cfg, out=sys.stderr)
        point = result.log.final
        point.enc_s = time.perf_counter() - t0
        points.append(point)
    return points


def cmd_ablate(args) -> int:
    video = _video_from_args(args)
    lambdas = [float(v) for v in args.lambdas.split(",")]
    preset, entropy_model = ABLATION_MODES[args.mode]
    synthesis = load_config(preset, args.seed)
    points = run_sweep(video, synthesis, entropy_model, lambdas, args.stage1_steps, args.stage2_steps,
                       args.seed, args.batch, args.verbose)
    if args.out:
        with open(args.out, "w", newline="") as f:
            write_csv(points, f)
    write_csv(points, sys.stdout)
    if args.timing:
        dims = tuple(int(v) for v in args.timing_grid.split("x"))
        t = entropy_timing(dims)
        print(f"entropy coding {args.timing_grid}x1 grid: octree {t['octree']:.3f} s, "
              f"autoregressive {t['autoregressive']:.3f} s, ratio {t['octree'] / t['autoregressive']:.3f}",
              file=sys.stderr)
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def _add_video_args(p, frames_required=False):
    p.add_argument("--input", help="raw 8-bit RGB (frame-major) or Y4M 4:4:4 file")
    p.add_argument("--synthetic", action="store_true", help="use the built-in synthetic test clip")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--frames", type=int)


def _add_train_args(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stage1-steps", type=int, default=2000)
    p.add_argument("--stage2-steps", type=int, default=200)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--verbose", action="store_true", help="per-step records on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridcodec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="fit a video and write a .nvrl stream")
    _add_video_args(p)
    _add_train_args(p)
    p.add_argument("--lambda", dest="lam", type=float, default=1000.0)
    p.add_argument("--config", default="canonical", help="preset name or JSON file")
    p.add_argument("--entropy-model", choices=["octree", "ar"], default="octree")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a stream to raw 8-bit RGB")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="score a stream against a reference video")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--reference")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--lambda", dest="lam", type=float, default=float("nan"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("profile", help="MAC counts of a synthesis config")
    p.add_argument("--config", default="canonical")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--frames", type=int, default=8)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("ablate", help="lambda sweep under an ablation variant")
    p.add_argument("--mode", choices=sorted(ABLATION_MODES), required=True)
    _add_video_args(p)
    _add_train_args(p)
    p.add_argument("--lambdas", default="300,1000,3000")
    p.add_argument("--out", help="also write the CSV here")
    p.add_argument("--timing", action="store_true", help="time octree vs autoregressive grid coding")
    p.add_argument("--timing-grid", default="16x64x64")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and EXIT_USAGE
    try:
        return args.func(args)
    except StreamError as e:
        print(f"stream error: {e}", file=sys.stderr)
        return EXIT_STREAM
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CodecError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
