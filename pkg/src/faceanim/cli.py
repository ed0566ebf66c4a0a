"""Command-line surface: scan, train, animate, evaluate, geometry, render-test.

Exit codes: 0 success, 1 argument/validation error, 2 runtime failure.
Every command that produces artifacts writes them under --out together
with an echo of the resolved configuration.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad/unknown arguments as validation errors."""

    def error(self, message):
        raise ValidationError(message)


def _build_parser():
    parser = _Parser(prog="faceanim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    scan = sub.add_parser("scan", help="index a dataset tree")
    scan.add_argument("root")
    scan.add_argument("--out", help="directory for manifest.json and config echo")

    train = sub.add_parser("train", help="run the adversarial training loop")
    train.add_argument("root", help="dataset root (clip directories of frames)")
    train.add_argument("--out", required=True)
    train.add_argument("--config", help="flat key=value config file")
    train.add_argument("--seed", type=int)
    train.add_argument("--size", type=int, help="image size (64/128/256)")
    train.add_argument("--steps", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--lambda-rgb", type=float)
    train.add_argument("--lambda-depth", type=float)
    train.add_argument("--lambda-normal", type=float)
    train.add_argument("--geometry-backend", choices=["baseline", "oracle", "external"])
    train.add_argument("--geometry-weights")

    anim = sub.add_parser("animate", help="drive a source image with frames")
    anim.add_argument("checkpoint")
    anim.add_argument("source")
    anim.add_argument("driving_dir")
    anim.add_argument("--out", required=True)
    anim.add_argument("--mode", choices=["absolute", "relative"], default="relative")
    anim.add_argument("--dump-keypoints", action="store_true")

    ev = sub.add_parser("evaluate", help="compare two directories of frames")
    ev.add_argument("pred_dir")
    ev.add_argument("gt_dir")
    ev.add_argument("--out", required=True)
    ev.add_argument("--embedder", choices=["pixel-moments"], default="pixel-moments")

    geo = sub.add_parser("geometry", help="extract depth/normal maps from an image")
    geo.add_argument("image")
    geo.add_argument("--out", required=True)
    geo.add_argument("--geometry-backend", choices=["baseline", "oracle", "external"],
                     default="baseline")
    geo.add_argument("--geometry-weights")
    geo.add_argument("--size", type=int, default=64)

    rt = sub.add_parser("render-test", help="volume renderer oracle self-test")
    rt.add_argument("--out")
    rt.add_argument("--dump-transmittance", action="store_true")
    rt.add_argument("--seed", type=int, default=0)
    return parser


def _resolve_config(args):
    from .config import ConfigError, TrainConfig, read_config_file

    cfg = read_config_file(args.config) if args.config else TrainConfig()
    overrides = {
        "seed": args.seed, "image_size": args.size, "total_steps": args.steps,
        "batch_size": getattr(args, "batch_size", None),
        "lambda_rgb": args.lambda_rgb, "lambda_depth": args.lambda_depth,
        "lambda_normal": args.lambda_normal,
        "geometry_backend": args.geometry_backend,
        "geometry_weights": args.geometry_weights,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ValidationError(str(exc)) from exc
    return cfg


def cmd_scan(args):
    from .config import TrainConfig, write_config_echo
    from .data import scan_dataset, save_manifest

    manifest = scan_dataset(args.root)
    print(f"{len(manifest.clips)} clips under {manifest.root}")
    for clip in manifest.clips:
        print(f"  {clip.clip_id}: {clip.frame_count} frames")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_manifest(manifest, out / "manifest.json")
        write_config_echo(TrainConfig(), out, extras={"command": "scan",
                                                      "root": str(args.root)})
    return 0


def cmd_train(args):
    from .config import write_config_echo
    from .data import scan_dataset
    from .training import build_state, fit, save_state

    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config_echo(cfg, out, extras={"command": "train", "root": str(args.root)})
    manifest = scan_dataset(args.root)
    state = build_state(cfg)
    fit(state, manifest, log_path=out / "train_log.jsonl")
    save_state(state, out / "checkpoint.bin")
    print(f"trained {state.step} steps; checkpoint at {out / 'checkpoint.bin'}")
    return 0


def _load_frames_dir(path):
    from .data import load_image

    files = sorted(p for p in Path(path).iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    return files, [load_image(f) for f in files]


def _save_frame(array, path):
    from PIL import Image as PilImage

    PilImage.fromarray((np.clip(array, 0, 1) * 255).round().astype(np.uint8)).save(path)


def cmd_animate(args):
    from .config import write_config_echo
    from .data import load_image, preprocess
    from .training import AnimationRequest, animate, load_state

    state = load_state(args.checkpoint)
    cfg = state.config
    source = preprocess(load_image(args.source), cfg.image_size)
    _, raw_frames = _load_frames_dir(args.driving_dir)
    if not raw_frames:
        raise ValidationError("empty driving sequence")
    driving = [preprocess(f, cfg.image_size) for f in raw_frames]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config_echo(cfg, out, extras={"command": "animate", "mode": args.mode})
    frames = animate(state, AnimationRequest(source=source, driving=driving,
                                             mode=args.mode))
    for i, frame in enumerate(frames):
        _save_frame(frame, out / f"frame_{i:06d}.png")
    if args.dump_keypoints:
        with torch.no_grad():
            dump = []
            for frame in driving:
                t = torch.from_numpy(frame).permute(2, 0, 1).unsqueeze(0)
                kp = state.generator.keypoints(t)
                dump.append({"positions": kp.positions[0].tolist(),
                             "jacobians": kp.jacobians[0].tolist()})
        (out / "keypoints.json").write_text(json.dumps(dump, indent=2))
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_evaluate(args):
    from .config import TrainConfig, write_config_echo
    from .metrics import evaluate_sequences

    _, pred = _load_frames_dir(args.pred_dir)
    _, gt = _load_frames_dir(args.gt_dir)
    if not pred or len(pred) != len(gt):
        raise ValidationError(
            f"need equal non-empty frame sets, got {len(pred)} vs {len(gt)}")
    report = evaluate_sequences(pred, gt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config_echo(TrainConfig(), out, extras={"command": "evaluate"})
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2,
                                                 sort_keys=True))
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_geometry(args):
    from PIL import Image as PilImage

    from .config import TrainConfig, write_config_echo
    from .data import VALID_SIZES, load_image, preprocess
    from .geometry import GeometryExtractor, SceneSpec, build_backend

    if args.size not in VALID_SIZES:
        raise ValidationError(f"--size must be one of {VALID_SIZES}")
    image = preprocess(load_image(args.image), args.size)
    backend = build_backend(args.geometry_backend,
                            oracle_spec=SceneSpec(size=args.size,
                                                  base_depth=float(args.size)),
                            external_path=args.geometry_weights)
    extractor = GeometryExtractor(backend)
    maps = extractor(torch.from_numpy(image).permute(2, 0, 1).unsqueeze(0))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig()
    cfg.geometry_backend = args.geometry_backend
    write_config_echo(cfg, out, extras={"command": "geometry"})

    depth = maps.depth[0, 0].numpy()
    lo, hi = depth.min(), depth.max()
    norm16 = ((depth - lo) / (hi - lo + 1e-12) * 65535).round().astype(np.uint16)
    PilImage.fromarray(norm16).save(out / "depth.png")  # 16-bit grayscale

    normal = maps.normal[0].permute(1, 2, 0).numpy()
    normal8 = ((normal + 1.0) / 2.0 * 255).round().astype(np.uint8)
    PilImage.fromarray(normal8).save(out / "normal.png")
    print(f"wrote depth.png and normal.png to {out}")
    return 0


def cmd_render_test(args):
    from .rendering import render_weights, volume_render, volume_render_reference

    rng = np.random.Generator(np.random.Philox(key=np.uint64(args.seed)))
    max_err = 0.0
    max_budget_err = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 9))
        d = int(rng.integers(1, 5))
        c = int(rng.integers(1, 4))
        density = torch.from_numpy(3.0 * rng.random((n, d)))
        colors = torch.from_numpy(rng.standard_normal((n, d, c)))
        fast = volume_render(density, colors).numpy()
        naive = np.array(volume_render_reference(density.tolist(), colors.tolist()))
        max_err = max(max_err, float(np.abs(fast - naive).max()))
        weights, _, residual = render_weights(density)
        budget = weights.sum(dim=-1).numpy()
        max_budget_err = max(max_budget_err,
                             float(np.abs(budget - (1.0 - residual.numpy())).max()))
    ok = max_err <= 1e-6 and max_budget_err <= 1e-6
    print(f"volume-render oracle max-error {max_err:.3e} "
          f"(weight-budget {max_budget_err:.3e}): {'PASS' if ok else 'FAIL'}")

    if args.dump_transmittance:
        if not args.out:
            raise ValidationError("--dump-transmittance requires --out")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        density = torch.from_numpy(rng.random((16, 8)))
        _, transmittance, _ = render_weights(density)
        lines = ["pixel," + ",".join(f"tau_{j + 1}" for j in range(8))]
        for i, row in enumerate(transmittance.numpy()):
            lines.append(f"{i}," + ",".join(f"{v:.8f}" for v in row))
        (out / "transmittance.csv").write_text("\n".join(lines) + "\n")
        print(f"wrote transmittance profiles to {out / 'transmittance.csv'}")
    return 0 if ok else 2


_COMMANDS = {
    "scan": cmd_scan,
    "train": cmd_train,
    "animate": cmd_animate,
    "evaluate": cmd_evaluate,
    "geometry": cmd_geometry,
    "render-test": cmd_render_test,
}


def main(argv=None):
    from .config import ConfigError
    from .data import DatasetError, ImageDecodeError
    from .geometry import GeometryBackendError

    validation_errors = (ValidationError, ConfigError, DatasetError,
                         ImageDecodeError, GeometryBackendError,
                         FileNotFoundError, NotADirectoryError)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except validation_errors as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
