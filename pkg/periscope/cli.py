"""
Command-line entry point.

Usage:
    python -m periscope synth --n 200 --seed 1 --resolution 64 --out data/
    python -m periscope train --data data/ --out-checkpoint model.pdem
    python -m periscope eval --data data/ --checkpoint model.pdem
    python -m periscope refraction-sim --angles 0:60:10

Results go to stdout as JSON; logs go to stderr. On failure exactly one
line {"error": <code>, "message": <text>} is printed to stderr and the
exit code is 2 (1 for unexpected errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from periscope.config import settings
from periscope.errors import ConfigError, DatasetError, PeriscopeError
from periscope.logs import setup_logging
from periscope.models.calib import CalibConfig
from periscope.models.network import NetworkConfig
from periscope.models.pipeline import GateConfig
from periscope.models.scene import FORMAT_VERSION, PupilSpec, SceneSpec, StreamManifest
from periscope.models.training import TrainConfig
from periscope.stages.calib import calibrate, write_trace_csv
from periscope.stages.gating import FrameStream
from periscope.stages.network import DepthNet
from periscope.stages.pipeline import model_predictor, run_measurement
from periscope.stages.refraction import (
    AQUEOUS_INDEX,
    CHAMBER_DEPTH_MM,
    CORNEA_RADIUS_MM,
    PUPIL_DIAMETER_MM,
    parse_angle_range,
    refraction_table,
)
from periscope.stages.synthgen import SyntheticProvider, generate_dataset, render, synthesize_stream
from periscope.stages.training import denormalize_depth, evaluate, normalize_image, train
from periscope.tools import dataset_io
from periscope.tools.checkpoint import load_checkpoint, save_checkpoint
from periscope.tools.imaging import depth_to_png, downscale, read_f32, read_png, write_f32, write_png

logger = logging.getLogger(__name__)


# ── Config resolution ─────────────────────────────────────────


def load_config_file(path: Optional[str]) -> dict[str, Any]:
    if not path:
        return {}
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return payload


def resolve_seed(flag: Optional[int], file_config: dict[str, Any]) -> int:
    """--seed flag, then the config file's seed, then PERISCOPE_SEED, then 0."""
    for candidate in (flag, file_config.get("seed"), settings.SEED):
        if candidate is not None:
            return int(candidate)
    return 0


def merge(section: dict[str, Any], **flags: Any) -> dict[str, Any]:
    """Config-file section overlaid with every flag that was given."""
    merged = dict(section)
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


def log_resolved(command: str, resolved: dict[str, Any]) -> None:
    logger.info("Resolved config for %s: %s", command, json.dumps(resolved, sort_keys=True, default=str))


def emit(result: dict[str, Any], out: Optional[str] = None) -> dict[str, Any]:
    result = {"format_version": FORMAT_VERSION, **result}
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return result


def fit_resolution(image: np.ndarray, resolution: int) -> np.ndarray:
    """uint8 frame at the network's resolution, block-averaged down when larger."""
    if image.shape == (resolution, resolution):
        return image
    return np.clip(np.rint(downscale(image, resolution)), 0, 255).astype(np.uint8)


# ── Commands ──────────────────────────────────────────────────


def cmd_synth(args: argparse.Namespace) -> dict[str, Any]:
    cfg = load_config_file(args.config)
    seed = resolve_seed(args.seed, cfg)
    n = args.n if args.n is not None else cfg.get("n", 200)
    resolution = args.resolution or cfg.get("resolution") or settings.DEFAULT_RESOLUTION
    log_resolved("synth", {"n": n, "seed": seed, "resolution": resolution, "out": args.out})

    manifest = generate_dataset(n, seed, resolution, Path(args.out))
    return emit({
        "out": args.out,
        "n": n,
        "resolution": resolution,
        "splits": {name: len(ids) for name, ids in manifest["splits"].items()},
    })


def cmd_synth_stream(args: argparse.Namespace) -> dict[str, Any]:
    cfg = load_config_file(args.config)
    seed = resolve_seed(args.seed, cfg)
    resolution = args.resolution or cfg.get("resolution") or settings.DEFAULT_RESOLUTION
    base = SceneSpec.model_validate(cfg["scene"]) if "scene" in cfg else SceneSpec()
    pupil = args.pupil_mm if args.pupil_mm is not None else base.pupil.diameter_mm
    base = base.model_copy(update={"seed": seed, "pupil": PupilSpec(diameter_mm=pupil, gaze=base.pupil.gaze)})
    stream_cfg = merge(cfg.get("stream", {}), n_frames=args.frames, fps=args.fps)
    n_frames = stream_cfg.get("n_frames", 160)
    fps = stream_cfg.get("fps", 10)
    log_resolved("synth-stream", {
        "seed": seed, "resolution": resolution, "n_frames": n_frames, "fps": fps, "pupil_mm": pupil,
    })

    frames = synthesize_stream(base, n_frames, fps, seed=seed)
    pairs = [render(frame.spec, resolution) for frame in frames]
    manifest = StreamManifest(fps=fps, resolution=resolution, n_frames=n_frames, seed=seed, frames=frames)
    dataset_io.write_stream(Path(args.out), manifest, pairs)
    return emit({
        "out": args.out,
        "n_frames": n_frames,
        "fps": fps,
        "resolution": resolution,
        "n_blink_frames": sum(f.blink for f in frames),
    })


def cmd_train(args: argparse.Namespace) -> dict[str, Any]:
    cfg = load_config_file(args.config)
    seed = resolve_seed(args.seed, cfg)
    network = NetworkConfig.model_validate(merge(
        cfg.get("network", {}), base_channels=args.base_channels, input_resolution=args.resolution,
    ))
    train_config = TrainConfig.model_validate(merge(
        cfg.get("train", {}),
        lr=args.lr, max_epochs=args.epochs, patience=args.patience,
        batch_size=args.batch_size, target_train_loss=args.target_loss, seed=seed,
    ))
    out = Path(args.out_checkpoint)
    history_path = Path(args.history) if args.history else out.with_suffix(".history.jsonl")
    log_resolved("train", {
        "network": network.model_dump(mode="json"),
        "train": train_config.model_dump(mode="json"),
        "data": args.data, "out_checkpoint": str(out), "history": str(history_path),
    })

    dataset = dataset_io.load_dataset(Path(args.data), resolution=network.input_resolution)
    model = DepthNet.build(network, seed=seed)
    _, summary = train(model, dataset, train_config, history_path=history_path)
    save_checkpoint(out, model, training={
        "config": train_config.model_dump(mode="json"),
        "summary": summary.model_dump(mode="json"),
    })
    return emit({"checkpoint": str(out), "history": str(history_path), **summary.model_dump(mode="json")})


def cmd_eval(args: argparse.Namespace) -> dict[str, Any]:
    if bool(args.checkpoint) == bool(args.pred_dir):
        raise ConfigError("eval needs exactly one of --checkpoint or --pred-dir")
    log_resolved("eval", {
        "data": args.data, "split": args.split, "checkpoint": args.checkpoint, "pred_dir": args.pred_dir,
    })
    ids, images, depths = dataset_io.load_raw(Path(args.data), split=args.split)

    if args.checkpoint:
        model, _ = load_checkpoint(Path(args.checkpoint))
        res = model.config.input_resolution
        frames = np.stack([fit_resolution(im, res) for im in images])
        gt = np.stack([downscale(d, res) for d in depths]) if depths.shape[1] != res else depths
        pred = denormalize_depth(model.predict(normalize_image(frames)))
    else:
        gt = depths
        pred = np.stack([
            read_f32(Path(args.pred_dir) / f"{sample_id}_depth.f32", depths.shape[1:]) for sample_id in ids
        ])

    report = evaluate(pred, gt)
    logger.info("Evaluated %d %s samples: abs_rel=%.4f delta1=%.4f", len(ids), args.split, report.abs_rel, report.delta1)
    return emit({"split": args.split, "n_samples": len(ids), **report.model_dump()}, args.out)


def _write_depth(out_dir: Path, stem: str, depth_mm: np.ndarray, png: bool) -> list[str]:
    written = [out_dir / f"{stem}_depth.f32"]
    write_f32(written[0], depth_mm)
    if png:
        written.append(out_dir / f"{stem}_depth.png")
        write_png(written[1], depth_to_png(depth_mm))
    return [str(p) for p in written]


def cmd_predict(args: argparse.Namespace) -> dict[str, Any]:
    if bool(args.image) == bool(args.stream_dir):
        raise ConfigError("predict needs exactly one of --image or --stream-dir")
    log_resolved("predict", {
        "image": args.image, "stream_dir": args.stream_dir, "checkpoint": args.checkpoint,
        "out": args.out, "png": args.png,
    })
    model, _ = load_checkpoint(Path(args.checkpoint))
    res = model.config.input_resolution
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create output directory {out_dir}: {exc}") from exc

    if args.image:
        stems = [Path(args.image).stem]
        frames = [read_png(Path(args.image))]
    else:
        manifest, frames, _ = dataset_io.read_stream(Path(args.stream_dir))
        stems = [f"{frame.index:05d}" for frame in manifest.frames]

    batch = np.stack([fit_resolution(f, res) for f in frames])
    depth_mm = denormalize_depth(model.predict(normalize_image(batch)))
    written = []
    for stem, depth in zip(stems, depth_mm):
        written.extend(_write_depth(out_dir, stem, depth, args.png))
    return emit({"resolution": res, "n_frames": len(stems), "written": written})


def cmd_calibrate(args: argparse.Namespace) -> dict[str, Any]:
    cfg = load_config_file(args.config)
    calib_config = CalibConfig.model_validate(merge(
        cfg.get("calib", {}), alpha=args.alpha, max_steps=args.max_steps, block_grid=args.blocks,
    ))
    spec0 = SceneSpec.model_validate(dataset_io.read_json(Path(args.spec0)))
    log_resolved("calibrate", {
        "target": args.target, "spec0": args.spec0, "calib": calib_config.model_dump(mode="json"),
    })

    target = read_png(Path(args.target))
    result = calibrate(target, spec0, calib_config)
    if args.out_trace:
        write_trace_csv(Path(args.out_trace), result.trace)
    if args.out_spec:
        dataset_io.write_json(Path(args.out_spec), result.spec.model_dump(mode="json"))
    return emit({
        "converged": result.converged,
        "diverged": result.diverged,
        "steps": len(result.trace),
        "mae_total": result.mae_total,
        "mae_pct": result.mae_pct,
        "max_block_error": result.max_block_error,
        "max_block_pct": result.max_block_pct,
        "theta_noise": result.spec.theta_noise,
        "theta_light": result.spec.theta_light,
        "spec": result.spec.model_dump(mode="json"),
    }, args.out)


def cmd_measure_pupil(args: argparse.Namespace) -> dict[str, Any]:
    if not args.oracle and not args.checkpoint:
        raise ConfigError("measure-pupil needs --checkpoint unless --oracle is given")
    cfg = load_config_file(args.config)
    gate = GateConfig.model_validate(merge(
        cfg.get("gate", {}), capacity=args.capacity, outlier_mode=args.outlier_mode,
    ))
    log_resolved("measure-pupil", {
        "stream_dir": args.stream_dir, "checkpoint": args.checkpoint, "provider": args.provider,
        "oracle": args.oracle, "gate": gate.model_dump(mode="json"),
    })

    stream_dir = Path(args.stream_dir)
    manifest, frames, intrinsics = dataset_io.read_stream(stream_dir)
    full_shape = frames[0].shape

    def stream_depths(indices: Sequence[int]) -> list[np.ndarray]:
        maps = dataset_io.read_stream_depths(stream_dir, list(indices), full_shape)
        return [m if m.shape == (res, res) else downscale(m, res) for m in maps]

    def oracle(batch: np.ndarray, indices: Sequence[int]) -> np.ndarray:
        return np.stack(stream_depths(indices))

    if args.oracle:
        res = manifest.resolution
        predict_fn = oracle
    else:
        model, _ = load_checkpoint(Path(args.checkpoint))
        res = model.config.input_resolution
        predict_fn = model_predictor(model)

    provider = SyntheticProvider(manifest.frames, res)
    stream = FrameStream(frames=[fit_resolution(f, res) for f in frames], fps=manifest.fps)
    report = run_measurement(
        stream,
        provider,
        intrinsics.scaled(res),
        predict_fn,
        gate,
        gt_depths=stream_depths if args.with_gt else None,
        region_masks=provider.region_masks,
    )
    return emit(report.model_dump(mode="json", exclude_none=True), args.out)


def cmd_refraction_sim(args: argparse.Namespace) -> Optional[dict[str, Any]]:
    optics = {
        "radius": args.radius, "depth": args.chamber_depth,
        "index": args.index, "true_diameter": args.pupil_mm,
    }
    log_resolved("refraction-sim", {"angles": args.angles, **optics})
    rows = refraction_table(parse_angle_range(args.angles), **optics)
    if args.format == "table":
        print("angle, actual, observed, error%")
        for row in rows:
            print(f"{row.angle_deg:g}, {row.actual_mm:.2f}, {row.observed_mm:.2f}, {row.error_pct:.2f}")
        return None
    return emit({"optics": optics, "rows": [row.model_dump() for row in rows]}, args.out)


def cmd_serve(args: argparse.Namespace) -> None:
    from periscope.run import serve

    serve(host=args.host, port=args.port)


# ── Parser ────────────────────────────────────────────────────


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="periscope", description="Metric periocular depth estimation")
    parser.add_argument("--log-level", default=None, help="overrides PERISCOPE_LOG_LEVEL")
    parser.add_argument("--plain-logs", action="store_true", help="human-readable logs instead of JSON")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        return p

    p = command("synth", cmd_synth, "render a synthetic image/depth dataset")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = command("synth-stream", cmd_synth_stream, "render a frame stream with blinks and a gaze sweep")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--fps", type=int, default=None)
    p.add_argument("--pupil-mm", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = command("train", cmd_train, "train the depth network")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--history")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--base-channels", type=int, default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--target-loss", type=float, default=None)

    p = command("eval", cmd_eval, "score predictions against ground-truth depth")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--pred-dir")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out")

    p = command("predict", cmd_predict, "predict depth maps for an image or a stream")
    p.add_argument("--image")
    p.add_argument("--stream-dir")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--png", action="store_true", help="also write grayscale depth PNGs")

    p = command("calibrate", cmd_calibrate, "fit theta_noise and theta_light to a target image")
    p.add_argument("--target", required=True)
    p.add_argument("--spec0", required=True)
    p.add_argument("--out-trace")
    p.add_argument("--out-spec")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--blocks", type=int, default=None)

    p = command("measure-pupil", cmd_measure_pupil, "gate a stream, fuse depth and measure the pupil")
    p.add_argument("--stream-dir", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--provider", default="synthetic", choices=["synthetic"])
    p.add_argument("--oracle", action="store_true", help="use the stream's ground-truth depth")
    p.add_argument("--with-gt", action="store_true", help="report per-region depth error")
    p.add_argument("--capacity", type=int, default=None)
    p.add_argument("--outlier-mode", choices=["mad", "two-sigma"], default=None)
    p.add_argument("--config")
    p.add_argument("--out")

    p = command("refraction-sim", cmd_refraction_sim, "apparent pupil size versus viewing angle")
    p.add_argument("--angles", default="0:60:10")
    p.add_argument("--radius", type=float, default=CORNEA_RADIUS_MM)
    p.add_argument("--chamber-depth", type=float, default=CHAMBER_DEPTH_MM)
    p.add_argument("--index", type=float, default=AQUEOUS_INDEX)
    p.add_argument("--pupil-mm", type=float, default=PUPIL_DIAMETER_MM)
    p.add_argument("--format", choices=["json", "table"], default="json")
    p.add_argument("--out")

    p = command("serve", cmd_serve, "run the HTTP service")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    return parser


def fail(code: str, message: str) -> None:
    print(json.dumps({"error": code, "message": message}), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or settings.LOG_LEVEL, json_output=settings.LOG_JSON and not args.plain_logs)
    started = time.time()
    try:
        result = args.handler(args)
    except ValidationError as exc:
        fail(ConfigError.code, " ".join(str(exc).split()))
        return 2
    except PeriscopeError as exc:
        logger.error("%s failed: %s", args.command, exc)
        fail(exc.code, str(exc))
        return 2
    except Exception as exc:
        logger.error("%s crashed: %s", args.command, exc, exc_info=True)
        fail("internal", f"{type(exc).__name__}: {exc}")
        return 1
    if result is not None:
        print(json.dumps(result, indent=2, sort_keys=True))
    logger.info("%s complete in %.1fs", args.command, time.time() - started)
    return 0
