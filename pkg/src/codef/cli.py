"""Command-line entry point: ``codef <command> ...``.

Every command prints one ``command key=value ...`` summary line on success.
Exit codes: 0 success, 1 usage, 2 input, 3 checkpoint, 4 numeric failure.
``CODEF_THREADS`` caps the worker threads of the numeric libraries.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_CHECKPOINT, EXIT_NUMERIC = 0, 1, 2, 3, 4
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message, EXIT_USAGE)


def _limit_threads():
    n = os.environ.get("CODEF_THREADS")
    if n:
        for var in THREAD_VARS:
            os.environ[var] = n


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    for item in overrides or ():
        if "=" not in item:
            raise CliError(f"override {item!r} is not key=value", EXIT_USAGE)
        key, value = item.split("=", 1)
        node = config
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise CliError(f"override {key!r} descends into a non-object", EXIT_USAGE)
        node[parts[-1]] = _parse_value(value)
    return config


# -- run configuration ------------------------------------------------------------

RUN_KEYS = {"frames_dir", "flow_dir", "masks_dir", "output_dir", "mode", "train", "fields"}


def default_run_config() -> dict:
    from .fields import FieldConfig
    from .trainer import TrainConfig

    return {
        "frames_dir": "frames",
        "flow_dir": "flow",
        "masks_dir": "masks",
        "output_dir": "out",
        "mode": "single",
        "train": TrainConfig().to_dict(),
        "fields": FieldConfig().to_dict(),
    }


def _merge(base: dict, update: dict, path="") -> dict:
    for key, value in update.items():
        if key not in base:
            raise CliError(f"unknown config key {path + key!r}", EXIT_INPUT)
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, f"{path}{key}.")
        else:
            base[key] = value
    return base


def resolve_run_config(config_path=None, overrides=None, **paths) -> dict:
    """Defaults, then the JSON file, then ``--set`` overrides, then explicit path flags."""
    cfg = default_run_config()
    if config_path is not None:
        try:
            user = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {config_path}: {e}", EXIT_INPUT) from e
        if not isinstance(user, dict):
            raise CliError("config must be a JSON object", EXIT_INPUT)
        _merge(cfg, user)
    _merge(cfg, apply_overrides({}, overrides))
    for key, value in paths.items():
        if value is not None:
            cfg[key] = str(value)
    if cfg["mode"] not in ("single", "grouped"):
        raise CliError(f"mode must be 'single' or 'grouped', got {cfg['mode']!r}", EXIT_INPUT)
    return cfg


def _configs(cfg):
    from .fields import FieldConfig
    from .trainer import TrainConfig

    try:
        return TrainConfig.from_dict(cfg["train"]), FieldConfig.from_dict(cfg["fields"])
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid configuration: {e}", EXIT_INPUT) from e


# -- commands -------------------------------------------------------------------------


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_ckpt(path):
    from .trainer import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise CliError(str(e), EXIT_CHECKPOINT) from e


def _check_finite(name, array):
    import numpy as np

    if not np.all(np.isfinite(array)):
        raise CliError(f"{name} contains non-finite values", EXIT_NUMERIC)


def cmd_fit(args) -> str:
    import numpy as np

    from .flow import load_flows
    from .images import load_frames, load_layer_masks
    from .toolkit import psnr, reconstruct
    from .trainer import fit, save_checkpoint

    cfg = resolve_run_config(args.config, args.set, frames_dir=args.frames, flow_dir=args.flow,
                             masks_dir=args.masks, output_dir=args.out, mode=args.mode)
    train, fields_cfg = _configs(cfg)
    frames = load_frames(cfg["frames_dir"])
    n = len(frames)
    inputs = sorted(Path(cfg["frames_dir"]).glob("frame_*.png"))
    fwd = bwd = None
    if train.flow_weight > 0 and n > 1:
        fwd, bwd = load_flows(cfg["flow_dir"], n)
        if fwd.shape[1:3] != frames.shape[1:3]:
            raise CliError(f"flow size {fwd.shape[1:3]} does not match frames {frames.shape[1:3]}", EXIT_INPUT)
        inputs += sorted(Path(cfg["flow_dir"]).glob("flow_*.flo"))
    masks = None
    if cfg["mode"] == "grouped":
        masks = load_layer_masks(cfg["masks_dir"], n, frames.shape[1:3])
        inputs += sorted(Path(cfg["masks_dir"]).glob("mask_*.png"))

    out = _out_dir(cfg["output_dir"])
    result = fit(frames, fwd, bwd, train, fields_cfg, layer_masks=masks, log_path=out / "loss.csv")
    _check_finite("loss log", result.log)
    ckpt_path = out / "checkpoint.codf"
    save_checkpoint(ckpt_path, result.checkpoint)
    recon = reconstruct(result.checkpoint, masks=masks)
    _check_finite("reconstruction", recon)
    value = psnr(recon, frames)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    manifest = {
        "command": "fit",
        "config": cfg,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {"checkpoint.codf": _sha256(ckpt_path), "loss.csv": _sha256(out / "loss.csv")},
        "psnr_db": round(float(value), 4),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    final = result.log[-1] if len(result.log) else np.zeros(5)
    return (f"fit status=ok steps={train.total_steps} loss={final[4]:.6g} psnr={value:.2f} dB "
            f"checkpoint={ckpt_path} sha256={manifest['outputs']['checkpoint.codf']}")


def cmd_render(args) -> str:
    from .images import save_png
    from .toolkit import render_canonical

    ckpt = _load_ckpt(args.checkpoint)
    try:
        raster = render_canonical(ckpt, args.layer, args.scale)
    except IndexError as e:
        raise CliError(str(e), EXIT_INPUT) from e
    _check_finite("canonical", raster.image)
    path = _out_dir(args.out) / "canonical.png"
    save_png(path, raster.image)
    h, w = raster.shape
    return f"render status=ok width={w} height={h} pad_x={raster.pad_x} pad_y={raster.pad_y} path={path}"


def _grouped_masks(ckpt, masks_dir):
    from .images import load_layer_masks

    if ckpt.mode != "grouped":
        return None
    if masks_dir is None:
        raise CliError("grouped checkpoint needs --masks", EXIT_USAGE)
    n, h, w = ckpt.video_shape
    return load_layer_masks(masks_dir, n, (h, w))


def cmd_reconstruct(args) -> str:
    from .images import load_frames, save_png
    from .toolkit import psnr, reconstruct

    ckpt = _load_ckpt(args.checkpoint)
    masks = _grouped_masks(ckpt, args.masks)
    n = ckpt.video_shape[0]
    frames = [args.frame] if args.frame is not None else None
    if args.frame is not None and not 0 <= args.frame < n:
        raise CliError(f"frame {args.frame} out of range [0, {n})", EXIT_INPUT)
    recon = reconstruct(ckpt, frames, args.scale, masks)
    _check_finite("reconstruction", recon)
    out = _out_dir(Path(args.out) / "recon")
    indices = frames or list(range(n))
    for i, img in zip(indices, recon):
        save_png(out / f"frame_{i:05d}.png", img)
    summary = f"reconstruct status=ok frames={len(indices)} scale={args.scale} dir={out}"
    if args.reference is not None and args.scale == 1:
        ref = load_frames(args.reference)[indices]
        summary += f" psnr={psnr(recon, ref):.2f} dB"
    return summary


def cmd_track(args) -> str:
    import numpy as np

    from .toolkit import load_keypoints, save_tracks, track_keypoints

    ckpt = _load_ckpt(args.checkpoint)
    try:
        kps = load_keypoints(args.keypoints)
    except (OSError, ValueError) as e:
        raise CliError(str(e), EXIT_INPUT) from e
    n, h, w = ckpt.video_shape
    tracks = []
    for kp in kps:
        if not (0 <= kp["frame"] < n and -0.5 <= kp["x_px"] <= w - 0.5 and -0.5 <= kp["y_px"] <= h - 0.5):
            raise CliError(f"keypoint {kp} is outside the video", EXIT_INPUT)
        tracks += track_keypoints(ckpt, kp["frame"], [[kp["x_px"], kp["y_px"]]], args.layer)
    path = _out_dir(args.out) / "tracks.json"
    save_tracks(path, tracks)
    valid = float(np.mean([t.valid.mean() for t in tracks])) if tracks else 1.0
    err = max((float(np.hypot(*(t.positions[t.query_frame] - t.query_px))) for t in tracks), default=0.0)
    return f"track status=ok points={len(tracks)} valid_fraction={valid:.4f} query_roundtrip_px={err:.4f} path={path}"


def cmd_propagate_mask(args) -> str:
    from .images import load_mask, save_mask
    from .toolkit import propagate_mask

    ckpt = _load_ckpt(args.checkpoint)
    try:
        mask = load_mask(args.mask)
        masks = propagate_mask(ckpt, mask, args.layer)
    except (OSError, ValueError, IndexError) as e:
        raise CliError(str(e), EXIT_INPUT) from e
    out = _out_dir(Path(args.out) / "masks")
    for i, m in enumerate(masks):
        save_mask(out / f"mask_{i:05d}.png", m)
    return f"propagate-mask status=ok frames={len(masks)} coverage={masks.mean():.4f} dir={out}"


def cmd_propagate_edit(args) -> str:
    from .images import load_png, save_png
    from .toolkit import propagate_edit

    ckpt = _load_ckpt(args.checkpoint)
    masks = _grouped_masks(ckpt, args.masks)
    try:
        edited = load_png(args.edited)
        frames = propagate_edit(ckpt, edited, args.mode, args.layer, masks=masks)
    except (OSError, ValueError, IndexError) as e:
        raise CliError(str(e), EXIT_INPUT) from e
    _check_finite("edited frames", frames)
    out = _out_dir(Path(args.out) / "edited")
    for i, img in enumerate(frames):
        save_png(out / f"frame_{i:05d}.png", img)
    return f"propagate-edit status=ok mode={args.mode} frames={len(frames)} dir={out}"


def _load_images(path):
    from .images import load_frames, load_png

    p = Path(path)
    return load_frames(p) if p.is_dir() else load_png(p)


def cmd_psnr(args) -> str:
    from .toolkit import psnr

    try:
        a = _load_images(args.a)
        b = _load_images(args.b)
        value = psnr(a, b)
    except (OSError, ValueError) as e:
        raise CliError(str(e), EXIT_INPUT) from e
    return f"psnr={value:.2f} dB"


def cmd_synth(args) -> str:
    from . import synth

    presets = {
        "translation": synth.translation_spec,
        "sinusoidal": synth.sinusoidal_spec,
        "moving-object": synth.moving_object_spec,
    }
    spec = presets[args.preset]().to_dict()
    for item in args.set or ():
        apply_overrides(spec, [item])
    if args.seed is not None:
        spec["seed"] = args.seed
    try:
        video = synth.generate(synth.SynthSpec.from_dict(spec))
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid synth spec: {e}", EXIT_INPUT) from e
    out = _out_dir(args.out)
    video.save(out)
    n, h, w = video.frames.shape[:3]
    return f"synth status=ok preset={args.preset} frames={n} width={w} height={h} dir={out}"


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog="codef", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=UsageParser)

    p = sub.add_parser("fit", help="fit fields to a frame sequence")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--frames", help="directory of frame_%%05d.png")
    p.add_argument("--flow", help="directory of flow_fwd/bwd_%%05d.flo")
    p.add_argument("--masks", help="directory of mask_%%02d_%%05d.png (grouped mode)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--mode", choices=("single", "grouped"))
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.total_steps=500")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render the canonical image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--scale", type=int, default=1)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("reconstruct", help="render frames from the fitted fields")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frame", type=int, default=None)
    p.add_argument("--scale", type=int, default=1)
    p.add_argument("--masks", help="layer masks directory (grouped checkpoints)")
    p.add_argument("--reference", help="frames directory to report PSNR against")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("track", help="track keypoints through the video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--keypoints", required=True, help='JSON array of {"frame", "x_px", "y_px"}')
    p.add_argument("--out", required=True)
    p.add_argument("--layer", type=int, default=None)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("propagate-mask", help="propagate a mask painted on the canonical image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layer", type=int, default=None)
    p.set_defaults(func=cmd_propagate_mask)

    p = sub.add_parser("propagate-edit", help="propagate an edited canonical image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--edited", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("replace", "residual"), default="replace")
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--masks", help="layer masks directory (grouped checkpoints)")
    p.set_defaults(func=cmd_propagate_edit)

    p = sub.add_parser("psnr", help="PSNR between two images or frame directories")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_psnr)

    p = sub.add_parser("synth", help="generate a synthetic video with exact flows and masks")
    p.add_argument("--preset", choices=("translation", "sinusoidal", "moving-object"), default="translation")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    _limit_threads()
    try:
        args = build_parser().parse_args(argv)
        print(args.func(args))
        return EXIT_OK
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except FloatingPointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
