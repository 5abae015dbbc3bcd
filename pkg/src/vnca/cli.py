"""Command-line surface: train, stylize, render, inspect, report, demo-data."""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from .determinism import apply_env


def _parse_poses(spec: str, image_size=None) -> list:
    """Comma-separated azimuth degrees, each optionally az:elevation."""
    from .render import CameraPose

    poses = []
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        if ":" in token:
            az, el = token.split(":", 1)
        else:
            az, el = token, "0"
        poses.append(CameraPose(math.radians(float(az)), math.radians(float(el)),
                                image_size))
    if not poses:
        raise ValueError(f"no poses in {spec!r}")
    return poses


def _parse_frame_range(spec: str) -> tuple[int, int]:
    """'a..b' inclusive frame range."""
    if ".." not in spec:
        raise ValueError(f"frame range must look like a..b, got {spec!r}")
    lo, hi = spec.split("..", 1)
    lo_i, hi_i = int(lo), int(hi)
    if hi_i < lo_i:
        raise ValueError(f"frame range end {hi_i} is before start {lo_i}")
    return lo_i, hi_i


def _load_sequence(density_dir: str, velocity_dir: str | None,
                   frames: tuple[int, int]):
    from .io import density_path, read_density, read_velocity, velocity_path
    from .stylize import SequenceSpec

    pairs = []
    for index in range(frames[0], frames[1] + 1):
        dpath = density_path(density_dir, index)
        if not dpath.exists():
            raise FileNotFoundError(f"missing density frame: {dpath}")
        density = read_density(dpath, index)
        velocity = None
        if velocity_dir is not None:
            vpath = velocity_path(velocity_dir, index)
            if not vpath.exists():
                raise FileNotFoundError(f"missing velocity frame: {vpath}")
            velocity = read_velocity(vpath, index)
            if velocity.shape != density.shape:
                raise ValueError(
                    f"frame {index}: velocity shape {velocity.shape} does not match "
                    f"density shape {density.shape}")
        pairs.append((density, velocity))
    return SequenceSpec(pairs)


def _cmd_train(args) -> int:
    import yaml

    from .config import apply_override, config_from_dict
    from .train import train

    data = {}
    if args.config:
        with open(args.config) as f:
            data = yaml.safe_load(f) or {}
    for assignment in args.set or []:
        apply_override(data, assignment)
    if args.epochs is not None:
        data["epochs"] = args.epochs
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out_dir"] = args.out
    cfg = config_from_dict(data)

    if args.dry_run:
        problems = []
        if cfg.data.density_dir is None:
            problems.append("data.density_dir is not set")
        else:
            from .io import density_path

            path = density_path(cfg.data.density_dir, cfg.data.frame_index)
            if not path.exists():
                problems.append(f"missing training frame: {path}")
        if cfg.data.style_image is None:
            problems.append("data.style_image is not set")
        elif not Path(cfg.data.style_image).exists():
            problems.append(f"missing style image: {cfg.data.style_image}")
        if problems:
            raise ValueError("; ".join(problems))
        print(f"config ok: {cfg.epochs} epochs, grid channels {cfg.grid.channels}, "
              f"hidden_dim {cfg.grid.hidden_dim}, out_dir {cfg.out_dir}")
        return 0

    checkpoint = train(cfg, resume=args.resume, log_every=args.log_every)
    print(f"checkpoint: {checkpoint}")
    return 0


def _cmd_stylize(args) -> int:
    from .io import load_checkpoint, rule_from_checkpoint
    from .render import default_gamma
    from .stylize import export_frames, stylize_sequence

    payload = load_checkpoint(args.checkpoint)
    rule = rule_from_checkpoint(payload)
    frames = _parse_frame_range(args.frames)
    velocity_dir = args.velocity_dir
    if rule.with_velocity and velocity_dir is None:
        raise ValueError("checkpoint was trained with velocity encoding; "
                         "--velocity-dir is required")
    seq = _load_sequence(args.density_dir, velocity_dir, frames)

    if args.dry_run:
        print(f"checkpoint ok: channels {rule.channels}, hidden_dim {rule.hidden_dim}; "
              f"{len(seq.frames)} frames of shape {seq.shape}")
        return 0

    gamma = args.gamma if args.gamma is not None else default_gamma(seq.shape[2])
    poses = _parse_poses(args.poses)
    stream = stylize_sequence(rule, seq, args.steps_per_frame, seed=args.seed,
                              burn_in=args.burn_in,
                              fire_rate_override=args.fire_rate_override)
    written = export_frames(stream, poses, gamma, args.out, exposure=args.exposure,
                            export_volumes=args.export_volumes)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def _cmd_render(args) -> int:
    import torch

    from .grid import DensityField
    from .io import read_vnv, save_image
    from .render import default_gamma, render_color, render_gray, tone_map

    vol = read_vnv(args.density)
    if vol.shape[-1] != 1:
        raise ValueError(f"{args.density}: expected a C=1 density volume, got C={vol.shape[-1]}")
    density = DensityField(vol[..., 0])
    gamma = args.gamma if args.gamma is not None else default_gamma(density.shape[2])
    poses = _parse_poses(args.poses)

    rgb = None
    delta_d = torch.zeros_like(density.data)
    if args.volume:
        styled = read_vnv(args.volume)
        if styled.shape[-1] != 4 or tuple(styled.shape[:3]) != density.shape:
            raise ValueError(
                f"{args.volume}: expected shape {density.shape} with C=4, "
                f"got {tuple(styled.shape)}")
        rgb = styled[..., 0:3]
        delta_d = styled[..., 3]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for p, pose in enumerate(poses):
        if rgb is not None:
            view = render_color(density, rgb, delta_d, pose, gamma)
        else:
            view = render_gray(density, delta_d, pose, gamma)
        save_image(out_dir / f"render_pose{p:02d}.png",
                   tone_map(view.pixels, args.exposure))
    print(f"wrote {len(poses)} renders to {out_dir}")
    return 0


def _cmd_inspect(args) -> int:
    from .io import load_checkpoint

    payload = load_checkpoint(args.checkpoint)
    meta = payload["rule_meta"]
    print(f"format: {payload['format']}")
    for key in ("channels", "hidden_dim", "fire_rate", "step_size",
                "with_density", "with_velocity", "padding"):
        print(f"{key}: {meta[key]}")
    print(f"epoch: {payload.get('epoch', 0)}")
    for key, value in sorted(payload.get("provenance", {}).items()):
        print(f"{key}: {value}")
    return 0


def _cmd_report(args) -> int:
    from .report import render_report

    paths = render_report(args.runlog, args.out)
    for path in paths:
        print(path)
    return 0


def _cmd_demo_data(args) -> int:
    from .io import save_image
    from .synthetic import stripes_image, write_plume_dataset

    shape = (args.size, args.size, args.size)
    out = write_plume_dataset(args.out, shape, args.frames)
    print(f"wrote {args.frames} plume frames of shape {shape} to {out}")
    if args.style:
        save_image(args.style, stripes_image(args.style_size))
        print(f"wrote style exemplar to {args.style}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vnca",
        description="Train and run volumetric neural cellular automata "
                    "for smoke stylization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a rule on one density frame")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry (dotted keys)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--dry-run", action="store_true",
                   help="validate the config and inputs, then exit")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("stylize", help="stylize a density sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--density-dir", required=True)
    p.add_argument("--velocity-dir")
    p.add_argument("--frames", required=True, metavar="A..B")
    p.add_argument("--steps-per-frame", type=int, default=24)
    p.add_argument("--poses", default="0")
    p.add_argument("--gamma", type=float)
    p.add_argument("--exposure", type=float, default=1.0)
    p.add_argument("--burn-in", type=int, default=96)
    p.add_argument("--fire-rate-override", type=float)
    p.add_argument("--export-volumes", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=_cmd_stylize)

    p = sub.add_parser("render", help="render a density (or stylized) volume")
    p.add_argument("--density", required=True, metavar="FILE.vnv")
    p.add_argument("--volume", metavar="FILE.vnv",
                   help="stylized rgb+delta_d volume (C=4)")
    p.add_argument("--poses", default="0")
    p.add_argument("--gamma", type=float)
    p.add_argument("--exposure", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("inspect", help="print checkpoint metadata")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("report", help="render loss figures from a run log")
    p.add_argument("--runlog", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("demo-data", help="generate the analytic plume dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--style", help="also write a striped style exemplar PNG")
    p.add_argument("--style-size", type=int, default=128)
    p.set_defaults(func=_cmd_demo_data)

    return parser


def main(argv=None) -> int:
    apply_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
