"""Command-line entry point: ``stylegs <command> [flags]``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error,
3 runtime divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import shutil
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import ablation, gradcheck
from .camera import orbit_camera
from .config import RunConfig, apply_overrides, coerce, load_config
from .errors import DivergenceError, FormatError, ParameterError
from .gaussians import init_cloud
from .guidance import ToyDenoiser, load_weights
from .imageops import box_resize, hstack, read_png, write_png
from .metrics import StyleFeatureBank, gram_style_distance, mask_iou, masked_rmse, object_mask, psnr
from .pipeline import (
    WHITE,
    demo_reference_cloud,
    demo_style_image,
    ring_cameras,
    stage1_generate,
    stage2_stylize,
)
from .ply import load_ply, save_ply
from .rasterizer import render

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
DEMO = "demo"

log = logging.getLogger("stylegs")

# short spellings of config keys, per command
ALIASES = {
    "init": {"--shape": "init_shape", "--n": "init_n", "--extent": "init_extent"},
    "stage1": {"--steps": "stage1_steps"},
    "stylize": {"--steps": "stage2_steps", "--style": "style_image", "--ply": "stage1_ply",
                "--lambda": "lambda_scale"},
    "render": {"--ply": "stage1_ply"},
    "eval": {"--ply": "stage1_ply", "--style": "style_image"},
    "ablate": {"--steps": "stage2_steps", "--style": "style_image", "--ply": "stage1_ply"},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config_flags(parser, command):
    group = parser.add_argument_group("config overrides")
    group.add_argument("--config", help="sectioned key = value file or JSON")
    for f in fields(RunConfig):
        flags = ["--" + f.name.replace("_", "-")]
        flags += [a for a, key in ALIASES.get(command, {}).items() if key == f.name]
        group.add_argument(*flags, dest="cfg_" + f.name, default=None, metavar=f.type.upper(),
                           help=f"config key {f.name} (default {f.default!r})")


def build_parser():
    parser = _Parser(prog="stylegs", description="Two-stage stylized Gaussian splatting toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init", help="write an initialized cloud as PLY")
    p.add_argument("--out", required=True, help="output PLY path")
    p.add_argument("--force", action="store_true")
    _config_flags(p, "init")

    for name, text in (("stage1", "generate the base object"), ("stylize", "distill a style into a Stage-1 cloud")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--force", action="store_true", help="overwrite a non-empty run directory")
        _config_flags(p, name)

    p = sub.add_parser("render", help="turntable strip of a cloud")
    p.add_argument("--out", required=True, help="output PNG path for the strip")
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--alpha-out", help="also write the alpha strip here")
    p.add_argument("--radii-out", help="write per-Gaussian screen radii (CSV, one column per view)")
    p.add_argument("--force", action="store_true")
    _config_flags(p, "render")

    p = sub.add_parser("eval", help="metrics report for a cloud on the fixed ring")
    p.add_argument("--out", required=True, help="output JSON path; a CSV is written next to it")
    p.add_argument("--force", action="store_true")
    _config_flags(p, "eval")

    p = sub.add_parser("gradcheck", help="finite-difference verification suites")
    p.add_argument("scope", nargs="?", default="all", choices=gradcheck.SCOPES + ("all",))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=20, help="rasterizer scenes to check")

    p = sub.add_parser("ablate", help="paired Stage-2 runs")
    p.add_argument("which", choices=ablation.ABLATIONS)
    p.add_argument("--force", action="store_true")
    _config_flags(p, "ablate")
    return parser


def resolve_config(args):
    config = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for f in fields(RunConfig):
        value = getattr(args, "cfg_" + f.name, None)
        if value is not None:
            overrides[f.name] = coerce(f.name, value)
    return apply_overrides(config, overrides)


def _claim_file(path, force):
    path = Path(path)
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _claim_dir(path, force):
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"run directory {path} is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _input_file(path, what):
    if not path:
        raise UsageError(f"missing {what}")
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _style(config):
    if config.style_image == DEMO:
        return demo_style_image(config.resolution)
    return read_png(_input_file(config.style_image, "style image (--style)"))


def _reference(config):
    if config.reference in ("", DEMO):
        return demo_reference_cloud(config.init_n, config.init_extent)
    return load_ply(_input_file(config.reference, "reference cloud (--reference)"))


def _stage1_inputs(config):
    ply = _input_file(config.stage1_ply, "Stage-1 cloud (--ply)")
    cloud = load_ply(ply)
    denoiser = ToyDenoiser(seed=config.seed)
    weights = ply.with_name("denoiser_stage1")
    if weights.with_suffix(".json").exists():
        load_weights(denoiser, weights)
    return cloud, denoiser


def _ring_summary(cloud, config, style=None, reference=None):
    """Per-view metric rows on the fixed ring."""
    bank = StyleFeatureBank(config.seed)
    rows = []
    for k, cam in enumerate(ring_cameras(config)):
        out = render(cloud, cam, WHITE)
        mask = object_mask(out)
        row = {"view": k, "mask_coverage": float(mask.mean())}
        if style is not None:
            tile = box_resize(np.asarray(style, dtype=np.float64)[..., :3], out.rgb.shape[1], out.rgb.shape[0])
            row["rmse_to_style"] = masked_rmse(out.rgb, tile, mask)
            row["gram_distance"] = gram_style_distance(out.rgb, style, bank, mask) if mask.any() else None
        if reference is not None:
            ref = render(reference, cam, WHITE)
            ref_mask = object_mask(ref)
            row["rmse_to_target"] = masked_rmse(out.rgb, ref.rgb, ref_mask)
            row["psnr_to_target"] = psnr(out.rgb, ref.rgb, ref_mask)
            row["iou_to_target"] = mask_iou(mask, ref_mask)
        rows.append(row)
    return rows


def _mean(rows, key):
    vals = [r[key] for r in rows if r.get(key) is not None]
    return float(np.mean(vals)) if vals else None


def _fmt(value):
    if value is None:
        return "n/a"
    return f"{value:.4f}" if isinstance(value, float) and math.isfinite(value) else str(value)


def cmd_init(args, config):
    cloud = init_cloud(config.init_shape, config.init_n, config.init_extent, config.seed)
    path = _claim_file(args.out, args.force)
    save_ply(cloud, path)
    print(f"wrote {len(cloud)} Gaussians to {path}")
    return EXIT_OK


def cmd_stage1(args, config):
    reference = _reference(config) if config.denoiser == "oracle" else None
    init = None
    if config.init_shape == "loaded":
        init = load_ply(_input_file(config.stage1_ply, "initial cloud (--stage1-ply)"))
    out_dir = _claim_dir(config.out_dir, args.force)
    (out_dir / "config.ini").write_text(config.to_text())
    result = stage1_generate(config, reference=reference, init=init, out_dir=out_dir)
    rows = _ring_summary(result.cloud, config, reference=reference)
    summary = f"stage1 done: {len(result.cloud)} Gaussians, {config.stage1_steps} steps"
    if reference is not None:
        summary += f", min psnr to targets {_fmt(min(r['psnr_to_target'] for r in rows))} dB"
    print(summary)
    return EXIT_OK


def cmd_stylize(args, config):
    style = _style(config)
    o1, denoiser = _stage1_inputs(config)
    out_dir = _claim_dir(config.out_dir, args.force)
    (out_dir / "config.ini").write_text(config.to_text())
    result = stage2_stylize(o1, style, config, denoiser=denoiser, out_dir=out_dir)
    before = _ring_summary(o1, config, style=style)
    after = _ring_summary(result.cloud, config, style=style, reference=o1)
    print(
        f"stylize done: gram {_fmt(_mean(after, 'gram_distance'))} (stage1 {_fmt(_mean(before, 'gram_distance'))}), "
        f"min iou {_fmt(min(r['iou_to_target'] for r in after))}, "
        f"surface loss {_fmt(result.telemetry[-1]['surface_loss'] if result.telemetry else math.nan)}"
    )
    return EXIT_OK


def cmd_render(args, config):
    cloud = load_ply(_input_file(config.stage1_ply, "cloud (--ply)"))
    if args.views < 1:
        raise UsageError("--views must be >= 1")
    outs = []
    for k in range(args.views):
        cam = orbit_camera(2.0 * math.pi * k / args.views, math.radians(config.camera_elevation_deg),
                           config.camera_radius, math.radians(config.fov_deg), config.resolution)
        outs.append(render(cloud, cam, WHITE))
    write_png(_claim_file(args.out, args.force), hstack([o.rgb for o in outs]))
    if args.alpha_out:
        alpha = hstack([np.repeat(o.alpha[..., None], 3, axis=2) for o in outs], value=0.0)
        write_png(_claim_file(args.alpha_out, args.force), alpha)
    if args.radii_out:
        with open(_claim_file(args.radii_out, args.force), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["gaussian"] + [f"view{k}" for k in range(args.views)])
            for i in range(len(cloud)):
                writer.writerow([i] + [repr(float(o.screen_radii[i])) for o in outs])
    print(f"rendered {args.views} views to {args.out}")
    return EXIT_OK


def cmd_eval(args, config):
    cloud = load_ply(_input_file(config.stage1_ply, "cloud (--ply)"))
    style = _style(config) if config.style_image else None
    reference = load_ply(_input_file(config.reference, "reference cloud")) if config.reference else None
    rows = _ring_summary(cloud, config, style=style, reference=reference)
    path = _claim_file(args.out, args.force)
    report = {"views": rows, "mean": {k: _mean(rows, k) for k in rows[0] if k != "view"}}
    path.write_text(json.dumps(report, indent=2, default=lambda v: None if v is None else float(v)))
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(" ".join(f"{k}={_fmt(v)}" for k, v in report["mean"].items()))
    return EXIT_OK


def cmd_gradcheck(args):
    results = gradcheck.run(args.scope, args.seed, args.scenes)
    for r in results:
        print(r.line())
    failures = [r for r in results if not r.passed]
    if failures:
        print("gradcheck FAILED: " + ", ".join(f"{r.scope}/{r.group}" for r in failures))
        return EXIT_VERIFY
    print("gradcheck passed")
    return EXIT_OK


def cmd_ablate(args, config):
    style = _style(config) if config.style_image else demo_style_image(config.resolution)
    out_dir = _claim_dir(Path(config.out_dir) / f"ablate_{args.which}", args.force)
    if config.stage1_ply:
        o1, denoiser = _stage1_inputs(config)
    else:
        log.info("no --ply given: generating a Stage-1 cloud from the demo reference")
        s1 = stage1_generate(config.replace(stage1_camera="fixed-ring-4"), reference=_reference(config))
        o1, denoiser = s1.cloud, s1.denoiser
    report = ablation.run_ablation(args.which, o1, style, config, denoiser)
    (out_dir / "report.json").write_text(json.dumps(report.as_dict(), indent=2))
    write_png(out_dir / "strip.png", report.strip)
    print(ablation.format_table(report))
    return EXIT_OK if report.passed else EXIT_VERIFY


COMMANDS = {
    "init": cmd_init,
    "stage1": cmd_stage1,
    "stylize": cmd_stylize,
    "render": cmd_render,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except (UsageError, ParameterError, FormatError, OSError) as exc:
        print(f"error: {exc}\nsee: stylegs {args.command} --help", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
