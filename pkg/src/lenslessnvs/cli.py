"""Command-line front end.

Subcommands: psf, simulate, deconvolve, dataset, train, finetune, render,
eval, selfcheck. Every run emits a JSON manifest recording the resolved
configuration, input hashes, and seed; `--from-manifest` replays a run from
that record. A plain key=value `--config` file can supply any flag; explicit
flags win over file values.

Exit codes: 0 success, 1 usage error, 2 runtime/data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import __version__

DEFAULT_K = 0.00045
DEFAULT_SNR = 40.0


class UsageError(ValueError):
    pass


def _hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _write_manifest(out_path, subcommand, args, input_paths):
    resolved = {k: v for k, v in vars(args).items()
                if k not in ("func", "config", "from_manifest")}
    manifest = {
        "subcommand": subcommand,
        "tool_version": __version__,
        "config": resolved,
        "input_hashes": {str(p): _hash_file(p) for p in input_paths
                         if p and os.path.isfile(str(p))},
    }
    path = str(out_path) + ".manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
    return path


def _apply_overrides(parser, sub, args, argv):
    """Fill values from --config (key=value) and --from-manifest (JSON) for
    flags not explicitly given on the command line."""
    overrides = {}
    if getattr(args, "from_manifest", None):
        with open(args.from_manifest) as f:
            m = json.load(f)
        if m.get("subcommand") != sub:
            raise UsageError(f"manifest is for {m.get('subcommand')!r}, not {sub!r}")
        overrides.update(m.get("config", {}))
    if getattr(args, "config", None):
        for line in open(args.config):
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            k, v = line.split("=", 1)
            overrides[k.strip().replace("-", "_")] = v.strip()
    explicit = {a.lstrip("-").split("=")[0].replace("-", "_")
                for a in argv if a.startswith("--")}
    for k, v in overrides.items():
        if k in explicit or not hasattr(args, k):
            continue
        current = getattr(args, k)
        if isinstance(v, str):
            if isinstance(current, bool):
                v = v.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                v = int(v)
            elif isinstance(current, float):
                v = float(v)
        setattr(args, k, v)
    return args


def _load_psf(path, grayscale=False, binarize=None, crop=None):
    from .imgcore import load_pfm, load_png
    from .lensless import Psf, psf_binarize, psf_crop, psf_normalize, psf_to_grayscale

    p = str(path)
    img = load_pfm(p) if p.endswith(".pfm") else load_png(p)
    psf = psf_normalize(Psf(img, provenance="calibrated-file"))
    if grayscale:
        psf = psf_to_grayscale(psf)
    if binarize is not None:
        psf = psf_binarize(psf, binarize)
    if crop:
        h, w = (int(x) for x in crop.lower().split("x"))
        psf = psf_crop(psf, h, w)
    return psf


def _save_image(img, path, bit_depth=8):
    from .imgcore import save_pfm, save_png

    if str(path).endswith(".pfm"):
        save_pfm(img, path)
    else:
        save_png(img, path, bit_depth)


def _load_image(path):
    from .imgcore import load_pfm, load_png

    return load_pfm(path) if str(path).endswith(".pfm") else load_png(path)


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def cmd_psf(args):
    psf = _load_psf(args.psf, args.grayscale, args.binarize, args.crop)
    if args.inspect:
        kern = psf.kernel
        hf = np.fft.fft2(kern.plane() if kern.channels == 1
                         else kern.data.mean(axis=2))
        print(f"shape: {kern.height}x{kern.width}x{kern.channels}")
        print(f"sum: {kern.data.sum(axis=(0, 1))}")
        print(f"max: {kern.data.max():.6g}")
        print(f"spectral_min: {np.abs(hf).min():.6g}")
    if args.out:
        _save_image(psf.kernel, args.out, 16)
        _write_manifest(args.out, "psf", args, [args.psf])
    return 0


def cmd_simulate(args):
    from .lensless import simulate_capture

    gt = _load_image(args.image)
    psf = _load_psf(args.psf, grayscale=not args.rgb_psf)
    snr = math.inf if args.no_noise else args.noise_db
    cap = simulate_capture(gt, psf, snr, args.seed)
    _save_image(cap.raster, args.out, 16)
    _write_manifest(args.out, "simulate", args, [args.image, args.psf])
    return 0


def cmd_deconvolve(args):
    from .lensless import LenslessCapture, wiener_deconvolve

    g = _load_image(getattr(args, "in"))
    psf = _load_psf(args.psf, grayscale=True)
    cap = LenslessCapture(g, math.nan, "cli", mode=args.mode)
    est = wiener_deconvolve(cap, psf, args.k)
    _save_image(est, args.out, 16)
    _write_manifest(args.out, "deconvolve", args, [getattr(args, "in"), args.psf])
    return 0


def cmd_dataset(args):
    from .datasetio import generate_procedural_scene, load_scene, save_scene, \
        synthesize_lensless_dataset
    from .lensless import make_caustic_psf

    if args.action == "gen":
        scene = generate_procedural_scene(n_views=args.views,
                                          image_size=args.size,
                                          seed=args.seed,
                                          name=os.path.basename(args.out))
        save_scene(scene, args.out)
    elif args.action == "synth":
        scene = load_scene(args.scene)
        psf = (_load_psf(args.psf, grayscale=False) if args.psf
               else make_caustic_psf(args.psf_size, args.seed))
        snr = math.inf if args.no_noise else args.noise_db
        out = synthesize_lensless_dataset(scene, psf, snr, args.seed,
                                          grayscale=not args.rgb_psf, k=args.k)
        save_scene(out, args.out)
    else:
        raise UsageError(f"unknown dataset action {args.action!r}")
    _write_manifest(os.path.join(args.out, "run"), "dataset", args,
                    [args.psf] if getattr(args, "psf", None) else [])
    return 0


def _train_config(args):
    from .renderer import RendererConfig
    from .training import TrainConfig

    rc = RendererConfig(feature_dim=args.dim, pyramid_levels=args.levels,
                        heads=args.heads, view_blocks=args.view_blocks,
                        ray_blocks=args.ray_blocks, points_per_ray=args.points,
                        source_views=args.views)
    return TrainConfig(lam=args.lam, lr=args.lr, total_steps=args.steps,
                       rays_per_step=args.rays, seed=args.seed,
                       snr_db=math.inf if args.no_noise else args.noise_db,
                       grayscale_psf=not args.rgb_psf,
                       source_views_min=args.src_min, source_views_max=args.src_max,
                       val_interval=args.val_interval, renderer=rc)


def cmd_train(args):
    from .datasetio import load_scene
    from .nnmath import save_checkpoint
    from .training import train

    config = _train_config(args)
    scenes = [load_scene(d) for d in args.data]
    store, rows = train(scenes, config, log_path=args.log, quiet=args.quiet)
    save_checkpoint(args.out, store, config.total_steps)
    with open(str(args.out) + ".json", "w") as f:
        json.dump(config.renderer.to_dict(), f, indent=2)
    _write_manifest(args.out, "train", args, [])
    return 0


def cmd_finetune(args):
    from .datasetio import load_scene
    from .nnmath import load_checkpoint, save_checkpoint
    from .renderer import RendererConfig, init_renderer_params
    from .training import finetune

    config = _train_config(args)
    with open(str(args.checkpoint) + ".json") as f:
        config.renderer = RendererConfig.from_dict(json.load(f))
    store = init_renderer_params(config.renderer, config.seed)
    store, start = load_checkpoint(args.checkpoint, store)
    scene = load_scene(args.data[0])
    store, rows = finetune(scene, store, args.steps, config, log_path=args.log,
                           quiet=args.quiet)
    save_checkpoint(args.out, store, start + args.steps)
    with open(str(args.out) + ".json", "w") as f:
        json.dump(config.renderer.to_dict(), f, indent=2)
    _write_manifest(args.out, "finetune", args, [args.checkpoint])
    return 0


def cmd_render(args):
    from .datasetio import load_scene
    from .geometry import select_source_views
    from .nnmath import load_checkpoint
    from .renderer import RendererConfig, init_renderer_params, render_image

    with open(str(args.checkpoint) + ".json") as f:
        config = RendererConfig.from_dict(json.load(f))
    if args.points:
        import dataclasses
        config = dataclasses.replace(config, points_per_ray=args.points)
    store = init_renderer_params(config, 0)
    store, _ = load_checkpoint(args.checkpoint, store)
    scene = load_scene(args.scene)
    tidx = args.target_pose
    target = scene.views[tidx]
    candidates = [scene.coarse_view(i) for i in range(len(scene.views)) if i != tidx]
    n = min(args.views or config.source_views, len(candidates))
    picked = select_source_views(target.pose, candidates, n)
    sources = [candidates[i] for i in picked]
    near, far = scene.bounds
    img, valid = render_image(target, sources, store, config, near, far)
    _save_image(img, args.out)
    if not valid.all():
        print(f"warning: {int((~valid).sum())} rays had no source coverage",
              file=sys.stderr)
    _write_manifest(args.out, "render", args, [args.checkpoint])
    return 0


def cmd_eval(args):
    from .imgcore import psnr, ssim

    pred_dir, gt_dir = args.pred, args.gt
    names = sorted(f for f in os.listdir(pred_dir)
                   if f.endswith((".png", ".pfm")))
    if not names:
        raise UsageError(f"no images in {pred_dir}")
    psnrs, ssims = [], []
    print(f"{'file':16s} {'psnr':>8s} {'ssim':>8s}")
    for name in names:
        a = _load_image(os.path.join(pred_dir, name))
        b = _load_image(os.path.join(gt_dir, name))
        p, s = psnr(a, b), ssim(a, b)
        psnrs.append(p)
        ssims.append(s)
        print(f"{name:16s} {p:8.2f} {s:8.4f}")
    print(f"{'mean':16s} {np.mean(psnrs):8.2f} {np.mean(ssims):8.4f}")
    return 0


def cmd_selfcheck(args):
    from .verify import run_selfcheck

    return 0 if run_selfcheck(verbose=True) else 2


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise UsageError(message)


def _common(sp):
    sp.add_argument("--config", help="key=value file supplying defaults")
    sp.add_argument("--from-manifest", help="replay a recorded run")
    sp.add_argument("--threads", type=int, default=1,
                    help="parallelism cap; 1 (default) is bit-reproducible")
    sp.add_argument("--seed", type=int, default=0, help="root random seed")


def build_parser() -> _Parser:
    parser = _Parser(prog="lenslessnvs",
                     description="lensless capture simulation, Wiener recovery, "
                                 "and joint refine-and-render view synthesis")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("psf", help="inspect/transform a PSF kernel")
    p.add_argument("--psf", required=True, help="PSF file (pfm or png)")
    p.add_argument("--grayscale", action="store_true", help="collapse to 1 channel")
    p.add_argument("--binarize", type=float, default=None, metavar="T",
                   help="threshold at T*max then renormalize")
    p.add_argument("--crop", default=None, metavar="HxW", help="center crop")
    p.add_argument("--inspect", action="store_true",
                   help="print sum, max, spectral minimum")
    p.add_argument("--out", default=None, help="write transformed kernel")
    _common(p)
    p.set_defaults(func=cmd_psf)

    p = sub.add_parser("simulate", help="simulate a lensless capture")
    p.add_argument("--image", required=True)
    p.add_argument("--psf", required=True)
    p.add_argument("--noise-db", type=float, default=DEFAULT_SNR,
                   help="capture SNR in dB (default 40)")
    p.add_argument("--no-noise", action="store_true")
    p.add_argument("--rgb-psf", action="store_true",
                   help="keep PSF color channels (ablation)")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("deconvolve", help="Wiener-deconvolve a capture")
    p.add_argument("--in", required=True, dest="in")
    p.add_argument("--psf", required=True)
    p.add_argument("--k", type=float, default=DEFAULT_K,
                   help=f"noise-to-signal ratio (default {DEFAULT_K})")
    p.add_argument("--mode", choices=["linear", "circular"], default="linear")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_deconvolve)

    p = sub.add_parser("dataset", help="generate or synthesize scenes")
    p.add_argument("action", choices=["gen", "synth"])
    p.add_argument("--out", required=True)
    p.add_argument("--scene", help="input scene dir (synth)")
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--psf", default=None, help="PSF file; default is seeded synthetic")
    p.add_argument("--psf-size", type=int, default=13)
    p.add_argument("--k", type=float, default=DEFAULT_K)
    p.add_argument("--noise-db", type=float, default=DEFAULT_SNR)
    p.add_argument("--no-noise", action="store_true")
    p.add_argument("--rgb-psf", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_dataset)

    def train_flags(p):
        p.add_argument("--data", nargs="+", required=True, help="scene dirs")
        p.add_argument("--steps", type=int, default=1000)
        p.add_argument("--lr", type=float, default=5e-4,
                       help="initial Adam learning rate (default 5e-4)")
        p.add_argument("--lambda", dest="lam", type=float, default=0.4,
                       help="perceptual loss weight (default 0.4)")
        p.add_argument("--rays", type=int, default=576,
                       help="rays per step (default 576)")
        p.add_argument("--points", type=int, default=192,
                       help="samples per ray (default 192)")
        p.add_argument("--views", type=int, default=10,
                       help="source views at inference (default 10)")
        p.add_argument("--src-min", type=int, default=8,
                       help="min training source views (default 8)")
        p.add_argument("--src-max", type=int, default=12,
                       help="max training source views (default 12)")
        p.add_argument("--dim", type=int, default=32)
        p.add_argument("--levels", type=int, default=3)
        p.add_argument("--heads", type=int, default=1)
        p.add_argument("--view-blocks", type=int, default=2)
        p.add_argument("--ray-blocks", type=int, default=2)
        p.add_argument("--noise-db", type=float, default=DEFAULT_SNR)
        p.add_argument("--no-noise", action="store_true")
        p.add_argument("--rgb-psf", action="store_true")
        p.add_argument("--val-interval", type=int, default=200)
        p.add_argument("--log", default=None, help="CSV metric log path")
        p.add_argument("--quiet", action="store_true")
        p.add_argument("--out", required=True, help="checkpoint path")
        _common(p)

    p = sub.add_parser("train", help="train the renderer on lensless scenes")
    train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="scene-specific finetuning (lr x0.1)")
    train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("render", help="render a novel view from a checkpoint")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target-pose", type=int, default=0,
                   help="view index to render")
    p.add_argument("--views", type=int, default=None,
                   help="source view count (default from checkpoint config)")
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM table over paired directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selfcheck", help="gradient and invariant verification")
    _common(p)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None) or getattr(args, "from_manifest", None):
            args = _apply_overrides(parser, args.cmd, args, argv)
        return args.func(args)
    except UsageError:
        return 1
    except SystemExit as e:
        # argparse --help exits 0; treat other exits as usage errors
        return 0 if e.code in (0, None) else 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
