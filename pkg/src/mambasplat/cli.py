"""Command-line surface.

Subcommands: gen-data, train, infer, render, eval, gradcheck, bench-scan.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure. Logs go to stderr; metrics and artifacts go to the paths given.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from .backbone import load_tokens
from .camera import load_cameras, normalized_camera
from .config import Config, load_config
from .data import gen_synthetic_dataset
from .errors import ConfigError, DataError, NumericalError, UsageError
from .gaussians import load_gaussians, save_gaussians
from .imgio import read_png, read_raw_image, write_png, write_raw_image
from .metrics import psnr, ssim
from .renderer import render
from .training import infer as run_infer
from .training import load_checkpoint, restore_model, train as run_train

log = logging.getLogger("mambasplat")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we reserve that
        raise UsageError(message)


_CONFIG_FLAGS = [f.name for f in dataclasses.fields(Config)]


def _add_config_flags(parser):
    for name in _CONFIG_FLAGS:
        parser.add_argument("--" + name.replace("_", "-"), dest="cfg_" + name,
                            default=None, metavar="V")


def _build_config(args) -> Config:
    values = {}
    if getattr(args, "config", None):
        values = load_config(args.config).to_dict()
    for name in _CONFIG_FLAGS:
        v = getattr(args, "cfg_" + name, None)
        if v is not None:
            values[name] = v
    from .config import from_dict
    return from_dict({k: str(v) for k, v in values.items()})


def build_parser() -> _Parser:
    parser = _Parser(prog="mambasplat")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic multi-view dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--objects", type=int, default=1)
    p.add_argument("--views", type=int, default=48)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--camera-distance", type=float, default=2.0)
    p.add_argument("--focal-factor", type=float, default=0.625)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    _add_config_flags(p)

    p = sub.add_parser("infer", help="predict a splat file from one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PNG (RGB or RGBA) or raw float image")
    p.add_argument("--camera", default=None, help="camera file (first line used); "
                   "defaults to the normalized reference pose")
    p.add_argument("--tokens", default=None, help="inject pre-computed image tokens")
    p.add_argument("--out", required=True, help="output splat file")

    p = sub.add_parser("render", help="render a splat file from given cameras")
    p.add_argument("--splats", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--background", default="1,1,1", help="r,g,b in [0,1]")

    p = sub.add_parser("eval", help="PSNR/SSIM between prediction and ground-truth images")
    p.add_argument("--pred", required=True, help="directory of .raw or .png images")
    p.add_argument("--gt", required=True)
    p.add_argument("--masks", default=None, help="optional mask directory for masked PSNR")
    p.add_argument("--out", default=None, help="CSV report path")

    p = sub.add_parser("gradcheck", help="finite-difference checks of the training graph")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench-scan", help="time the selective scan at L and 2L")
    p.add_argument("--length", type=int, default=2048)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--state-size", type=int, default=16)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _load_image_any(path) -> np.ndarray:
    if str(path).endswith(".raw"):
        return read_raw_image(path)
    return read_png(path)


def cmd_gen_data(args) -> int:
    manifest = gen_synthetic_dataset(
        args.out, n_objects=args.objects, views_per_object=args.views,
        resolution=args.resolution, seed=args.seed,
        camera_distance=args.camera_distance, focal_factor=args.focal_factor)
    log.info("wrote %s", manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args)
    summary = run_train(cfg, resume=args.resume)
    log.info("finished at step %d, loss %.6f, checkpoint %s",
             summary["final_step"], summary["final_loss"], summary["checkpoint"])
    return 0


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, cfg = restore_model(ckpt)
    cam = None
    if args.camera:
        cams = load_cameras(args.camera)
        if not cams:
            raise DataError(f"{args.camera}: no cameras")
        cam = cams[0]
    tokens = None
    if args.tokens:
        tokens = ad.tensor(load_tokens(args.tokens))
    image = _load_image_any(args.image)
    t0 = time.time()
    gaussians = run_infer(model, image, cfg, cam=cam, tokens=tokens)
    elapsed = time.time() - t0
    save_gaussians(args.out, gaussians)
    log.info("predicted %d splats in %.3f s -> %s", gaussians.count, elapsed, args.out)
    return 0


def cmd_render(args) -> int:
    gaussians = load_gaussians(args.splats)
    cams = load_cameras(args.cameras)
    try:
        background = np.array([float(x) for x in args.background.split(",")])
        if background.shape != (3,):
            raise ValueError
    except ValueError:
        raise UsageError(f"--background must be r,g,b, got {args.background!r}") from None
    os.makedirs(args.out, exist_ok=True)
    for i, cam in enumerate(cams):
        img = render(gaussians, cam, background.astype(ad.default_dtype()))
        write_png(os.path.join(args.out, f"view_{i:03d}.png"), img.rgb.data)
        write_raw_image(os.path.join(args.out, f"view_{i:03d}.raw"), img.rgb.data)
    log.info("rendered %d views into %s", len(cams), args.out)
    return 0


def _image_files(directory):
    names = sorted(n for n in os.listdir(directory) if n.endswith((".raw", ".png")))
    raws = [n for n in names if n.endswith(".raw")]
    return raws if raws else names


def cmd_eval(args) -> int:
    pred_files = _image_files(args.pred)
    gt_files = _image_files(args.gt)
    if len(pred_files) != len(gt_files):
        raise UsageError(f"prediction/ground-truth counts differ: "
                         f"{len(pred_files)} vs {len(gt_files)}")
    rows = []
    for pf, gf in zip(pred_files, gt_files):
        pred = _load_image_any(os.path.join(args.pred, pf))
        gt = _load_image_any(os.path.join(args.gt, gf))
        if pred.shape != gt.shape:
            raise UsageError(f"{pf} vs {gf}: resolution mismatch {pred.shape} vs {gt.shape}")
        row = {"view": pf, "psnr": psnr(pred, gt), "ssim": ssim(pred, gt)}
        if args.masks:
            mask = read_png(os.path.join(args.masks, sorted(os.listdir(args.masks))[len(rows)]))
            m = mask > 0.5
            if m.any():
                row["masked_psnr"] = psnr(pred[m], gt[m])
        rows.append(row)
    mean_psnr = float(np.mean([r["psnr"] for r in rows])) if rows else float("nan")
    mean_ssim = float(np.mean([r["ssim"] for r in rows])) if rows else float("nan")
    if args.out:
        with open(args.out, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=sorted({k for r in rows for k in r}))
            writer.writeheader()
            writer.writerows(rows)
    for r in rows:
        print(f"{r['view']}: psnr {r['psnr']:.3f} dB  ssim {r['ssim']:.5f}")
    print(f"mean: psnr {mean_psnr:.3f} dB  ssim {mean_ssim:.5f} over {len(rows)} views")
    return 0


def cmd_gradcheck(args) -> int:
    from .camera import look_at
    from .data import random_object
    from .decoder import DecoderParams, decode
    from .ssm import MambaBlockParams, mamba_block
    from .training import init_model, predict_gaussians

    failures = []
    with ad.precision("double"):
        rng = np.random.default_rng(args.seed)

        blk = MambaBlockParams.init(rng, d_model=6, expand=2, n=4, conv_width=3)
        x = ad.tensor(rng.normal(0, 1, (7, 6)), requires_grad=True)
        err = ad.gradcheck(lambda: ad.tensor_sum(mamba_block(x, blk)),
                           [x] + [t for _, t in blk.named_parameters()],
                           samples=4, rng=rng)
        print(f"{'PASS' if err < 1e-4 else 'FAIL'} ssm block        rel err {err:.3g}")
        if err >= 1e-4:
            failures.append("ssm")

        obj = random_object(rng, 4, 6)
        for t in (obj.position, obj.opacity, obj.sh, obj.scale, obj.quat):
            t.requires_grad = True
        cam = normalized_camera(16)
        bg = ad.tensor([0.4, 0.4, 0.4], requires_grad=True)

        def build_render():
            img = render(obj, cam, bg)
            return ad.add(ad.tensor_mean(img.rgb), ad.tensor_mean(img.alpha))

        err = ad.gradcheck(build_render,
                           [obj.position, obj.opacity, obj.sh, obj.scale, obj.quat, bg],
                           samples=8, rng=rng)
        print(f"{'PASS' if err < 1e-3 else 'FAIL'} splat renderer   rel err {err:.3g}")
        if err >= 1e-3:
            failures.append("renderer")

        cfg = Config(resolution=16, patch_size=8, token_channels=8, n_gaussians=6,
                     depth=2, d_model=12, embed_dim=10, state_size=4,
                     decoder_layers=3, decoder_hidden=12, position_bins=8)
        model = init_model(cfg, rng)
        image = rng.uniform(0, 1, (16, 16, 3))

        def build_model():
            gs = predict_gaussians(model, image, cam)
            return (ad.tensor_sum(gs.position) + ad.tensor_sum(gs.opacity)
                    + ad.tensor_sum(gs.scale) + ad.tensor_sum(gs.sh * 0.01))

        err = ad.gradcheck(build_model, model.parameters(), samples=2, rng=rng)
        print(f"{'PASS' if err < 1e-3 else 'FAIL'} backbone+decoder rel err {err:.3g}")
        if err >= 1e-3:
            failures.append("model")

    if failures:
        raise NumericalError(f"gradient checks failed: {', '.join(failures)}")
    print("all gradient checks passed")
    return 0


def cmd_bench_scan(args) -> int:
    from .ssm import SsmCore, selective_scan

    rng = np.random.default_rng(args.seed)
    d_inner = 2 * args.d_model
    core = SsmCore.init(rng, d_inner, args.state_size)

    def timed(length):
        x = ad.tensor(rng.normal(0, 1, (length, d_inner)).astype(np.float32))
        selective_scan(x, core)  # warm the kernel
        times = []
        for _ in range(args.runs):
            t0 = time.perf_counter()
            selective_scan(x, core)
            times.append(time.perf_counter() - t0)
        return float(np.median(times))

    t1 = timed(args.length)
    t2 = timed(2 * args.length)
    ratio = t2 / t1
    print(f"scan L={args.length}: {t1 * 1e3:.2f} ms (median of {args.runs})")
    print(f"scan L={2 * args.length}: {t2 * 1e3:.2f} ms (median of {args.runs})")
    print(f"ratio: {ratio:.3f} (linear scaling doubles at most ~2x plus overhead)")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "render": cmd_render,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench-scan": cmd_bench_scan,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (see --help)")
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
