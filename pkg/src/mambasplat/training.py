"""Amortized training loop, checkpointing, and inference.

One step: pick an object, composite its reference image over a freshly
sampled background color, run backbone -> decoder once, then render and
supervise a handful of views (always including the reference) with the
four-term objective. Gradients are clipped at a global norm before the
AdamW update. Metrics stream to a CSV in the run directory; checkpoints
round-trip bit-exactly (custom binary format: JSON header + raw arrays) and
carry the RNG state, so resuming reproduces an uninterrupted run.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import struct
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import BackboneParams, backbone_forward
from .camera import Camera, normalized_camera
from .config import Config, from_dict
from .data import Dataset, ObjectSample, select_reference_view
from .decoder import DecoderParams, decode
from .errors import ConfigError, DataError, NumericalError
from .gaussians import GaussianSet
from .losses import LossWeights, dist_loss, mask_to_radial_polygon, random_background, total_loss
from .metrics import psnr
from .optim import AdamW, clip_grad_norm
from .renderer import RenderedImage, _rasterize_batch, project_gaussians, render

log = logging.getLogger("mambasplat")

CHECKPOINT_MAGIC = b"MSCKPT01"
CHECKPOINT_VERSION = 1


@dataclass
class Model:
    backbone: BackboneParams
    decoder: DecoderParams

    def named_parameters(self):
        yield from self.backbone.named_parameters("backbone.")
        yield from self.decoder.named_parameters("decoder.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def init_model(cfg: Config, rng: np.random.Generator) -> Model:
    backbone = BackboneParams.init(
        rng, resolution=cfg.resolution, patch_size=cfg.patch_size,
        channels=cfg.token_channels, n_tokens=cfg.n_gaussians,
        embed_dim=cfg.embed_dim, d_model=cfg.d_model, depth=cfg.depth,
        expand=cfg.expand, state_size=cfg.state_size, conv_width=cfg.conv_width,
        cam_hidden=cfg.camera_embed_hidden)
    decoder = DecoderParams.init(
        rng, cfg.d_model, hidden=cfg.decoder_hidden, layers=cfg.decoder_layers,
        n_bins=cfg.position_bins, max_scale=cfg.max_scale)
    return Model(backbone=backbone, decoder=decoder)


# -- checkpointing ----------------------------------------------------------------


def save_checkpoint(path, model: Model, cfg: Config, optimizer: AdamW | None = None,
                    step: int = 0, rng_state=None) -> None:
    """Byte-deterministic: identical state always writes identical bytes."""
    entries = list(model.named_parameters())
    if optimizer is not None:
        opt_state = optimizer.state()
        step_count = opt_state.pop("step_count")
        entries += [("optimizer." + k, Tensor(v)) for k, v in sorted(opt_state.items())]
    else:
        step_count = 0
    for name, t in entries:
        if not np.isfinite(t.data).all():
            raise NumericalError(f"refusing to checkpoint non-finite values in {name}")
    index = []
    offset = 0
    for name, t in entries:
        nbytes = t.data.nbytes
        index.append({"name": name, "dtype": t.data.dtype.str,
                      "shape": list(t.data.shape), "offset": offset})
        offset += nbytes
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "step": int(step),
        "optimizer_step_count": int(step_count),
        "rng_state": rng_state,
        "arrays": index,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, t in entries:
            f.write(np.ascontiguousarray(t.data).tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic at offset 0)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen].decode())
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version "
                        f"{header.get('format_version')!r}")
    payload = blob[12 + hlen:]
    arrays = {}
    for meta in header["arrays"]:
        dt = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        start = meta["offset"]
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=start)
        arrays[meta["name"]] = arr.reshape(meta["shape"]).copy()
    header["arrays"] = arrays
    return header


def restore_model(ckpt: dict) -> tuple:
    """Rebuild (model, config) from a loaded checkpoint dict."""
    cfg = from_dict(ckpt["config"])
    model = init_model(cfg, np.random.default_rng(0))
    for name, tensor in model.named_parameters():
        if name not in ckpt["arrays"]:
            raise DataError(f"checkpoint is missing parameter {name!r}")
        arr = ckpt["arrays"][name]
        if tuple(arr.shape) != tensor.data.shape:
            raise DataError(f"checkpoint parameter {name!r} has shape {arr.shape}, "
                            f"expected {tensor.data.shape}")
        tensor.data = arr.astype(tensor.data.dtype, copy=True)
    return model, cfg


def _restore_optimizer(optimizer: AdamW, ckpt: dict) -> None:
    state = {"step_count": ckpt["optimizer_step_count"]}
    for key, arr in ckpt["arrays"].items():
        if key.startswith("optimizer."):
            state[key[len("optimizer."):]] = arr
    if len(state) > 1:
        optimizer.load_state(state)


# -- forward helpers ----------------------------------------------------------------


def predict_gaussians(model: Model, image: np.ndarray, cam: Camera,
                      tokens=None) -> GaussianSet:
    hidden = backbone_forward(model.backbone, image, cam, tokens=tokens)
    return decode(model.decoder, hidden)


def render_projected(proj, height: int, width: int, background) -> RenderedImage:
    """Composite an existing projection (shares work with the distance term)."""
    bg = background if isinstance(background, Tensor) else ad.tensor(np.asarray(background))
    idx = np.nonzero(proj.valid)[0]
    if idx.size == 0:
        rgb = ad.mul(ad.tensor(np.ones((height, width, 3))), bg.reshape(1, 1, 3))
        return RenderedImage(rgb=rgb, alpha=ad.tensor(np.zeros((height, width))))
    perm = idx[np.argsort(proj.depth[idx], kind="stable")]
    out = _rasterize_batch(
        proj.u[perm], proj.v[perm], proj.cov_a[perm], proj.cov_b[perm], proj.cov_c[perm],
        proj.color_r[perm], proj.color_g[perm], proj.color_b[perm], proj.opacity[perm],
        bg, proj.depth[perm], height, width)
    return RenderedImage(rgb=out[:, :, 0:3], alpha=out[:, :, 3])


def lr_at_step(cfg: Config, step: int) -> float:
    """Learning rate for the step about to run (0-indexed).

    Linear warmup, then either constant or a cosine decay toward
    ``lr * lr_min_factor`` at ``cfg.steps``. A pure function of the step, so
    resumed runs see the same schedule.
    """
    if cfg.lr_warmup_steps > 0 and step < cfg.lr_warmup_steps:
        return cfg.lr * (step + 1) / cfg.lr_warmup_steps
    if cfg.lr_schedule == "cosine":
        span = max(1, cfg.steps - cfg.lr_warmup_steps)
        t = min(1.0, (step - cfg.lr_warmup_steps) / span)
        scale = cfg.lr_min_factor + (1.0 - cfg.lr_min_factor) * 0.5 * (1.0 + np.cos(np.pi * t))
        return cfg.lr * float(scale)
    return cfg.lr


def train_view_pool(n_views: int, n_train: int, reference: int) -> np.ndarray:
    """Evenly strided training-view indices, adjusted to contain the reference."""
    pool = np.unique(np.round(np.linspace(0, n_views - 1, n_train)).astype(np.int64))
    if reference not in pool:
        nearest = int(np.argmin(np.abs(pool - reference)))
        pool[nearest] = reference
        pool = np.sort(pool)
    return pool


@dataclass
class TrainState:
    model: Model
    optimizer: AdamW
    dataset: Dataset
    step: int
    terms: dict
    grad_norm: float


def _loss_for_object(model: Model, sample: ObjectSample, cfg: Config,
                     weights: LossWeights, step: int, rng: np.random.Generator,
                     polygons: dict):
    ref_idx = select_reference_view(sample)
    pool = train_view_pool(len(sample.views), cfg.train_views, ref_idx)
    others = pool[pool != ref_idx]
    picked = rng.choice(others, size=min(cfg.views_per_step - 1, others.size),
                        replace=False) if others.size else np.empty(0, np.int64)
    view_ids = [ref_idx] + sorted(int(i) for i in picked)

    ref_view = sample.views[ref_idx]
    ref_image, bg_color = random_background(ref_view.rgb, ref_view.alpha, rng)
    bg = ad.tensor(bg_color.astype(ad.default_dtype()))

    gaussians = predict_gaussians(model, ref_image, ref_view.camera)

    loss_acc = None
    terms_acc = {"rgb": 0.0, "mask": 0.0, "lpips": 0.0, "dist": 0.0}
    for vi in view_ids:
        view = sample.views[vi]
        proj = project_gaussians(gaussians, view.camera)
        pred = render_projected(proj, view.camera.height, view.camera.width, bg)
        gt_rgb = view.rgb + (1.0 - view.alpha[..., None]) * bg_color
        dist_term = None
        if step < weights.dist_warmup_steps and weights.lambda_dist > 0:
            key = (sample.object_id, vi)
            if key not in polygons:
                polygons[key] = mask_to_radial_polygon(view.mask, cfg.ray_angles)
            valid_idx = np.nonzero(proj.valid)[0]
            if valid_idx.size:
                dist_term = dist_loss(proj.u[valid_idx], proj.v[valid_idx],
                                      view.mask, polygons[key])
        view_loss, view_terms = total_loss(pred, gt_rgb, view.mask.astype(np.float64),
                                           dist_term, weights, step)
        loss_acc = view_loss if loss_acc is None else ad.add(loss_acc, view_loss)
        for k in terms_acc:
            terms_acc[k] += view_terms[k]
    scale = 1.0 / len(view_ids)
    for k in terms_acc:
        terms_acc[k] *= scale
    return ad.mul(loss_acc, scale), terms_acc, view_ids


def train(cfg: Config, resume=None, step_callback=None) -> dict:
    """Run the training loop; returns a summary dict.

    ``step_callback(state) -> bool`` runs after each step; returning True
    stops early (checkpointing still happens).
    """
    dataset = Dataset(cfg.dataset_dir)
    if dataset.resolution != cfg.resolution:
        raise ConfigError(f"dataset resolution {dataset.resolution} != config "
                          f"resolution {cfg.resolution}")
    os.makedirs(cfg.run_dir, exist_ok=True)
    weights = LossWeights(lambda_mask=cfg.lambda_mask, lambda_lpips=cfg.lambda_lpips,
                          lambda_dist=cfg.lambda_dist,
                          dist_warmup_steps=cfg.dist_warmup_steps)

    rng = np.random.default_rng(cfg.seed)
    model = init_model(cfg, rng)
    params = model.parameters()
    optimizer = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                      beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    start_step = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model, _ = restore_model(ckpt)
        params = model.parameters()
        optimizer = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                          beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        _restore_optimizer(optimizer, ckpt)
        start_step = ckpt["step"]
        if ckpt["rng_state"] is not None:
            rng.bit_generator.state = ckpt["rng_state"]
        log.info("resumed from %s at step %d", resume, start_step)

    metrics_path = os.path.join(cfg.run_dir, "metrics.csv")
    mode = "a" if (resume is not None and os.path.exists(metrics_path)) else "w"
    metrics_file = open(metrics_path, mode, newline="")
    writer = csv.writer(metrics_file)
    if mode == "w":
        writer.writerow(["step", "loss", "rgb", "mask", "dist", "lpips",
                         "psnr", "grad_norm", "seconds"])

    polygons: dict = {}
    t_start = time.time()
    last_loss = float("nan")
    stop = False
    step = start_step
    try:
        while step < cfg.steps and not stop:
            optimizer.zero_grad()
            batch_loss = None
            batch_terms = {"rgb": 0.0, "mask": 0.0, "lpips": 0.0, "dist": 0.0}
            batch_meta = []
            for _ in range(cfg.batch_size):
                obj_idx = int(rng.integers(0, len(dataset)))
                sample = dataset.load_object(obj_idx)
                obj_loss, obj_terms, view_ids = _loss_for_object(
                    model, sample, cfg, weights, step, rng, polygons)
                batch_meta.append({"object": sample.object_id, "views": view_ids})
                batch_loss = obj_loss if batch_loss is None else ad.add(batch_loss, obj_loss)
                for k in batch_terms:
                    batch_terms[k] += obj_terms[k] / cfg.batch_size
            batch_loss = ad.mul(batch_loss, 1.0 / cfg.batch_size)

            loss_val = float(batch_loss.data)
            if not np.isfinite(loss_val):
                dump = os.path.join(cfg.run_dir, f"nan_dump_step{step:06d}.json")
                with open(dump, "w") as f:
                    json.dump({"step": step, "loss": loss_val, "batch": batch_meta,
                               "terms": batch_terms}, f, indent=2)
                raise NumericalError(
                    f"non-finite loss {loss_val} at step {step}; diagnostics in {dump}")

            batch_loss.backward()
            grad_norm = clip_grad_norm(params, cfg.grad_clip)
            optimizer.lr = lr_at_step(cfg, step)
            optimizer.step()
            step += 1
            last_loss = loss_val

            if step % cfg.log_every == 0 or step == cfg.steps:
                train_psnr = 10.0 * np.log10(1.0 / max(batch_terms["rgb"], 1e-10))
                writer.writerow([step, f"{loss_val:.8g}", f"{batch_terms['rgb']:.8g}",
                                 f"{batch_terms['mask']:.8g}", f"{batch_terms['dist']:.8g}",
                                 f"{batch_terms['lpips']:.8g}", f"{train_psnr:.4f}",
                                 f"{grad_norm:.6g}", f"{time.time() - t_start:.2f}"])
                metrics_file.flush()
                log.info("step %d loss %.6f rgb %.6f psnr %.2f grad %.3f",
                         step, loss_val, batch_terms["rgb"], train_psnr, grad_norm)

            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                ckpt_path = os.path.join(cfg.run_dir, f"ckpt_{step:06d}.bin")
                save_checkpoint(ckpt_path, model, cfg, optimizer, step,
                                rng.bit_generator.state)

            if step_callback is not None:
                stop = bool(step_callback(TrainState(
                    model=model, optimizer=optimizer, dataset=dataset, step=step,
                    terms=dict(batch_terms, loss=loss_val), grad_norm=grad_norm)))
    finally:
        metrics_file.close()

    final_path = os.path.join(cfg.run_dir, f"ckpt_{step:06d}.bin")
    if not os.path.exists(final_path):
        save_checkpoint(final_path, model, cfg, optimizer, step, rng.bit_generator.state)
    return {"final_step": step, "final_loss": last_loss,
            "checkpoint": final_path, "metrics": metrics_path}


# -- evaluation and inference ---------------------------------------------------------


def evaluate_views(model: Model, sample: ObjectSample, view_ids, cfg: Config) -> list:
    """PSNR of re-rendered views against ground truth, both over white."""
    ref_idx = select_reference_view(sample)
    ref_view = sample.views[ref_idx]
    white = np.ones(3)
    ref_image = ref_view.rgb + (1.0 - ref_view.alpha[..., None]) * white
    scores = []
    with ad.no_grad():
        gaussians = predict_gaussians(model, ref_image.astype(np.float32), ref_view.camera)
        for vi in view_ids:
            view = sample.views[vi]
            img = render(gaussians, view.camera, white.astype(ad.default_dtype()))
            gt = view.rgb + (1.0 - view.alpha[..., None]) * white
            scores.append(psnr(img.rgb.data, gt))
    return scores


def infer(model: Model, image: np.ndarray, cfg: Config,
          cam: Camera | None = None, tokens=None) -> GaussianSet:
    """Single forward pass from an RGB(A) image to a splat set.

    RGBA inputs are composited over white. Without an explicit camera the
    normalized reference pose is assumed (fixed distance on the -z axis,
    looking at the origin).
    """
    image = np.asarray(image)
    if tokens is None:
        if image.ndim != 3 or image.shape[2] not in (3, 4):
            raise DataError(f"expected an RGB or RGBA image, got shape {image.shape}")
        if image.shape[0] != cfg.resolution or image.shape[1] != cfg.resolution:
            raise ConfigError(f"image is {image.shape[0]}x{image.shape[1]}, model expects "
                              f"{cfg.resolution}x{cfg.resolution}")
        if image.shape[2] == 4:
            alpha = image[..., 3:4]
            image = image[..., :3] * alpha + (1.0 - alpha)
    if cam is None:
        cam = normalized_camera(cfg.resolution, cfg.camera_distance, cfg.focal_factor)
    with ad.no_grad():
        gaussians = predict_gaussians(model, image.astype(np.float32), cam, tokens=tokens)
    gaussians.validate(max_scale=cfg.max_scale)
    return gaussians
