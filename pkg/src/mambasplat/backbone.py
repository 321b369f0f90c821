"""Conditional sequence backbone over a fixed set of splat tokens.

Each layer prepends one projected camera token and the projected image
tokens in front of the current splat-token features, runs the selective-SSM
block over the combined sequence, and drops the prefix again, so every splat
token can read the conditioning through the causal scan:

    H_i = block_i([Pc @ T ; Px @ X ; O_{i-1}])
    O_i = H_i[1+L:]

Image tokens come from a learned patch embedder with the same [L, C]
interface as an external ViT-style tokenizer; pre-computed tokens can also
be injected from a file (see ``save_tokens`` / ``load_tokens``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Camera
from .errors import ConfigError, DataError, DimensionError
from .ssm import MambaBlockParams, mamba_block

TOKEN_MAGIC = b"MSTOKEN1"
CAMERA_EMBED_DIM = 16  # matched to the per-layer camera projection width


@dataclass
class PatchEmbedParams:
    """Non-overlapping patch projection plus learned positional embedding."""

    weight: Tensor    # [patch*patch*3, C]
    pos: Tensor       # [L, C]
    patch_size: int

    @classmethod
    def init(cls, rng, resolution: int, patch_size: int, channels: int) -> "PatchEmbedParams":
        if resolution % patch_size != 0:
            raise ConfigError(
                f"resolution {resolution} is not divisible by patch size {patch_size}")
        tokens = (resolution // patch_size) ** 2
        fan_in = patch_size * patch_size * 3
        return cls(
            weight=ad.tensor(rng.normal(0.0, fan_in ** -0.5, size=(fan_in, channels)),
                             requires_grad=True),
            pos=ad.tensor(rng.normal(0.0, 0.02, size=(tokens, channels)), requires_grad=True),
            patch_size=patch_size,
        )

    def named_parameters(self, prefix=""):
        yield prefix + "weight", self.weight
        yield prefix + "pos", self.pos


def tokenize_image(params: PatchEmbedParams, image: np.ndarray) -> Tensor:
    """Turn an H x W x 3 image in [0, 1] into [L, C] feature tokens."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected an H x W x 3 image, got {image.shape}")
    h, w, _ = image.shape
    p = params.patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} is not divisible by patch size {p}")
    patches = image.reshape(h // p, p, w // p, p, 3).transpose(0, 2, 1, 3, 4)
    flat = patches.reshape((h // p) * (w // p), p * p * 3)
    if flat.shape[0] != params.pos.data.shape[0]:
        raise ConfigError(
            f"embedder was built for {params.pos.data.shape[0]} tokens, image gives {flat.shape[0]}")
    x = ad.tensor(flat.astype(ad.default_dtype()))
    return ad.add(ad.matmul(x, params.weight), params.pos)


@dataclass
class CameraEncoderParams:
    """Two-layer MLP from the 16 raw camera numbers to the 16-wide embedding."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng, hidden: int = 64) -> "CameraEncoderParams":
        return cls(
            w1=ad.tensor(rng.normal(0.0, 16 ** -0.5, size=(16, hidden)), requires_grad=True),
            b1=ad.tensor(np.zeros(hidden), requires_grad=True),
            w2=ad.tensor(rng.normal(0.0, hidden ** -0.5, size=(hidden, CAMERA_EMBED_DIM)),
                         requires_grad=True),
            b2=ad.tensor(np.zeros(CAMERA_EMBED_DIM), requires_grad=True),
        )

    def named_parameters(self, prefix=""):
        for name in ("w1", "b1", "w2", "b2"):
            yield prefix + name, getattr(self, name)


def embed_camera(params: CameraEncoderParams, cam: Camera) -> Tensor:
    """Embed extrinsics plus size-normalized intrinsics; output is [16]."""
    raw = ad.tensor(cam.raw_vector().astype(ad.default_dtype()).reshape(1, 16))
    h = ad.silu(ad.add(ad.matmul(raw, params.w1), params.b1))
    return ad.add(ad.matmul(h, params.w2), params.b2).reshape(CAMERA_EMBED_DIM)


@dataclass
class ConditionLayerParams:
    """Per-layer camera / image projections plus the sequence block."""

    p_cam: Tensor   # [D, 16]
    p_img: Tensor   # [D, C]
    block: MambaBlockParams

    @classmethod
    def init(cls, rng, d_model: int, channels: int, expand: int,
             state_size: int, conv_width: int) -> "ConditionLayerParams":
        return cls(
            p_cam=ad.tensor(rng.normal(0.0, 16 ** -0.5, size=(d_model, CAMERA_EMBED_DIM)),
                            requires_grad=True),
            p_img=ad.tensor(rng.normal(0.0, channels ** -0.5, size=(d_model, channels)),
                            requires_grad=True),
            block=MambaBlockParams.init(rng, d_model, expand=expand, n=state_size,
                                        conv_width=conv_width),
        )

    def named_parameters(self, prefix=""):
        yield prefix + "p_cam", self.p_cam
        yield prefix + "p_img", self.p_img
        yield from self.block.named_parameters(prefix + "block.")


def condition_block_forward(layer: ConditionLayerParams, cam_embed: Tensor,
                            image_tokens: Tensor, tokens_prev: Tensor) -> Tensor:
    """Prepend conditioning, run the block, drop the prefix.

    ``tokens_prev`` is [N, D]; the combined sequence has length 1 + L + N and
    the returned tensor is the trailing N rows, so the token count is
    preserved no matter how many conditioning tokens were prepended.
    """
    cam_token = ad.transpose(ad.matmul(layer.p_cam, cam_embed.reshape(CAMERA_EMBED_DIM, 1)))
    img_tokens = ad.transpose(ad.matmul(layer.p_img, ad.transpose(image_tokens)))
    seq = ad.concat([cam_token, img_tokens, tokens_prev], axis=0)
    out = mamba_block(seq, layer.block)
    prefix = 1 + image_tokens.data.shape[0]
    return out[prefix:, :]


@dataclass
class BackboneParams:
    patch: PatchEmbedParams
    cam_mlp: CameraEncoderParams
    embeddings: Tensor     # [N, embed_dim] learned splat-token embeddings
    lift: Tensor           # [embed_dim, D] bridges embedding width to block width
    layers: list
    final_gamma: Tensor
    final_beta: Tensor

    @classmethod
    def init(cls, rng, *, resolution: int, patch_size: int, channels: int,
             n_tokens: int, embed_dim: int, d_model: int, depth: int,
             expand: int = 2, state_size: int = 16, conv_width: int = 4,
             cam_hidden: int = 64) -> "BackboneParams":
        return cls(
            patch=PatchEmbedParams.init(rng, resolution, patch_size, channels),
            cam_mlp=CameraEncoderParams.init(rng, hidden=cam_hidden),
            embeddings=ad.tensor(rng.normal(0.0, 0.02, size=(n_tokens, embed_dim)),
                                 requires_grad=True),
            lift=ad.tensor(rng.normal(0.0, embed_dim ** -0.5, size=(embed_dim, d_model)),
                           requires_grad=True),
            layers=[ConditionLayerParams.init(rng, d_model, channels, expand,
                                              state_size, conv_width)
                    for _ in range(depth)],
            final_gamma=ad.tensor(np.ones(d_model), requires_grad=True),
            final_beta=ad.tensor(np.zeros(d_model), requires_grad=True),
        )

    @property
    def n_tokens(self) -> int:
        return self.embeddings.data.shape[0]

    def named_parameters(self, prefix="backbone."):
        yield from self.patch.named_parameters(prefix + "patch.")
        yield from self.cam_mlp.named_parameters(prefix + "cam_mlp.")
        yield prefix + "embeddings", self.embeddings
        yield prefix + "lift", self.lift
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(prefix + f"layers.{i}.")
        yield prefix + "final_gamma", self.final_gamma
        yield prefix + "final_beta", self.final_beta


def backbone_forward(params: BackboneParams, image, cam: Camera,
                     tokens: Tensor | None = None) -> Tensor:
    """Produce hidden features [N, D] for the splat tokens.

    ``tokens`` overrides the built-in patch embedder with externally supplied
    [L, C] features (the plug point for other tokenizers).
    """
    if tokens is None:
        tokens = tokenize_image(params.patch, image)
    elif tokens.data.shape[1] != params.layers[0].p_img.data.shape[1]:
        raise ConfigError(
            f"injected tokens have {tokens.data.shape[1]} channels, "
            f"backbone expects {params.layers[0].p_img.data.shape[1]}")
    cam_embed = embed_camera(params.cam_mlp, cam)
    out = ad.matmul(params.embeddings, params.lift)
    for layer in params.layers:
        out = condition_block_forward(layer, cam_embed, tokens, out)
    return ad.layer_norm(out, params.final_gamma, params.final_beta)


# -- token injection file ------------------------------------------------------


def save_tokens(path, tokens: np.ndarray) -> None:
    """Write [L, C] float32 tokens with a 16-byte (magic, L, C) header."""
    arr = np.ascontiguousarray(np.asarray(tokens, dtype="<f4"))
    if arr.ndim != 2:
        raise DimensionError(f"tokens must be [L, C], got {arr.shape}")
    with open(path, "wb") as f:
        f.write(TOKEN_MAGIC)
        f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())


def load_tokens(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:8] != TOKEN_MAGIC:
        raise DataError(f"{path}: not a token file (bad magic at offset 0)")
    length, channels = struct.unpack("<II", blob[8:16])
    expected = 16 + 4 * length * channels
    if len(blob) != expected:
        raise DataError(f"{path}: truncated token payload at offset {len(blob)} "
                        f"(expected {expected} bytes)")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(length, channels).copy()
