"""Decode per-token hidden features into constrained splat parameters.

A shared MLP trunk (first layer projects the backbone width down to the
trunk width) feeds five linear heads. Each head's activation maps into the
legal range: positions come from a per-axis discrete distribution over bin
centers in [-1, 1] (softmax expectation), opacity through a sigmoid, scales
through a clamped exponential, and quaternions are normalized to unit
length with an identity fallback for degenerate rows. SH coefficients are
unconstrained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .gaussians import GaussianSet

IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)
MIN_LOG_SCALE = -10.0  # keeps scales strictly positive after exp


def bin_centers(n_bins: int, dtype=None) -> np.ndarray:
    """Uniformly spaced bin centers spanning [-1, 1]."""
    return np.linspace(-1.0, 1.0, n_bins, dtype=dtype or ad.default_dtype())


def bin_expectation(logits, axis: int = -1) -> Tensor:
    """Expectation of the softmax distribution over [-1, 1] bin centers.

    Differentiable everywhere; increasing the logit of a higher-valued bin
    can only move the expectation up.
    """
    logits = logits if isinstance(logits, Tensor) else ad.tensor(logits)
    k = logits.data.shape[axis]
    if k < 2:
        raise DimensionError("bin_expectation needs at least 2 bins")
    probs = ad.softmax(logits, axis=axis)
    centers = bin_centers(k, dtype=logits.data.dtype)
    shape = [1] * logits.data.ndim
    shape[axis] = k
    weighted = ad.mul(probs, centers.reshape(shape))
    return ad.tensor_sum(weighted, axis=axis)


@dataclass
class DecoderParams:
    trunk: list          # [(w, b), ...] with SiLU between layers
    head_pos: tuple      # (w [h, 3*K], b)
    head_opacity: tuple  # (w [h, 1], b)
    head_sh: tuple       # (w [h, 12], b)
    head_scale: tuple    # (w [h, 3], b)
    head_quat: tuple     # (w [h, 4], b)
    n_bins: int
    max_scale: float

    @classmethod
    def init(cls, rng, d_model: int, *, hidden: int = 64, layers: int = 10,
             n_bins: int = 32, max_scale: float = 0.5,
             init_opacity: float = 0.1, init_scale: float = 0.1) -> "DecoderParams":
        def linear(fan_in, fan_out, std=None, bias=None):
            w = ad.tensor(rng.normal(0.0, std if std is not None else fan_in ** -0.5,
                                     size=(fan_in, fan_out)), requires_grad=True)
            b = ad.tensor(np.zeros(fan_out) if bias is None else np.asarray(bias, dtype=np.float64),
                          requires_grad=True)
            return w, b

        trunk = [linear(d_model, hidden)]
        for _ in range(layers - 1):
            trunk.append(linear(hidden, hidden))
        # Head biases pick sane starting splats: mid-gray color, small scale,
        # mostly transparent, identity rotation.
        opacity_bias = [float(np.log(init_opacity / (1.0 - init_opacity)))]
        sh_bias = np.zeros(12)
        sh_bias[0::4] = 0.5 / 0.28209479177387814
        return cls(
            trunk=trunk,
            head_pos=linear(hidden, 3 * n_bins, std=0.02),
            head_opacity=linear(hidden, 1, std=0.02, bias=opacity_bias),
            head_sh=linear(hidden, 12, std=0.02, bias=sh_bias),
            head_scale=linear(hidden, 3, std=0.02, bias=[float(np.log(init_scale))] * 3),
            head_quat=linear(hidden, 4, std=0.02, bias=list(IDENTITY_QUAT)),
            n_bins=n_bins,
            max_scale=max_scale,
        )

    def named_parameters(self, prefix="decoder."):
        for i, (w, b) in enumerate(self.trunk):
            yield prefix + f"trunk.{i}.w", w
            yield prefix + f"trunk.{i}.b", b
        for name in ("pos", "opacity", "sh", "scale", "quat"):
            w, b = getattr(self, "head_" + name)
            yield prefix + f"head_{name}.w", w
            yield prefix + f"head_{name}.b", b


def decode(params: DecoderParams, hidden: Tensor) -> GaussianSet:
    """Map backbone features [N, D] to a GaussianSet satisfying its invariants.

    The trunk is shared across tokens, so decoding is permutation
    equivariant: permuting the hidden rows permutes the splats identically.
    """
    h = hidden
    for w, b in params.trunk:
        h = ad.silu(ad.add(ad.matmul(h, w), b))

    n = h.data.shape[0]
    k = params.n_bins
    pos_logits = ad.add(ad.matmul(h, params.head_pos[0]), params.head_pos[1])
    position = bin_expectation(ad.reshape(pos_logits, (n * 3, k)), axis=-1).reshape(n, 3)

    opacity = ad.sigmoid(ad.add(ad.matmul(h, params.head_opacity[0]),
                                params.head_opacity[1])).reshape(n)
    sh = ad.add(ad.matmul(h, params.head_sh[0]), params.head_sh[1])
    log_scale = ad.clamp(ad.add(ad.matmul(h, params.head_scale[0]), params.head_scale[1]),
                         lo=MIN_LOG_SCALE, hi=float(np.log(params.max_scale)))
    scale = ad.exp(log_scale)
    quat = ad.normalize_rows(ad.add(ad.matmul(h, params.head_quat[0]), params.head_quat[1]),
                             fallback=IDENTITY_QUAT)
    return GaussianSet(position=position, opacity=opacity, sh=sh, scale=scale, quat=quat)
