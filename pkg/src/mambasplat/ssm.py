"""Selective state space sequence layer.

The continuous system h' = A h + B x, y = C h + D x is discretized with the
bilinear transform

    Abar = (I - dt/2 A)^-1 (I + dt/2 A)
    Bbar = (I - dt/2 A)^-1 dt B
    Cbar = C

and run as the recurrence h_k = Abar_k h_{k-1} + Bbar_k x_k,
y_k = C_k h_k + D x_k. Selectivity comes from deriving B_k, C_k and the
per-channel step dt_k from the current input. The state matrix is diagonal
per channel; the recurrence is sequential in length and vectorized over
channels, so cost is linear in L.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, NumericalError


def discretize(a, b, dt: float):
    """Bilinear discretization of a continuous system (general matrix form).

    Accepts a square matrix ``a`` (or a scalar / diagonal vector) and input
    matrix ``b``; returns (abar, bbar) as float64 arrays. The output matrix C
    passes through discretization unchanged, so it has no counterpart here.
    """
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:  # diagonal system
        den = 1.0 - 0.5 * dt * a
        if np.any(den == 0.0):
            raise NumericalError("bilinear discretization is singular: 1 - dt/2 * a hit zero")
        abar = (1.0 + 0.5 * dt * a) / den
        bbar = (dt * b.T / den).T if b.ndim > 0 else dt * b / den
        return abar, bbar
    n = a.shape[0]
    lhs = np.eye(n) - 0.5 * dt * a
    try:
        abar = np.linalg.solve(lhs, np.eye(n) + 0.5 * dt * a)
        bbar = np.linalg.solve(lhs, dt * np.atleast_2d(b.reshape(n, -1)))
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"bilinear discretization is singular: {e}") from None
    return abar, bbar.reshape(b.shape)


@njit(cache=True)
def _scan_forward(x, a, bsel, csel, delta, dcoef):
    L, D = x.shape
    n = a.shape[1]
    h = np.zeros((L + 1, D, n), dtype=x.dtype)
    y = np.empty_like(x)
    for k in range(L):
        for d in range(D):
            dt = delta[k, d]
            xv = x[k, d]
            acc = 0.0
            for j in range(n):
                u = 0.5 * dt * a[d, j]
                rden = 1.0 / (1.0 - u)
                hv = (1.0 + u) * rden * h[k, d, j] + dt * bsel[k, j] * rden * xv
                h[k + 1, d, j] = hv
                acc += csel[k, j] * hv
            y[k, d] = acc + dcoef[d] * xv
    return y, h


@njit(cache=True)
def _scan_forward_nograd(x, a, bsel, csel, delta, dcoef):
    # rolling state instead of the full history; arithmetic matches the
    # gradient path exactly (state round-trips through x.dtype each step)
    L, D = x.shape
    n = a.shape[1]
    h = np.zeros((D, n), dtype=x.dtype)
    y = np.empty_like(x)
    for k in range(L):
        for d in range(D):
            dt = delta[k, d]
            xv = x[k, d]
            acc = 0.0
            for j in range(n):
                u = 0.5 * dt * a[d, j]
                rden = 1.0 / (1.0 - u)
                hv = (1.0 + u) * rden * h[d, j] + dt * bsel[k, j] * rden * xv
                h[d, j] = hv  # rounds to x.dtype, as the history buffer does
                acc += csel[k, j] * hv
            y[k, d] = acc + dcoef[d] * xv
    return y


@njit(cache=True)
def _scan_backward(x, a, bsel, csel, delta, dcoef, h, gy):
    L, D = x.shape
    n = a.shape[1]
    gx = np.zeros_like(x)
    ga = np.zeros_like(a)
    gb = np.zeros_like(bsel)
    gc = np.zeros_like(csel)
    gdelta = np.zeros_like(delta)
    gd = np.zeros_like(dcoef)
    gh = np.zeros((D, n))
    for k in range(L - 1, -1, -1):
        for d in range(D):
            gyv = gy[k, d]
            dt = delta[k, d]
            xv = x[k, d]
            gd[d] += gyv * xv
            gxv = gyv * dcoef[d]
            gdt = 0.0
            for j in range(n):
                gc[k, j] += gyv * h[k + 1, d, j]
                ghv = gh[d, j] + gyv * csel[k, j]
                u = 0.5 * dt * a[d, j]
                rden = 1.0 / (1.0 - u)
                rden2 = rden * rden
                bv = bsel[k, j]
                bbar = dt * bv * rden
                gabar = ghv * h[k, d, j]
                gbbar = ghv * xv
                gxv += ghv * bbar
                gh[d, j] = ghv * (1.0 + u) * rden
                gdt += (gabar * a[d, j] + gbbar * bv) * rden2
                ga[d, j] += (gabar * dt + gbbar * 0.5 * dt * dt * bv) * rden2
                gb[k, j] += gbbar * dt * rden
            gdelta[k, d] = gdt
            gx[k, d] = gxv
    return gx, ga, gb, gc, gdelta, gd


def _scan_op(x: Tensor, a: Tensor, bsel: Tensor, csel: Tensor,
             delta: Tensor, dcoef: Tensor) -> Tensor:
    tensors = (x, a, bsel, csel, delta, dcoef)
    xs = [np.ascontiguousarray(t.data) for t in tensors]
    if not (ad.grad_enabled() and any(t.requires_grad for t in tensors)):
        return Tensor(_scan_forward_nograd(*xs))
    y, h = _scan_forward(*xs)

    def vjp(g):
        return _scan_backward(*xs, h, np.ascontiguousarray(g))

    return ad._op(y, tensors, vjp)


@dataclass
class SsmCore:
    """State matrices plus the projections that make them input dependent.

    ``a_log`` parameterizes the diagonal state matrix as A = -exp(a_log),
    which keeps every entry strictly negative (a stable continuous system,
    and 1 - dt/2*A stays invertible) throughout training, not just at
    initialization. ``dt_bias`` goes through softplus so the step is always
    positive.
    """

    a_log: Tensor        # [D_inner, n]
    dcoef: Tensor        # [D_inner] direct feed-through (kept undiscretized)
    b_proj: Tensor       # [D_inner, n]
    c_proj: Tensor       # [D_inner, n]
    dt_proj: Tensor      # [D_inner, D_inner]
    dt_bias: Tensor      # [D_inner]

    @classmethod
    def init(cls, rng: np.random.Generator, d_inner: int, n: int,
             dt_min: float = 1e-3, dt_max: float = 1e-1) -> "SsmCore":
        a = np.tile(np.arange(1, n + 1, dtype=np.float64), (d_inner, 1))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_inner))
        dt_bias = np.log(np.expm1(dt))  # softplus inverse
        dt_c = ad.default_dtype()
        return cls(
            a_log=ad.tensor(np.log(a), requires_grad=True),
            dcoef=ad.tensor(np.ones(d_inner), requires_grad=True),
            b_proj=ad.tensor(rng.normal(0.0, d_inner ** -0.5, size=(d_inner, n)), requires_grad=True),
            c_proj=ad.tensor(rng.normal(0.0, d_inner ** -0.5, size=(d_inner, n)), requires_grad=True),
            dt_proj=ad.tensor(rng.normal(0.0, 0.01, size=(d_inner, d_inner)), requires_grad=True),
            dt_bias=ad.tensor(dt_bias.astype(dt_c), requires_grad=True),
        )

    def named_parameters(self, prefix=""):
        for name in ("a_log", "dcoef", "b_proj", "c_proj", "dt_proj", "dt_bias"):
            yield prefix + name, getattr(self, name)


def selective_scan(x: Tensor, core: SsmCore) -> Tensor:
    """Run the selective recurrence over a sequence x of shape [L, D_inner].

    B_k, C_k and dt_k are linear (resp. softplus-linear) functions of x_k;
    the initial state is zero.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"selective_scan expects [L, D_inner], got {x.data.shape}")
    if x.data.shape[1] != core.b_proj.data.shape[0]:
        raise DimensionError(
            f"channel mismatch: x {x.data.shape}, b_proj {core.b_proj.data.shape}")
    bsel = ad.matmul(x, core.b_proj)                       # [L, n]
    csel = ad.matmul(x, core.c_proj)                       # [L, n]
    delta = ad.softplus(ad.add(ad.matmul(x, core.dt_proj), core.dt_bias))  # [L, D_inner]
    a = ad.mul(ad.exp(core.a_log), -1.0)                   # strictly negative diagonal
    return _scan_op(x, a, bsel, csel, delta, core.dcoef)


@dataclass
class MambaBlockParams:
    """One pre-norm selective-SSM block: conv, scan, gate, residual.

    The linear projections carry no bias (and the layer norm shift starts at
    zero) so an all-zero prefix stays exactly zero through the inner path.
    """

    ln_gamma: Tensor     # [D_model]
    ln_beta: Tensor      # [D_model]
    in_proj: Tensor      # [D_model, 2*D_inner]  (state path | gate path)
    conv_kernel: Tensor  # [w, D_inner] causal depthwise
    core: SsmCore
    out_proj: Tensor     # [D_inner, D_model]

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, expand: int = 2,
             n: int = 16, conv_width: int = 4) -> "MambaBlockParams":
        d_inner = expand * d_model
        return cls(
            ln_gamma=ad.tensor(np.ones(d_model), requires_grad=True),
            ln_beta=ad.tensor(np.zeros(d_model), requires_grad=True),
            in_proj=ad.tensor(rng.normal(0.0, d_model ** -0.5, size=(d_model, 2 * d_inner)),
                              requires_grad=True),
            conv_kernel=ad.tensor(rng.normal(0.0, conv_width ** -0.5, size=(conv_width, d_inner)),
                                  requires_grad=True),
            core=SsmCore.init(rng, d_inner, n),
            out_proj=ad.tensor(rng.normal(0.0, d_inner ** -0.5, size=(d_inner, d_model)),
                               requires_grad=True),
        )

    @property
    def d_inner(self) -> int:
        return self.out_proj.data.shape[0]

    def named_parameters(self, prefix=""):
        for name in ("ln_gamma", "ln_beta", "in_proj", "conv_kernel", "out_proj"):
            yield prefix + name, getattr(self, name)
        yield from self.core.named_parameters(prefix + "core.")


def mamba_block(x: Tensor, params: MambaBlockParams) -> Tensor:
    """Apply one block to a sequence [L, D_model]; shape is preserved.

    Pre-norm, then the inner path (causal depthwise conv -> SiLU -> selective
    scan) multiplied by a SiLU gate branch, output projection, and a residual
    add of the raw input.
    """
    d_inner = params.d_inner
    h = ad.layer_norm(x, params.ln_gamma, params.ln_beta)
    pz = ad.matmul(h, params.in_proj)          # [L, 2*D_inner]
    p = pz[:, :d_inner]
    gate = pz[:, d_inner:]
    p = ad.depthwise_conv1d(p, params.conv_kernel, causal=True)
    p = ad.silu(p)
    y = selective_scan(p, params.core)
    y = ad.mul(y, ad.silu(gate))
    return ad.add(ad.matmul(y, params.out_proj), x)
