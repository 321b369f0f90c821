"""Differentiable splatting renderer.

Pipeline: world-space covariance from scale + rotation (Sigma = R S S^T R^T),
perspective projection of each splat center, first-order EWA-style projection
of the covariance (cov2d = J W Sigma W^T J^T plus a low-pass floor), SH color
evaluation along the view direction, then depth-sorted front-to-back alpha
compositing

    C = sum_i c_i a_i G_i prod_{j<i} (1 - a_j G_j)

over the residual-transmittance background. Each splat contributes only
within a hard cutoff of 3 standard deviations (circle of radius
3 * sqrt(lambda_max)). Rasterization runs per 16x16 pixel tile with a
depth-ordered splat list per tile; a plain-numpy per-pixel reference path
exists for cross-checking. Gradients flow to every splat parameter and to
the background color: projection is expressed in tape ops, and the
rasterizer is a single custom primitive whose backward pass recomputes
per-pixel transmittance front to back and suffix composites back to front
(no division, so fully opaque splats are safe).

All kernels accumulate in float64 and are single threaded, so renders are
deterministic; depth ties break by splat index via a stable sort.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Camera
from .errors import DimensionError, NumericalError
from .gaussians import SH_C0, SH_C1, GaussianSet

EPS_COV = 0.3          # pixel^2 low-pass floor added to projected covariances
NEAR_PLANE = 0.1
TILE = 16
CUTOFF_SIGMAS = 3.0


@dataclass
class Projected2DGaussian:
    """One splat after projection; fields may be numpy values or Tensors."""

    center2d: object     # [2] pixels
    cov2d: object        # [2, 2] symmetric positive definite, pixel^2
    depth: float         # camera-space z
    view_color: object   # [3] in [0, 1]
    opacity: object      # scalar in [0, 1]


@dataclass
class ProjectedSplats:
    """Batched projection output; depth and validity are not differentiated."""

    u: Tensor
    v: Tensor
    cov_a: Tensor
    cov_b: Tensor
    cov_c: Tensor
    color_r: Tensor
    color_g: Tensor
    color_b: Tensor
    opacity: Tensor
    depth: np.ndarray
    valid: np.ndarray


@dataclass
class RenderedImage:
    rgb: Tensor    # [H, W, 3]
    alpha: Tensor  # [H, W]


def cutoff_radius(cov_a, cov_b, cov_c):
    """Cutoff radius in pixels: 3 standard deviations of the major axis."""
    mid = 0.5 * (cov_a + cov_c)
    det = cov_a * cov_c - cov_b * cov_b
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    return CUTOFF_SIGMAS * np.sqrt(np.maximum(lam_max, 0.0))


# -- covariance construction ---------------------------------------------------


def _covariance_entries(scale: Tensor, quat: Tensor):
    """Six unique entries of R S S^T R^T for [N] splats (tape tensors)."""
    qn = ad.normalize_rows(quat, fallback=(1.0, 0.0, 0.0, 0.0))
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    r00 = 1.0 - 2.0 * (y * y + z * z)
    r01 = 2.0 * (x * y - w * z)
    r02 = 2.0 * (x * z + w * y)
    r10 = 2.0 * (x * y + w * z)
    r11 = 1.0 - 2.0 * (x * x + z * z)
    r12 = 2.0 * (y * z - w * x)
    r20 = 2.0 * (x * z - w * y)
    r21 = 2.0 * (y * z + w * x)
    r22 = 1.0 - 2.0 * (x * x + y * y)
    s0, s1, s2 = scale[:, 0], scale[:, 1], scale[:, 2]
    v0, v1, v2 = s0 * s0, s1 * s1, s2 * s2
    s00 = r00 * r00 * v0 + r01 * r01 * v1 + r02 * r02 * v2
    s01 = r00 * r10 * v0 + r01 * r11 * v1 + r02 * r12 * v2
    s02 = r00 * r20 * v0 + r01 * r21 * v1 + r02 * r22 * v2
    s11 = r10 * r10 * v0 + r11 * r11 * v1 + r12 * r12 * v2
    s12 = r10 * r20 * v0 + r11 * r21 * v1 + r12 * r22 * v2
    s22 = r20 * r20 * v0 + r21 * r21 * v1 + r22 * r22 * v2
    return s00, s01, s02, s11, s12, s22


def build_covariance(scale, quat) -> Tensor:
    """World-space covariance of one splat: symmetric PSD [3, 3]."""
    scale = scale if isinstance(scale, Tensor) else ad.tensor(scale)
    quat = quat if isinstance(quat, Tensor) else ad.tensor(quat)
    if scale.data.shape != (3,) or quat.data.shape != (4,):
        raise DimensionError("build_covariance expects scale [3] and quaternion [4]")
    s00, s01, s02, s11, s12, s22 = _covariance_entries(
        scale.reshape(1, 3), quat.reshape(1, 4))
    row = lambda a, b, c: ad.concat([a.reshape(1, 1), b.reshape(1, 1), c.reshape(1, 1)], axis=1)
    return ad.concat([row(s00, s01, s02), row(s01, s11, s12), row(s02, s12, s22)], axis=0)


def eval_gaussian(offset, cov) -> float:
    """exp(-0.5 x^T Sigma^-1 x): 1 at the mean, decaying along every ray."""
    x = np.asarray(offset, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    try:
        sol = np.linalg.solve(cov, x)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"singular covariance in eval_gaussian: {e}") from None
    return float(np.exp(-0.5 * float(x @ sol)))


# -- projection ----------------------------------------------------------------


def project_gaussians(gs: GaussianSet, cam: Camera, *, eps_cov: float = EPS_COV,
                      near: float = NEAR_PLANE) -> ProjectedSplats:
    """Project every splat into the camera; splats behind the near plane are
    flagged invalid (their numbers are clamped placeholders, never rendered)."""
    rot = cam.rotation
    dt = gs.position.data.dtype
    xc = ad.add(ad.matmul(gs.position, ad.tensor(rot.T.astype(dt))),
                ad.tensor(cam.translation.astype(dt).reshape(1, 3)))
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    valid = z.data > near
    zs = ad.clamp(z, lo=near)

    u = x / zs * cam.fx + cam.cx
    v = y / zs * cam.fy + cam.cy

    s00, s01, s02, s11, s12, s22 = _covariance_entries(gs.scale, gs.quat)

    j00 = ad.div(float(cam.fx), zs)
    j02 = ad.div(x * (-cam.fx), zs * zs)
    j11 = ad.div(float(cam.fy), zs)
    j12 = ad.div(y * (-cam.fy), zs * zs)
    m00 = j00 * float(rot[0, 0]) + j02 * float(rot[2, 0])
    m01 = j00 * float(rot[0, 1]) + j02 * float(rot[2, 1])
    m02 = j00 * float(rot[0, 2]) + j02 * float(rot[2, 2])
    m10 = j11 * float(rot[1, 0]) + j12 * float(rot[2, 0])
    m11 = j11 * float(rot[1, 1]) + j12 * float(rot[2, 1])
    m12 = j11 * float(rot[1, 2]) + j12 * float(rot[2, 2])

    cov_a = (m00 * m00 * s00 + m01 * m01 * s11 + m02 * m02 * s22
             + 2.0 * (m00 * m01 * s01 + m00 * m02 * s02 + m01 * m02 * s12)) + eps_cov
    cov_b = (m00 * m10 * s00 + m01 * m11 * s11 + m02 * m12 * s22
             + (m00 * m11 + m01 * m10) * s01
             + (m00 * m12 + m02 * m10) * s02
             + (m01 * m12 + m02 * m11) * s12)
    cov_c = (m10 * m10 * s00 + m11 * m11 * s11 + m12 * m12 * s22
             + 2.0 * (m10 * m11 * s01 + m10 * m12 * s02 + m11 * m12 * s12)) + eps_cov

    # First-order SH along the (per-splat) viewing direction.
    campos = cam.position.astype(dt)
    d = ad.sub(gs.position, ad.tensor(campos.reshape(1, 3)))
    dn = ad.div(d, ad.sqrt(ad.add(ad.tensor_sum(d * d, axis=1, keepdims=True), 1e-20)))
    vx, vy, vz = dn[:, 0], dn[:, 1], dn[:, 2]
    colors = []
    for ch in range(3):
        b = 4 * ch
        col = (gs.sh[:, b] * SH_C0
               + (gs.sh[:, b + 1] * (-1.0) * vy
                  + gs.sh[:, b + 2] * vz
                  + gs.sh[:, b + 3] * (-1.0) * vx) * SH_C1)
        colors.append(ad.clamp(col, 0.0, 1.0))

    return ProjectedSplats(
        u=u, v=v, cov_a=cov_a, cov_b=cov_b, cov_c=cov_c,
        color_r=colors[0], color_g=colors[1], color_b=colors[2],
        opacity=gs.opacity, depth=z.data.copy(), valid=valid,
    )


def project_gaussian(position, scale, quat, opacity, sh, cam: Camera):
    """Project a single splat; returns None when culled by the near plane."""
    one = GaussianSet(
        position=ad.tensor(np.asarray(position).reshape(1, 3)),
        opacity=ad.tensor(np.asarray(opacity).reshape(1)),
        sh=ad.tensor(np.asarray(sh).reshape(1, 12)),
        scale=ad.tensor(np.asarray(scale).reshape(1, 3)),
        quat=ad.tensor(np.asarray(quat).reshape(1, 4)),
    )
    p = project_gaussians(one, cam)
    if not p.valid[0]:
        return None
    cov = np.array([[p.cov_a.data[0], p.cov_b.data[0]],
                    [p.cov_b.data[0], p.cov_c.data[0]]])
    return Projected2DGaussian(
        center2d=np.array([p.u.data[0], p.v.data[0]]),
        cov2d=cov,
        depth=float(p.depth[0]),
        view_color=np.array([p.color_r.data[0], p.color_g.data[0], p.color_b.data[0]]),
        opacity=float(p.opacity.data[0]),
    )


# -- tile rasterization kernels -------------------------------------------------


@njit(cache=True)
def _tile_bins(u, v, radius, height, width, tile):
    m = u.shape[0]
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    tx0 = np.empty(m, np.int64)
    tx1 = np.empty(m, np.int64)
    ty0 = np.empty(m, np.int64)
    ty1 = np.empty(m, np.int64)
    counts = np.zeros(ntx * nty + 1, np.int64)
    for s in range(m):
        r = radius[s]
        if u[s] + r < 0.0 or u[s] - r > width - 1.0 or v[s] + r < 0.0 or v[s] - r > height - 1.0:
            tx0[s], tx1[s] = 0, -1
            ty0[s], ty1[s] = 0, -1
            continue
        a0 = int(np.floor((u[s] - r) / tile))
        a1 = int(np.floor((u[s] + r) / tile))
        b0 = int(np.floor((v[s] - r) / tile))
        b1 = int(np.floor((v[s] + r) / tile))
        tx0[s] = max(0, a0)
        tx1[s] = min(ntx - 1, a1)
        ty0[s] = max(0, b0)
        ty1[s] = min(nty - 1, b1)
        for ty in range(ty0[s], ty1[s] + 1):
            for tx in range(tx0[s], tx1[s] + 1):
                counts[ty * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    lists = np.empty(offsets[-1], np.int64)
    cursor = offsets[:-1].copy()
    for s in range(m):  # ascending splat order keeps each tile list depth sorted
        for ty in range(ty0[s], ty1[s] + 1):
            for tx in range(tx0[s], tx1[s] + 1):
                t = ty * ntx + tx
                lists[cursor[t]] = s
                cursor[t] += 1
    return offsets, lists, ntx, nty


@njit(cache=True)
def _raster_forward(u, v, ia, ib, ic, colr, colg, colb, opac, radius,
                    bg, height, width, tile, offsets, lists, ntx, nty):
    out = np.empty((height, width, 4), np.float64)
    for ty in range(nty):
        for tx in range(ntx):
            start = offsets[ty * ntx + tx]
            end = offsets[ty * ntx + tx + 1]
            y1 = min(height, (ty + 1) * tile)
            x1 = min(width, (tx + 1) * tile)
            for py in range(ty * tile, y1):
                for px in range(tx * tile, x1):
                    t_run = 1.0
                    cr = 0.0
                    cg = 0.0
                    cb = 0.0
                    aa = 0.0
                    for li in range(start, end):
                        s = lists[li]
                        dx = px - u[s]
                        dy = py - v[s]
                        if dx * dx + dy * dy > radius[s] * radius[s]:
                            continue
                        power = 0.5 * (ia[s] * dx * dx - 2.0 * ib[s] * dx * dy + ic[s] * dy * dy)
                        if power < 0.0:
                            continue
                        w = opac[s] * np.exp(-power)
                        cr += t_run * w * colr[s]
                        cg += t_run * w * colg[s]
                        cb += t_run * w * colb[s]
                        aa += t_run * w
                        t_run *= 1.0 - w
                    out[py, px, 0] = cr + t_run * bg[0]
                    out[py, px, 1] = cg + t_run * bg[1]
                    out[py, px, 2] = cb + t_run * bg[2]
                    out[py, px, 3] = aa
    return out


@njit(cache=True)
def _raster_backward(u, v, ca, cb_, cc, ia, ib, ic, colr, colg, colb, opac, radius,
                     bg, gout, height, width, tile, offsets, lists, ntx, nty):
    m = u.shape[0]
    gu = np.zeros(m, np.float64)
    gv = np.zeros(m, np.float64)
    gca = np.zeros(m, np.float64)
    gcb = np.zeros(m, np.float64)
    gcc = np.zeros(m, np.float64)
    gcolr = np.zeros(m, np.float64)
    gcolg = np.zeros(m, np.float64)
    gcolb = np.zeros(m, np.float64)
    gop = np.zeros(m, np.float64)
    gbg = np.zeros(3, np.float64)
    for ty in range(nty):
        for tx in range(ntx):
            start = offsets[ty * ntx + tx]
            end = offsets[ty * ntx + tx + 1]
            cap = end - start
            if cap == 0:
                # pixels see only the background
                y1 = min(height, (ty + 1) * tile)
                x1 = min(width, (tx + 1) * tile)
                for py in range(ty * tile, y1):
                    for px in range(tx * tile, x1):
                        gbg[0] += gout[py, px, 0]
                        gbg[1] += gout[py, px, 1]
                        gbg[2] += gout[py, px, 2]
                continue
            sbuf = np.empty(cap, np.int64)
            wbuf = np.empty(cap, np.float64)
            gbuf = np.empty(cap, np.float64)
            tbuf = np.empty(cap, np.float64)
            y1 = min(height, (ty + 1) * tile)
            x1 = min(width, (tx + 1) * tile)
            for py in range(ty * tile, y1):
                for px in range(tx * tile, x1):
                    # pass 1, front to back: record contributors and prefix transmittance
                    cnt = 0
                    t_run = 1.0
                    for li in range(start, end):
                        s = lists[li]
                        dx = px - u[s]
                        dy = py - v[s]
                        if dx * dx + dy * dy > radius[s] * radius[s]:
                            continue
                        power = 0.5 * (ia[s] * dx * dx - 2.0 * ib[s] * dx * dy + ic[s] * dy * dy)
                        if power < 0.0:
                            continue
                        g = np.exp(-power)
                        w = opac[s] * g
                        sbuf[cnt] = s
                        wbuf[cnt] = w
                        gbuf[cnt] = g
                        tbuf[cnt] = t_run
                        cnt += 1
                        t_run *= 1.0 - w
                    gr = gout[py, px, 0]
                    gg = gout[py, px, 1]
                    gb = gout[py, px, 2]
                    galpha = gout[py, px, 3]
                    gbg[0] += gr * t_run
                    gbg[1] += gg * t_run
                    gbg[2] += gb * t_run
                    # pass 2, back to front: suffix composites give d(out)/dw
                    # without dividing by (1 - w), so opaque splats are exact
                    r0 = bg[0]
                    r1 = bg[1]
                    r2 = bg[2]
                    ra = 0.0
                    for i in range(cnt - 1, -1, -1):
                        s = sbuf[i]
                        w = wbuf[i]
                        g = gbuf[i]
                        t_pre = tbuf[i]
                        wt = w * t_pre
                        gcolr[s] += gr * wt
                        gcolg[s] += gg * wt
                        gcolb[s] += gb * wt
                        gw = t_pre * (gr * (colr[s] - r0) + gg * (colg[s] - r1)
                                      + gb * (colb[s] - r2)) + galpha * t_pre * (1.0 - ra)
                        gop[s] += gw * g
                        gpow = -g * gw * opac[s]
                        dx = px - u[s]
                        dy = py - v[s]
                        gu[s] -= gpow * (ia[s] * dx - ib[s] * dy)
                        gv[s] -= gpow * (ic[s] * dy - ib[s] * dx)
                        q = cc[s] * dx * dx - 2.0 * cb_[s] * dx * dy + ca[s] * dy * dy
                        det = ca[s] * cc[s] - cb_[s] * cb_[s]
                        det2 = det * det
                        gca[s] += gpow * (dy * dy * det - q * cc[s]) / (2.0 * det2)
                        gcb[s] += gpow * (q * cb_[s] - dx * dy * det) / det2
                        gcc[s] += gpow * (dx * dx * det - q * ca[s]) / (2.0 * det2)
                        r0 = w * colr[s] + (1.0 - w) * r0
                        r1 = w * colg[s] + (1.0 - w) * r1
                        r2 = w * colb[s] + (1.0 - w) * r2
                        ra = w + (1.0 - w) * ra
    return gu, gv, gca, gcb, gcc, gcolr, gcolg, gcolb, gop, gbg


def _rasterize_batch(u, v, cov_a, cov_b, cov_c, col_r, col_g, col_b, opacity,
                     background, depth_sorted, height: int, width: int) -> Tensor:
    """Custom-gradient primitive over depth-sorted splat tensors."""
    tensors = (u, v, cov_a, cov_b, cov_c, col_r, col_g, col_b, opacity, background)
    dt = np.result_type(*(t.data.dtype for t in tensors))
    au, av, aa, ab, ac, acr, acg, acb, aop, abg = (
        np.ascontiguousarray(t.data, dtype=np.float64) for t in tensors)
    det = aa * ac - ab * ab
    bad = det <= 0.0
    if bad.any():  # cannot occur after the low-pass floor; drop defensively
        det = np.where(bad, 1.0, det)
        aop = np.where(bad, 0.0, aop)
    ia, ib, ic = ac / det, ab / det, aa / det
    radius = cutoff_radius(aa, ab, ac)
    offsets, lists, ntx, nty = _tile_bins(au, av, radius, height, width, TILE)
    out = _raster_forward(au, av, ia, ib, ic, acr, acg, acb, aop, radius,
                          abg, height, width, TILE, offsets, lists, ntx, nty)

    def vjp(g):
        grads = _raster_backward(au, av, aa, ab, ac, ia, ib, ic, acr, acg, acb, aop,
                                 radius, abg, np.ascontiguousarray(g, dtype=np.float64),
                                 height, width, TILE, offsets, lists, ntx, nty)
        return tuple(gr.astype(t.data.dtype) for gr, t in zip(grads, tensors))

    return ad._op(out.astype(dt), tensors, vjp)


# -- public rasterize / render ---------------------------------------------------


def _lift_field(value, shape) -> Tensor:
    t = value if isinstance(value, Tensor) else ad.tensor(np.asarray(value, dtype=ad.default_dtype()))
    return t.reshape(shape)


def rasterize(projected, height: int, width: int, background) -> RenderedImage:
    """Composite a list of Projected2DGaussians over a background color.

    Sorting by depth (stable: ties keep list order) happens here. Fields that
    are Tensors stay differentiable; an empty list yields the background with
    zero alpha.
    """
    bg = _lift_field(background, (3,))
    if len(projected) == 0:
        rgb = ad.mul(ad.tensor(np.ones((height, width, 3))), bg.reshape(1, 1, 3))
        return RenderedImage(rgb=rgb, alpha=ad.tensor(np.zeros((height, width))))
    u = ad.concat([_lift_field(p.center2d, (1, 2))[:, 0] for p in projected])
    v = ad.concat([_lift_field(p.center2d, (1, 2))[:, 1] for p in projected])
    cov = [_lift_field(p.cov2d, (1, 2, 2)) for p in projected]
    cov_a = ad.concat([c[:, 0, 0] for c in cov])
    cov_b = ad.concat([c[:, 0, 1] for c in cov])
    cov_c = ad.concat([c[:, 1, 1] for c in cov])
    col = [_lift_field(p.view_color, (1, 3)) for p in projected]
    col_r = ad.concat([c[:, 0] for c in col])
    col_g = ad.concat([c[:, 1] for c in col])
    col_b = ad.concat([c[:, 2] for c in col])
    opacity = ad.concat([_lift_field(p.opacity, (1,)) for p in projected])
    depth = np.array([float(np.asarray(p.depth if not isinstance(p.depth, Tensor)
                                       else p.depth.data).reshape(())) for p in projected])
    order = np.argsort(depth, kind="stable")
    perm = order
    out = _rasterize_batch(u[perm], v[perm], cov_a[perm], cov_b[perm], cov_c[perm],
                           col_r[perm], col_g[perm], col_b[perm], opacity[perm],
                           bg, depth[perm], height, width)
    return RenderedImage(rgb=out[:, :, 0:3], alpha=out[:, :, 3])


def render(gaussians: GaussianSet, cam: Camera, background) -> RenderedImage:
    """Project, cull, sort, and composite a full splat set for one camera."""
    bg = _lift_field(background, (3,))
    proj = project_gaussians(gaussians, cam)
    idx = np.nonzero(proj.valid)[0]
    if idx.size == 0:
        rgb = ad.mul(ad.tensor(np.ones((cam.height, cam.width, 3))), bg.reshape(1, 1, 3))
        return RenderedImage(rgb=rgb, alpha=ad.tensor(np.zeros((cam.height, cam.width))))
    perm = idx[np.argsort(proj.depth[idx], kind="stable")]
    out = _rasterize_batch(
        proj.u[perm], proj.v[perm], proj.cov_a[perm], proj.cov_b[perm], proj.cov_c[perm],
        proj.color_r[perm], proj.color_g[perm], proj.color_b[perm], proj.opacity[perm],
        bg, proj.depth[perm], cam.height, cam.width)
    return RenderedImage(rgb=out[:, :, 0:3], alpha=out[:, :, 3])


def render_arrays(gaussians: GaussianSet, cam: Camera, background) -> tuple:
    """Non-graph convenience: returns (rgb, alpha) numpy arrays."""
    with ad.no_grad():
        img = render(gaussians, cam, background)
    return img.rgb.data.copy(), img.alpha.data.copy()


# -- reference path ---------------------------------------------------------------


def rasterize_reference(u, v, cov_a, cov_b, cov_c, colors, opacity, depth,
                        background, height: int, width: int,
                        back_to_front: bool = False):
    """Plain-numpy per-pixel oracle with the same cutoff and sort rules.

    ``back_to_front=True`` composites in reverse order (C' = w c + (1-w) C'),
    which must agree with the front-to-back accumulation.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cov_a = np.asarray(cov_a, dtype=np.float64)
    cov_b = np.asarray(cov_b, dtype=np.float64)
    cov_c = np.asarray(cov_c, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    opacity = np.asarray(opacity, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    order = np.argsort(np.asarray(depth), kind="stable")
    if back_to_front:
        order = order[::-1]
    det = cov_a * cov_c - cov_b * cov_b
    radius = cutoff_radius(cov_a, cov_b, cov_c)

    if back_to_front:
        rgb = np.ones((height, width, 3)) * bg
        alpha = np.zeros((height, width))
    else:
        trans = np.ones((height, width))
        rgb = np.zeros((height, width, 3))
        alpha = np.zeros((height, width))

    ys, xs = np.mgrid[0:height, 0:width]
    for s in order:
        r = radius[s]
        x0 = max(0, int(np.floor(u[s] - r)))
        x1 = min(width - 1, int(np.ceil(u[s] + r)))
        y0 = max(0, int(np.floor(v[s] - r)))
        y1 = min(height - 1, int(np.ceil(v[s] + r)))
        if x0 > x1 or y0 > y1 or det[s] <= 0:
            continue
        dx = xs[y0:y1 + 1, x0:x1 + 1] - u[s]
        dy = ys[y0:y1 + 1, x0:x1 + 1] - v[s]
        inside = dx * dx + dy * dy <= r * r
        power = 0.5 * (cov_c[s] * dx * dx - 2.0 * cov_b[s] * dx * dy
                       + cov_a[s] * dy * dy) / det[s]
        w = np.where(inside & (power >= 0), opacity[s] * np.exp(-power), 0.0)
        if back_to_front:
            rgb[y0:y1 + 1, x0:x1 + 1] = (w[..., None] * colors[s]
                                         + (1.0 - w[..., None]) * rgb[y0:y1 + 1, x0:x1 + 1])
            alpha[y0:y1 + 1, x0:x1 + 1] = w + (1.0 - w) * alpha[y0:y1 + 1, x0:x1 + 1]
        else:
            tw = trans[y0:y1 + 1, x0:x1 + 1] * w
            rgb[y0:y1 + 1, x0:x1 + 1] += tw[..., None] * colors[s]
            alpha[y0:y1 + 1, x0:x1 + 1] += tw
            trans[y0:y1 + 1, x0:x1 + 1] *= 1.0 - w
    if not back_to_front:
        rgb += trans[..., None] * bg
    return rgb, alpha


def render_reference(gaussians: GaussianSet, cam: Camera, background,
                     back_to_front: bool = False):
    """Reference render sharing projection but not the tile rasterizer."""
    proj = project_gaussians(gaussians, cam)
    idx = np.nonzero(proj.valid)[0]
    colors = np.stack([proj.color_r.data[idx], proj.color_g.data[idx],
                       proj.color_b.data[idx]], axis=1)
    return rasterize_reference(
        proj.u.data[idx], proj.v.data[idx], proj.cov_a.data[idx], proj.cov_b.data[idx],
        proj.cov_c.data[idx], colors, proj.opacity.data[idx], proj.depth[idx],
        background, cam.height, cam.width, back_to_front=back_to_front)
