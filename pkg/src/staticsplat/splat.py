"""Differentiable Gaussian splatting with staticness-weighted alpha blending.

In ``"staticness"`` mode every sample's opacity is multiplied by the Gaussian's
staticness ``s``, both in its own blending weight and in the transmittance it
leaves for the samples behind it. ``"plain"`` mode is ordinary front-to-back
alpha compositing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from scipy.special import expit, logit

from . import _raster
from .geometry import NEAR_PLANE, Intrinsics, Pose, quat_to_rotmat, rotmat_grad_to_quat

Mode = Literal["plain", "staticness"]

COV2D_DILATION = 0.3
SIGMA_EXTENT = 3.0
STATICNESS_EPS = 1e-4

PARAM_NAMES = ("mu", "log_scale", "rotation", "color", "opacity_logit", "staticness_logit")


@dataclass
class GaussianCloud:
    mu: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity_logit: np.ndarray
    staticness_logit: np.ndarray
    source_frame: np.ndarray | None = None
    source_pixel: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.mu)
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(n, 3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(n, 3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(n, 4)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(n, 3)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)
        self.staticness_logit = np.asarray(self.staticness_logit, dtype=np.float64).reshape(n)
        if self.source_frame is None:
            self.source_frame = np.full(n, -1, dtype=np.int64)
        if self.source_pixel is None:
            self.source_pixel = np.full(n, -1, dtype=np.int64)
        self.source_frame = np.asarray(self.source_frame, dtype=np.int64).reshape(n)
        self.source_pixel = np.asarray(self.source_pixel, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return len(self.mu)

    @property
    def opacity(self) -> np.ndarray:
        return expit(self.opacity_logit)

    @property
    def staticness(self) -> np.ndarray:
        return expit(self.staticness_logit)

    def copy(self) -> "GaussianCloud":
        return replace(self, **{k: getattr(self, k).copy() for k in PARAM_NAMES + ("source_frame", "source_pixel")})

    def subset(self, keep: np.ndarray) -> "GaussianCloud":
        return GaussianCloud(**{k: getattr(self, k)[keep] for k in PARAM_NAMES + ("source_frame", "source_pixel")})

    def covariance(self) -> np.ndarray:
        """World-space 3x3 covariances ``R S S R^T``."""
        M = quat_to_rotmat(self.rotation) * np.exp(self.log_scale)[:, None, :]
        return M @ np.swapaxes(M, 1, 2)


def staticness_to_logit(s: np.ndarray, eps: float = STATICNESS_EPS) -> np.ndarray:
    """Logit of a staticness value kept inside ``[eps, 1 - eps]`` so gradients stay finite."""
    return logit(np.clip(np.asarray(s, dtype=np.float64), eps, 1.0 - eps))


@dataclass
class RenderedImage:
    image: np.ndarray  # (H, W, 3)
    transmittance: np.ndarray  # (H, W)


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities for the Gaussians that survived culling."""

    index: np.ndarray  # indices into the cloud
    xc: np.ndarray  # camera-space means
    means2d: np.ndarray
    cov2d: np.ndarray  # regularized, (K, 2, 2)
    conics: np.ndarray  # (K, 3): inverse covariance entries a, b, c
    J: np.ndarray
    cov_cam: np.ndarray
    cov_world: np.ndarray

    @property
    def depth(self) -> np.ndarray:
        return self.xc[:, 2]


def project_cloud(cloud: GaussianCloud, pose: Pose, intr: Intrinsics, cov_world: np.ndarray | None = None) -> Projection:
    """EWA perspective projection of every Gaussian in front of the near plane."""
    Rc = pose.R
    xc_all = (cloud.mu - pose.t) @ Rc
    idx = np.nonzero(xc_all[:, 2] > NEAR_PLANE)[0]
    xc = xc_all[idx]
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    means2d = np.stack([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy], axis=1)
    if cov_world is None:
        cov_world = cloud.subset(idx).covariance() if len(idx) < len(cloud) else cloud.covariance()
    else:
        cov_world = cov_world[idx]
    K = len(idx)
    cov_cam = np.empty((K, 3, 3))
    J = np.empty((K, 2, 3))
    cov2d = np.empty((K, 2, 2))
    conics = np.empty((K, 3))
    _raster.project(xc, np.ascontiguousarray(cov_world), Rc, intr.fx, intr.fy, COV2D_DILATION, cov_cam, J, cov2d, conics)
    return Projection(idx, xc, means2d, cov2d, conics, J, cov_cam, cov_world)


def project_gaussian(cloud: GaussianCloud, i: int, pose: Pose, intr: Intrinsics):
    """Screen-space mean, 2x2 covariance and depth of Gaussian ``i``; ``None`` when culled."""
    proj = project_cloud(cloud.subset(np.array([i])), pose, intr)
    if len(proj.index) == 0:
        return None
    return proj.means2d[0], proj.cov2d[0], float(proj.xc[0, 2])


@dataclass
class RenderContext:
    """Everything the backward pass needs from a forward pass."""

    cloud: GaussianCloud
    pose: Pose
    intr: Intrinsics
    mode: str
    proj: Projection
    order: np.ndarray  # depth rank -> projection row, front to back
    offsets: np.ndarray
    start: np.ndarray
    pos: np.ndarray  # emitted fragment -> pixel-sorted position
    sorted_row: np.ndarray
    frag_T: np.ndarray
    frag_G: np.ndarray
    count: np.ndarray
    opac: np.ndarray
    stat: np.ndarray
    result: RenderedImage = field(repr=False)


def _check_mode(mode: str) -> None:
    if mode not in ("plain", "staticness"):
        raise ValueError(f"unknown render mode {mode!r}")


def _depth_order(cloud: GaussianCloud, proj: Projection, rows: np.ndarray) -> np.ndarray:
    """Projection rows front to back.

    Exact depth ties are broken by the Gaussians' parameters and only then by
    cloud index, so the image does not depend on how the cloud is stored.
    """
    depth = proj.depth[rows]
    order = rows[np.lexsort((proj.index[rows], depth))]
    sd = proj.depth[order]
    tied = np.nonzero(sd[1:] == sd[:-1])[0]
    if len(tied) == 0:
        return order
    idx = proj.index
    starts = np.unique(tied[np.r_[True, tied[1:] != tied[:-1] + 1]])
    for a in starts:
        b = a + 1
        while b + 1 < len(sd) and sd[b + 1] == sd[a]:
            b += 1
        run = order[a:b + 1]
        gi = idx[run]
        content = np.column_stack([cloud.mu[gi], cloud.log_scale[gi], cloud.rotation[gi], cloud.color[gi],
                                   cloud.opacity_logit[gi], cloud.staticness_logit[gi]])
        order[a:b + 1] = run[np.lexsort(content.T[::-1])]
    return order


def render_forward(cloud: GaussianCloud, pose: Pose, intr: Intrinsics, mode: Mode = "staticness",
                   cov_world: np.ndarray | None = None) -> RenderContext:
    _check_mode(mode)
    if len(cloud) == 0:
        raise ValueError("cannot render an empty cloud")
    H, W = intr.height, intr.width
    proj = project_cloud(cloud, pose, intr, cov_world)

    rx = SIGMA_EXTENT * np.sqrt(proj.cov2d[:, 0, 0])
    ry = SIGMA_EXTENT * np.sqrt(proj.cov2d[:, 1, 1])
    x0 = np.maximum(np.ceil(proj.means2d[:, 0] - rx), 0)
    x1 = np.minimum(np.floor(proj.means2d[:, 0] + rx), W - 1)
    y0 = np.maximum(np.ceil(proj.means2d[:, 1] - ry), 0)
    y1 = np.minimum(np.floor(proj.means2d[:, 1] + ry), H - 1)
    onscreen = np.nonzero((x1 >= x0) & (y1 >= y0))[0]
    order = _depth_order(cloud, proj, onscreen)

    x0o, x1o = x0[order].astype(np.int64), x1[order].astype(np.int64)
    y0o, y1o = y0[order].astype(np.int64), y1[order].astype(np.int64)
    counts = (x1o - x0o + 1) * (y1o - y0o + 1)
    offsets = np.zeros(len(order) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    nfrag = int(offsets[-1])
    frag_rank = np.empty(nfrag, dtype=np.int64)
    frag_pix = np.empty(nfrag, dtype=np.int64)
    _raster.emit_fragments(x0o, x1o, y0o, y1o, offsets, W, frag_rank, frag_pix)
    start, pos, sorted_row = _raster.sort_by_pixel(frag_pix, frag_rank, order, H * W)

    # per-Gaussian arrays stay in projection-row order so per-Gaussian passes stream through memory
    opac = expit(cloud.opacity_logit[proj.index])
    stat = expit(cloud.staticness_logit[proj.index]) if mode == "staticness" else np.ones(len(proj.index))
    colors = np.ascontiguousarray(cloud.color[proj.index])
    image = np.empty((H, W, 3))
    trans = np.empty((H, W))
    count = np.empty(H * W, dtype=np.int64)
    frag_T = np.empty(nfrag)
    frag_G = np.empty(nfrag)
    _raster.forward(start, sorted_row, W, proj.means2d, proj.conics, opac, stat, colors,
                    image, trans, count, frag_T, frag_G)
    return RenderContext(cloud, pose, intr, mode, proj, order, offsets, start, pos, sorted_row,
                         frag_T, frag_G, count, opac, stat, RenderedImage(image, trans))


def render(cloud: GaussianCloud, pose: Pose, intr: Intrinsics, mode: Mode = "staticness") -> RenderedImage:
    """Render ``cloud`` from camera ``pose``; uncovered pixels stay black."""
    return render_forward(cloud, pose, intr, mode).result


@dataclass
class CloudGrads:
    mu: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity_logit: np.ndarray
    staticness_logit: np.ndarray
    pose_q: np.ndarray
    pose_t: np.ndarray


def render_backward(ctx: RenderContext, grad_image: np.ndarray, grad_trans: np.ndarray | None = None,
                    geometry_grads: bool = True) -> CloudGrads:
    """Exact gradients of the forward pass in ``ctx`` given upstream pixel gradients.

    With ``geometry_grads=False`` the ``log_scale`` and ``rotation`` gradients are
    skipped (returned as zeros), which is cheaper when those are frozen.
    """
    cloud, pose, intr, proj = ctx.cloud, ctx.pose, ctx.intr, ctx.proj
    H, W = intr.height, intr.width
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64).reshape(H, W, 3)
    grad_trans = np.zeros((H, W)) if grad_trans is None else np.ascontiguousarray(grad_trans, dtype=np.float64)

    idx = proj.index
    colors = np.ascontiguousarray(cloud.color[idx])
    frag_grad = np.empty((len(ctx.sorted_row), _raster.NGRAD))
    _raster.backward(ctx.start, ctx.sorted_row, W, proj.means2d, proj.conics, ctx.opac, ctx.stat, colors,
                     ctx.result.transmittance, ctx.count, ctx.frag_T, ctx.frag_G, grad_image, grad_trans,
                     frag_grad)
    K = len(idx)
    per_row = np.zeros((K, _raster.NGRAD))
    _raster.reduce_per_row(ctx.offsets, ctx.pos, ctx.order, frag_grad, per_row)

    n = len(cloud)
    out = CloudGrads(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                     np.zeros(n), np.zeros(n), np.zeros(4), np.zeros(3))
    out.color[idx] = per_row[:, 0:3]
    out.opacity_logit[idx] = per_row[:, 8] * ctx.opac * (1 - ctx.opac)
    if ctx.mode == "staticness":
        out.staticness_logit[idx] = per_row[:, 9] * ctx.stat * (1 - ctx.stat)

    # screen space -> world space
    g_mu = np.empty((K, 3))
    g_cov = np.empty((K, 3, 3))
    g_Rc = np.empty((K, 3, 3))
    Rc = pose.R
    _raster.backward_screen(proj.xc, proj.J, proj.cov_cam, proj.cov2d, proj.cov_world, Rc, per_row,
                            intr.fx, intr.fy, g_mu, g_cov, g_Rc, np.empty((K, 9, 3)))
    out.mu[idx] = g_mu
    out.pose_t = -g_mu.sum(axis=0)
    out.pose_q = rotmat_grad_to_quat(pose.q, g_Rc.sum(axis=0))

    if geometry_grads:
        Rg = quat_to_rotmat(cloud.rotation[idx])
        scale = np.exp(cloud.log_scale[idx])
        M = Rg * scale[:, None, :]
        g_M = 2.0 * g_cov @ M
        out.rotation[idx] = rotmat_grad_to_quat(cloud.rotation[idx], g_M * scale[:, None, :])
        out.log_scale[idx] = np.sum(g_M * Rg, axis=1) * scale
    return out
