"""Forward and backward Gaussian splatting on the CPU.

Projection is vectorized with numpy. Rasterization runs per 16x16 tile in
numba kernels; a dense numpy path (:func:`render_naive`) evaluates every
splat at every pixel and serves as the reference for the tile path.

Pixel (u, v) has its center at image coordinate (u, v). Each splat's
footprint is the ellipse at Mahalanobis radius ``SPLAT_EXTENT_SIGMA``; inside
it the kernel is a Gaussian with a C1 taper to zero at the ellipse, rescaled
to peak 1. The taper keeps rendering differentiable across footprint
boundaries.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Union

import numba
import numpy as np

from .core import (
    Camera,
    GaussianSet,
    RasterGrid,
    Scene,
    as_array,
    background_array,
    quat_to_rotmat,
    normalize_quat,
    scene_union,
    sigmoid,
)
from .metrics import ssim_and_grad

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the bundled TBB is too old for numba; avoid the fallback warning
    numba.config.THREADING_LAYER = "workqueue"

NEAR_CLIP = 0.01
EPS_LOWPASS = 0.3
SPLAT_EXTENT_SIGMA = 3.0
TILE_SIZE = 16
T_MIN = 1e-4
ALPHA_MAX = 0.999
DEPTH_VALID_ALPHA = 1e-3

_S_CUT = SPLAT_EXTENT_SIGMA ** 2
_G_CUT = float(np.exp(-0.5 * _S_CUT))
_G_NORM = 1.0 - _G_CUT * (1.0 + 0.5 * _S_CUT)


def kernel_value(s):
    """Tapered Gaussian of squared Mahalanobis distance ``s`` (0 beyond the cut)."""
    s = np.asarray(s, dtype=np.float64)
    g = (np.exp(-0.5 * s) - _G_CUT + 0.5 * _G_CUT * (s - _S_CUT)) / _G_NORM
    return np.where(s <= _S_CUT, g, 0.0)


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    alpha: float
    color: np.ndarray
    source_index: int


@dataclass
class Projection:
    """Per-Gaussian projection results for a whole set (culled entries flagged)."""

    valid: np.ndarray  # (N,) bool
    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2), low-pass included
    conic: np.ndarray  # (N, 3): a, b, c of the inverse covariance
    depth: np.ndarray  # (N,)
    bbox: np.ndarray  # (N, 4) int: x0, x1, y0, y1 inclusive pixel range
    x_cam: np.ndarray
    J: np.ndarray  # (N, 2, 3)
    cov3d: np.ndarray


@dataclass
class RenderOutput:
    image: RasterGrid
    depth_map: RasterGrid
    alpha_map: RasterGrid

    @property
    def depth_valid(self) -> np.ndarray:
        return self.alpha_map.plane >= DEPTH_VALID_ALPHA


@dataclass
class Gradients:
    """Gradients for every Gaussian of the rendered union, in union order."""

    mu: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "Gradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3)))


def _gaussians(scene: Union[Scene, GaussianSet]) -> GaussianSet:
    return scene_union(scene) if isinstance(scene, Scene) else scene


def project_set(gs: GaussianSet, cam: Camera) -> Projection:
    n = len(gs)
    K, W = cam.K, cam.R
    x_cam = gs.mu @ W.T + cam.t
    x, y, z = x_cam[:, 0], x_cam[:, 1], x_cam[:, 2]
    front = z > NEAR_CLIP
    zs = np.where(front, z, 1.0)
    u = (K[0, 0] * x + K[0, 1] * y) / zs + K[0, 2]
    v = K[1, 1] * y / zs + K[1, 2]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = K[0, 0] / zs
    J[:, 0, 1] = K[0, 1] / zs
    J[:, 0, 2] = -(K[0, 0] * x + K[0, 1] * y) / zs ** 2
    J[:, 1, 1] = K[1, 1] / zs
    J[:, 1, 2] = -K[1, 1] * y / zs ** 2
    cov3d = gs.covariances()
    T = J @ W
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += EPS_LOWPASS
    cov2d[:, 1, 1] += EPS_LOWPASS
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    ex = SPLAT_EXTENT_SIGMA * np.sqrt(cov2d[:, 0, 0])
    ey = SPLAT_EXTENT_SIGMA * np.sqrt(cov2d[:, 1, 1])
    x0 = np.maximum(np.ceil(u - ex), 0)
    x1 = np.minimum(np.floor(u + ex), cam.width - 1)
    y0 = np.maximum(np.ceil(v - ey), 0)
    y1 = np.minimum(np.floor(v + ey), cam.height - 1)
    valid = front & (x0 <= x1) & (y0 <= y1) & (det > 0)
    bbox = np.stack([x0, x1, y0, y1], axis=1)
    bbox = np.where(valid[:, None], bbox, 0).astype(np.int64)
    return Projection(
        valid=valid,
        mean2d=np.stack([u, v], axis=1),
        cov2d=cov2d,
        conic=conic,
        depth=z,
        bbox=bbox,
        x_cam=x_cam,
        J=J,
        cov3d=cov3d,
    )


def project(g, cam: Camera, alpha: Optional[float] = None, source_index: int = 0) -> Optional[ProjectedGaussian]:
    """Project one Gaussian; ``None`` when it is culled."""
    gs = GaussianSet.from_gaussians([g])
    p = project_set(gs, cam)
    if not p.valid[0]:
        return None
    return ProjectedGaussian(
        mean2d=p.mean2d[0],
        cov2d=p.cov2d[0],
        depth=float(p.depth[0]),
        alpha=float(sigmoid(g.opacity_logit) if alpha is None else alpha),
        color=np.asarray(g.color, dtype=np.float64).copy(),
        source_index=source_index,
    )


def depth_order(proj: Projection) -> np.ndarray:
    """Indices of valid splats, front to back, ties broken by source index."""
    idx = np.flatnonzero(proj.valid)
    order = np.lexsort((idx, proj.depth[idx]))
    return idx[order]


def _alphas(gs: GaussianSet, alphas) -> np.ndarray:
    a = gs.opacity if alphas is None else np.asarray(alphas, dtype=np.float64)
    return np.minimum(a, ALPHA_MAX)


class _Prepared:
    """Sorted splat arrays and tile bins for one (scene, camera) pair."""

    def __init__(self, gs: GaussianSet, cam: Camera, alphas, background):
        self.gs = gs
        self.cam = cam
        self.proj = project_set(gs, cam)
        self.order = depth_order(self.proj)
        self.alpha_all = _alphas(gs, alphas)
        o = self.order
        p = self.proj
        self.mean = np.ascontiguousarray(p.mean2d[o])
        self.conic = np.ascontiguousarray(p.conic[o])
        self.alpha = np.ascontiguousarray(self.alpha_all[o])
        self.color = np.ascontiguousarray(gs.color[o])
        self.depth = np.ascontiguousarray(p.depth[o])
        self.bbox = np.ascontiguousarray(p.bbox[o])
        self.bg = background_array(background)
        self.tiles_x = (cam.width + TILE_SIZE - 1) // TILE_SIZE
        self.tiles_y = (cam.height + TILE_SIZE - 1) // TILE_SIZE
        self.tile_ptr, self.tile_idx = _bin_tiles(self.bbox, self.tiles_x, self.tiles_y)


def _bin_tiles(bbox: np.ndarray, tiles_x: int, tiles_y: int):
    """CSR lists of sorted-splat ranks per tile, each list in depth order."""
    n_tiles = tiles_x * tiles_y
    if len(bbox) == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    tx0, tx1 = bbox[:, 0] // TILE_SIZE, bbox[:, 1] // TILE_SIZE
    ty0, ty1 = bbox[:, 2] // TILE_SIZE, bbox[:, 3] // TILE_SIZE
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = nx * ny
    rank = np.repeat(np.arange(len(bbox)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    nxr = np.repeat(nx, counts)
    tile = (np.repeat(ty0, counts) + local // nxr) * tiles_x + np.repeat(tx0, counts) + local % nxr
    order = np.lexsort((rank, tile))
    tile_idx = rank[order].astype(np.int64)
    ptr = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile, minlength=n_tiles), out=ptr[1:])
    return ptr, tile_idx


@numba.njit(cache=True, inline="always")
def _kernel(s):
    return (np.exp(-0.5 * s) - _G_CUT + 0.5 * _G_CUT * (s - _S_CUT)) / _G_NORM


@numba.njit(cache=True, inline="always")
def _kernel_ds(s):
    return 0.5 * (_G_CUT - np.exp(-0.5 * s)) / _G_NORM


@numba.njit(cache=True, parallel=True)
def _forward_tiles(width, height, tiles_x, n_tiles, tile_ptr, tile_idx,
                   mean, conic, alpha, color, depth, bbox, bg,
                   image, depth_acc, t_final, n_used):
    for tile in numba.prange(n_tiles):
        tx = tile % tiles_x
        ty = tile // tiles_x
        start = tile_ptr[tile]
        stop = tile_ptr[tile + 1]
        for py in range(ty * 16, min((ty + 1) * 16, height)):
            for px in range(tx * 16, min((tx + 1) * 16, width)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                d = 0.0
                last = start
                for k in range(start, stop):
                    i = tile_idx[k]
                    if px < bbox[i, 0] or px > bbox[i, 1] or py < bbox[i, 2] or py > bbox[i, 3]:
                        continue
                    dx = px - mean[i, 0]
                    dy = py - mean[i, 1]
                    s = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                    if s > _S_CUT:
                        continue
                    a = alpha[i] * _kernel(s)
                    w = a * T
                    c0 += w * color[i, 0]
                    c1 += w * color[i, 1]
                    c2 += w * color[i, 2]
                    d += w * depth[i]
                    T = T * (1.0 - a)
                    last = k + 1
                    if T < 1e-4:
                        break
                image[py, px, 0] = c0 + T * bg[0]
                image[py, px, 1] = c1 + T * bg[1]
                image[py, px, 2] = c2 + T * bg[2]
                depth_acc[py, px] = d
                t_final[py, px] = T
                n_used[py, px] = last


@numba.njit(cache=True, parallel=True)
def _backward_tiles(width, height, tiles_x, n_tiles, tile_ptr, tile_idx,
                    mean, conic, alpha, color, bbox, bg, t_final, n_used, dl_dimg, out):
    # out: (n_tiles, n_splats, 9) = d mean(2), d conic(3: a, b, c), d alpha, d color(3)
    for tile in numba.prange(n_tiles):
        tx = tile % tiles_x
        ty = tile // tiles_x
        start = tile_ptr[tile]
        for py in range(ty * 16, min((ty + 1) * 16, height)):
            for px in range(tx * 16, min((tx + 1) * 16, width)):
                g0 = dl_dimg[py, px, 0]
                g1 = dl_dimg[py, px, 1]
                g2 = dl_dimg[py, px, 2]
                T = t_final[py, px]
                # color accumulated behind the current splat
                s0 = T * bg[0]
                s1 = T * bg[1]
                s2 = T * bg[2]
                for k in range(n_used[py, px] - 1, start - 1, -1):
                    i = tile_idx[k]
                    if px < bbox[i, 0] or px > bbox[i, 1] or py < bbox[i, 2] or py > bbox[i, 3]:
                        continue
                    dx = px - mean[i, 0]
                    dy = py - mean[i, 1]
                    s = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                    if s > _S_CUT:
                        continue
                    G = _kernel(s)
                    a = alpha[i] * G
                    one_m = 1.0 - a
                    T_before = T / one_m
                    w = a * T_before
                    out[tile, i, 6] += w * g0
                    out[tile, i, 7] += w * g1
                    out[tile, i, 8] += w * g2
                    dl_da = (g0 * (color[i, 0] * T_before - s0 / one_m)
                             + g1 * (color[i, 1] * T_before - s1 / one_m)
                             + g2 * (color[i, 2] * T_before - s2 / one_m))
                    out[tile, i, 5] += dl_da * G
                    dl_ds = dl_da * alpha[i] * _kernel_ds(s)
                    out[tile, i, 0] += -dl_ds * (2.0 * conic[i, 0] * dx + 2.0 * conic[i, 1] * dy)
                    out[tile, i, 1] += -dl_ds * (2.0 * conic[i, 1] * dx + 2.0 * conic[i, 2] * dy)
                    out[tile, i, 2] += dl_ds * dx * dx
                    out[tile, i, 3] += dl_ds * 2.0 * dx * dy
                    out[tile, i, 4] += dl_ds * dy * dy
                    s0 += w * color[i, 0]
                    s1 += w * color[i, 1]
                    s2 += w * color[i, 2]
                    T = T_before


def _output(prep: _Prepared, image, depth_acc, t_final) -> RenderOutput:
    acc = 1.0 - t_final
    valid = acc >= DEPTH_VALID_ALPHA
    depth = np.where(valid, depth_acc / np.where(valid, acc, 1.0), 0.0)
    return RenderOutput(
        # unchecked so a non-finite render reaches the trainer's abort path
        image=RasterGrid(image, check_finite=False),
        depth_map=RasterGrid(depth, check_finite=False),
        alpha_map=RasterGrid(acc, check_finite=False),
    )


def _forward(prep: _Prepared):
    h, w = prep.cam.height, prep.cam.width
    image = np.zeros((h, w, 3))
    depth_acc = np.zeros((h, w))
    t_final = np.ones((h, w))
    n_used = np.zeros((h, w), dtype=np.int64)
    _forward_tiles(w, h, prep.tiles_x, prep.tiles_x * prep.tiles_y, prep.tile_ptr, prep.tile_idx,
                   prep.mean, prep.conic, prep.alpha, prep.color, prep.depth, prep.bbox, prep.bg,
                   image, depth_acc, t_final, n_used)
    return image, depth_acc, t_final, n_used


def render(scene, cam: Camera, alphas=None, background=None) -> RenderOutput:
    """Tile-based splatting of ``scene`` (a Scene or GaussianSet) through ``cam``.

    ``alphas`` overrides per-Gaussian opacity in union order (used for
    protected opacities); ``background`` is an RGB triple, default black.
    """
    prep = _Prepared(_gaussians(scene), cam, alphas, background)
    image, depth_acc, t_final, _ = _forward(prep)
    return _output(prep, image, depth_acc, t_final)


def render_naive(scene, cam: Camera, alphas=None, background=None) -> RenderOutput:
    """Reference renderer: every sorted splat evaluated at every pixel, no tiling."""
    gs = _gaussians(scene)
    proj = project_set(gs, cam)
    order = depth_order(proj)
    alpha = _alphas(gs, alphas)[order]
    bg = background_array(background)
    h, w = cam.height, cam.width
    py, px = np.mgrid[0:h, 0:w]
    px = px.reshape(-1, 1).astype(np.float64)
    py = py.reshape(-1, 1).astype(np.float64)
    m = proj.mean2d[order]
    q = proj.conic[order]
    b = proj.bbox[order]
    dx = px - m[:, 0]
    dy = py - m[:, 1]
    s = q[:, 0] * dx * dx + 2.0 * q[:, 1] * dx * dy + q[:, 2] * dy * dy
    inside = (px >= b[:, 0]) & (px <= b[:, 1]) & (py >= b[:, 2]) & (py <= b[:, 3]) & (s <= _S_CUT)
    a = np.where(inside, alpha * kernel_value(np.where(inside, s, 0.0)), 0.0)
    n_pix = h * w
    T_before = np.ones((n_pix, len(order)))
    T = np.ones(n_pix)
    for k in range(len(order)):
        T_before[:, k] = T
        T = T * (1.0 - a[:, k])
    used = T_before >= T_MIN
    wgt = np.where(used, a * T_before, 0.0)
    t_final = np.where(used, T_before * (1.0 - a), 1.0).min(axis=1) if len(order) else T
    image = wgt @ gs.color[order] + t_final[:, None] * bg
    depth_acc = wgt @ proj.depth[order]
    acc = 1.0 - t_final
    valid = acc >= DEPTH_VALID_ALPHA
    depth = np.where(valid, depth_acc / np.where(valid, acc, 1.0), 0.0)
    return RenderOutput(
        image=RasterGrid(image.reshape(h, w, 3)),
        depth_map=RasterGrid(depth.reshape(h, w)),
        alpha_map=RasterGrid(acc.reshape(h, w)),
    )


def _quat_rotmat_jacobian(q: np.ndarray) -> np.ndarray:
    """d R / d q for normalized quaternions, shape (N, 4, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    n = len(q)
    D = np.zeros((n, 4, 3, 3))
    # w
    D[:, 0, 0, 1], D[:, 0, 0, 2] = -2 * z, 2 * y
    D[:, 0, 1, 0], D[:, 0, 1, 2] = 2 * z, -2 * x
    D[:, 0, 2, 0], D[:, 0, 2, 1] = -2 * y, 2 * x
    # x
    D[:, 1, 0, 1], D[:, 1, 0, 2] = 2 * y, 2 * z
    D[:, 1, 1, 0], D[:, 1, 1, 1], D[:, 1, 1, 2] = 2 * y, -4 * x, -2 * w
    D[:, 1, 2, 0], D[:, 1, 2, 1], D[:, 1, 2, 2] = 2 * z, 2 * w, -4 * x
    # y
    D[:, 2, 0, 0], D[:, 2, 0, 1], D[:, 2, 0, 2] = -4 * y, 2 * x, 2 * w
    D[:, 2, 1, 0], D[:, 2, 1, 2] = 2 * x, 2 * z
    D[:, 2, 2, 0], D[:, 2, 2, 1], D[:, 2, 2, 2] = -2 * w, 2 * z, -4 * y
    # z
    D[:, 3, 0, 0], D[:, 3, 0, 1], D[:, 3, 0, 2] = -4 * z, -2 * w, 2 * x
    D[:, 3, 1, 0], D[:, 3, 1, 1], D[:, 3, 1, 2] = 2 * w, -4 * z, 2 * y
    D[:, 3, 2, 0], D[:, 3, 2, 1] = 2 * x, 2 * y
    return D


def render_backward(scene, cam: Camera, dl_dimage, alphas=None, background=None):
    """Gradients of a scalar loss w.r.t. every Gaussian parameter.

    ``dl_dimage`` is dL/d(rendered image), shape (H, W, 3). The opacity
    gradient is taken through ``alphas`` when given; where an override
    differs from sigmoid(opacity_logit) (a protection floor) the logit
    gradient is zero. Culled Gaussians receive zero gradients.
    """
    gs = _gaussians(scene)
    prep = _Prepared(gs, cam, alphas, background)
    fwd = _forward(prep)
    return _backward(prep, fwd, dl_dimage)


def render_loss_and_grad(scene, cam: Camera, gt, lambda_ssim: float, alphas=None, background=None):
    """One forward pass, the training loss against ``gt``, and all gradients.

    Returns (RenderOutput, loss value, Gradients).
    """
    gs = _gaussians(scene)
    prep = _Prepared(gs, cam, alphas, background)
    fwd = _forward(prep)
    out = _output(prep, fwd[0], fwd[1], fwd[2])
    value, dl = loss(out.image, gt, lambda_ssim)
    return out, value, _backward(prep, fwd, dl)


def _backward(prep: _Prepared, fwd, dl_dimage) -> Gradients:
    gs, cam = prep.gs, prep.cam
    image, depth_acc, t_final, n_used = fwd
    dl = np.ascontiguousarray(as_array(dl_dimage), dtype=np.float64)
    if dl.shape != (cam.height, cam.width, 3):
        raise ValueError(f"gradient shape {dl.shape} does not match camera {(cam.height, cam.width, 3)}")
    n = len(gs)
    grads = Gradients.zeros(n)
    n_sorted = len(prep.order)
    if n_sorted == 0:
        return grads
    n_tiles = prep.tiles_x * prep.tiles_y
    buf = np.zeros((n_tiles, n_sorted, 9))
    _backward_tiles(cam.width, cam.height, prep.tiles_x, n_tiles, prep.tile_ptr, prep.tile_idx,
                    prep.mean, prep.conic, prep.alpha, prep.color, prep.bbox, prep.bg,
                    t_final, n_used, dl, buf)
    # fixed-order reduction over tiles
    acc = np.zeros((n_sorted, 9))
    for t in range(n_tiles):
        acc += buf[t]
    o = prep.order
    p = prep.proj

    grads.color[o] = acc[:, 6:9]

    raw = sigmoid(gs.opacity_logit[o])
    eff = prep.alpha_all[o]
    passthrough = (eff == np.minimum(raw, ALPHA_MAX)) & (raw < ALPHA_MAX)
    grads.opacity_logit[o] = np.where(passthrough, acc[:, 5] * raw * (1.0 - raw), 0.0)

    # conic -> 2D covariance
    qa, qb, qc = p.conic[o, 0], p.conic[o, 1], p.conic[o, 2]
    Q = np.empty((n_sorted, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = qa, qb, qb, qc
    dQ = np.empty((n_sorted, 2, 2))
    dQ[:, 0, 0] = acc[:, 2]
    dQ[:, 0, 1] = dQ[:, 1, 0] = 0.5 * acc[:, 3]
    dQ[:, 1, 1] = acc[:, 4]
    dcov2 = -Q @ dQ @ Q

    # 2D covariance -> 3D covariance and projection Jacobian
    W = cam.R
    J = p.J[o]
    Tm = J @ W
    S3 = p.cov3d[o]
    dS3 = np.swapaxes(Tm, 1, 2) @ dcov2 @ Tm
    dT = 2.0 * dcov2 @ Tm @ S3
    dJ = dT @ W.T

    K = cam.K
    xc = p.x_cam[o]
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    z2, z3 = z * z, z * z * z
    du, dv = acc[:, 0], acc[:, 1]
    dxc = np.zeros((n_sorted, 3))
    dxc[:, 0] = du * K[0, 0] / z
    dxc[:, 1] = du * K[0, 1] / z + dv * K[1, 1] / z
    dxc[:, 2] = -du * (K[0, 0] * x + K[0, 1] * y) / z2 - dv * K[1, 1] * y / z2
    dxc[:, 0] += dJ[:, 0, 2] * (-K[0, 0] / z2)
    dxc[:, 1] += dJ[:, 0, 2] * (-K[0, 1] / z2) + dJ[:, 1, 2] * (-K[1, 1] / z2)
    dxc[:, 2] += (dJ[:, 0, 0] * (-K[0, 0] / z2) + dJ[:, 0, 1] * (-K[0, 1] / z2)
                  + dJ[:, 0, 2] * (2.0 * (K[0, 0] * x + K[0, 1] * y) / z3)
                  + dJ[:, 1, 1] * (-K[1, 1] / z2) + dJ[:, 1, 2] * (2.0 * K[1, 1] * y / z3))
    grads.mu[o] = dxc @ W

    # 3D covariance -> scale and rotation factors
    qraw = gs.rotation[o]
    qn = normalize_quat(qraw)
    Rq = quat_to_rotmat(qn)
    sc = gs.scale[o]
    M = Rq * sc[:, None, :]
    dM = (dS3 + np.swapaxes(dS3, 1, 2)) @ M
    grads.scale[o] = np.einsum("nij,nij->nj", dM, Rq)
    dR = dM * sc[:, None, :]
    dqn = np.einsum("nkij,nij->nk", _quat_rotmat_jacobian(qn), dR)
    norm = np.linalg.norm(qraw, axis=1, keepdims=True)
    grads.rotation[o] = (dqn - qn * np.sum(qn * dqn, axis=1, keepdims=True)) / norm
    return grads


def loss(rendered, gt, lambda_ssim: float):
    """(1 - lambda) L1 + lambda (1 - SSIM); returns (value, dL/d rendered)."""
    x, y = as_array(rendered), as_array(gt)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: rendered {x.shape} vs ground truth {y.shape}")
    if not 0.0 <= lambda_ssim <= 1.0:
        raise ValueError("lambda_ssim must lie in [0, 1]")
    diff = x - y
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    value = (1.0 - lambda_ssim) * l1
    if lambda_ssim > 0.0:
        s, ds = ssim_and_grad(x, y)
        value += lambda_ssim * (1.0 - s)
        grad = grad - lambda_ssim * ds.reshape(grad.shape)
    return value, grad
