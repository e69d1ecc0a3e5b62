"""Per-view importance maps: photometric residual, semantic prior, geometric prior.

Each component map is min-max normalized per view before fusion; constant
maps normalize to zero.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import RasterGrid, as_array

log = logging.getLogger(__name__)

N_CLASSES = 21


@dataclass
class PriorInputs:
    """Ingested priors for one view. ``depth`` may be None (no geometry prior)."""

    depth: Optional[RasterGrid]
    labels: Optional[RasterGrid]
    background_class: int = 0

    def __post_init__(self):
        if self.labels is not None:
            lab = self.labels.plane
            if np.any(lab != np.round(lab)):
                raise ValueError("label map must contain integer class ids")
            if lab.min() < 0 or lab.max() > N_CLASSES - 1:
                raise ValueError(f"label ids must lie in [0, {N_CLASSES - 1}], got [{lab.min():g}, {lab.max():g}]")


@dataclass
class ScoreMaps:
    s_render: RasterGrid
    s_semantic: RasterGrid
    s_geometry: RasterGrid
    s_importance: RasterGrid
    m_reliable: RasterGrid

    def items(self):
        return [
            ("s_render", self.s_render),
            ("s_semantic", self.s_semantic),
            ("s_geometry", self.s_geometry),
            ("s_importance", self.s_importance),
            ("m_reliable", self.m_reliable),
        ]


def minmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 0.0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def render_residual(gt, rendered) -> RasterGrid:
    """Per-pixel Euclidean norm of the RGB difference."""
    a, b = as_array(gt), as_array(rendered)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError("render_residual expects 3-channel images")
    return RasterGrid(np.sqrt(np.sum((a - b) ** 2, axis=2)))


def boundary_mask(labels: np.ndarray, r_boundary: int = 2) -> np.ndarray:
    """True where a different label lies within Chebyshev distance ``r_boundary``."""
    size = 2 * r_boundary + 1
    hi = ndimage.maximum_filter(labels, size=size, mode="nearest")
    lo = ndimage.minimum_filter(labels, size=size, mode="nearest")
    return hi != lo


def semantic_score_raw(inputs: PriorInputs, r_boundary: int = 2, base_bg: float = 0.1) -> np.ndarray:
    lab = inputs.labels.plane
    fg = lab != inputs.background_class
    base = np.where(fg, 1.0, base_bg)
    w_boundary = boundary_mask(lab, r_boundary).astype(np.float64)
    w_foreground = fg.astype(np.float64)
    return base * (w_boundary + w_foreground)


def semantic_score(inputs: PriorInputs, r_boundary: int = 2, base_bg: float = 0.1) -> RasterGrid:
    """Label-map semantic prior boosted on object boundaries and foreground, normalized."""
    if inputs.labels is None:
        raise ValueError("semantic_score needs a label map")
    return RasterGrid(minmax(semantic_score_raw(inputs, r_boundary, base_bg)))


def _fill_invalid(depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    if valid.all() or not valid.any():
        return depth
    _, (iy, ix) = ndimage.distance_transform_edt(~valid, return_indices=True)
    return depth[iy, ix]


def geometry_score_raw(depth: np.ndarray, lambda_curv: float) -> np.ndarray:
    d = np.asarray(depth, dtype=np.float64)
    valid = d > 0
    if not valid.any():
        return np.zeros_like(d)
    # invalid pixels take the nearest valid depth so the stencils do not see the sentinel
    d = _fill_invalid(d, valid)
    gy, gx = np.gradient(d)
    grad = np.hypot(gx, gy)
    kappa = np.abs(ndimage.laplace(d, mode="nearest"))
    return np.where(valid, grad + lambda_curv * kappa, 0.0)


def geometry_score(inputs: PriorInputs, lambda_curv: float) -> RasterGrid:
    """Depth-gradient magnitude plus weighted |Laplacian|, normalized; zero without depth."""
    if inputs.depth is None:
        h, w = inputs.labels.plane.shape
        return RasterGrid.zeros(w, h)
    return RasterGrid(minmax(geometry_score_raw(inputs.depth.plane, lambda_curv)))


def fuse(s_render, s_semantic, s_geometry, w: Sequence[float]) -> RasterGrid:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (3,):
        raise ValueError("fusion weights must have 3 entries")
    if np.any(w < 0):
        raise ValueError(f"fusion weights must be non-negative, got {w.tolist()}")
    maps = [as_array(m) for m in (s_render, s_semantic, s_geometry)]
    if not (maps[0].shape == maps[1].shape == maps[2].shape):
        raise ValueError("component maps must share one shape")
    return RasterGrid(w[0] * maps[0] + w[1] * maps[1] + w[2] * maps[2])


def percentile_threshold(s_geometry, percentile: float, valid: Optional[np.ndarray] = None) -> float:
    """Threshold at ``percentile`` of the map, taken over ``valid`` pixels when given."""
    s = as_array(s_geometry).reshape(-1)
    if valid is not None:
        v = np.asarray(valid, dtype=bool).reshape(-1)
        if v.any():
            s = s[v]
    return float(np.percentile(s, percentile))


def reliability_mask(s_geometry, tau_geometry: float) -> RasterGrid:
    """1 where the geometry score strictly exceeds ``tau_geometry``."""
    return RasterGrid((as_array(s_geometry) > tau_geometry).astype(np.float64))


def ablated_weights(w: Sequence[float], use_render=True, use_semantic=True, use_geometry=True) -> np.ndarray:
    """Zero disabled components and rescale the rest to the original total."""
    w = np.asarray(w, dtype=np.float64)
    keep = np.array([use_render, use_semantic, use_geometry], dtype=bool)
    out = np.where(keep, w, 0.0)
    if out.sum() > 0:
        out = out * (w.sum() / out.sum())
    return out


def compute_scores(
    gt,
    rendered,
    priors: PriorInputs,
    w: Sequence[float],
    lambda_curv: float,
    tau_percentile: float = 50.0,
    r_boundary: int = 2,
    base_bg: float = 0.1,
    use_reliability: bool = True,
) -> ScoreMaps:
    """All maps for one view, ready for the sampler."""
    s_r = RasterGrid(minmax(render_residual(gt, rendered).data))
    h, w_px = s_r.height, s_r.width
    if priors.labels is not None:
        s_s = semantic_score(priors, r_boundary, base_bg)
    else:
        log.warning("no label map for this view; semantic score is 0")
        s_s = RasterGrid.zeros(w_px, h)
    if priors.depth is not None:
        s_g = RasterGrid(minmax(geometry_score_raw(priors.depth.plane, lambda_curv)))
    else:
        log.warning("no depth prior for this view; geometry score is 0")
        s_g = RasterGrid.zeros(w_px, h)
    fused = fuse(s_r, s_s, s_g, w)
    if use_reliability:
        valid = priors.depth.plane > 0 if priors.depth is not None else None
        mask = reliability_mask(s_g, percentile_threshold(s_g, tau_percentile, valid))
    else:
        mask = RasterGrid(np.ones((h, w_px)))
    return ScoreMaps(s_r, s_s, s_g, fused, mask)
