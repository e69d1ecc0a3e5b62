"""Importance-driven placement of fine Gaussians and their retention policy."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import Camera, Gaussian, GaussianSet, Level, RasterGrid, Scene, TrainConfig, as_array, logit, sigmoid


class EmptySupportError(ValueError):
    pass


class InvalidDepthError(ValueError):
    pass


@dataclass
class SampleDistribution:
    probs: RasterGrid
    support_size: int

    @property
    def flat(self) -> np.ndarray:
        return self.probs.flat


def build_distribution(s_importance, m_reliable) -> SampleDistribution:
    s = as_array(s_importance)
    m = as_array(m_reliable)
    if s.shape != m.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {m.shape}")
    masked = np.where(m > 0, np.maximum(s, 0.0), 0.0)
    total = masked.sum()
    if total <= 0.0:
        return SampleDistribution(RasterGrid(np.zeros_like(masked)), 0)
    probs = masked / total
    return SampleDistribution(RasterGrid(probs), int(np.count_nonzero(probs)))


def _as_rng(rng_or_seed) -> np.random.Generator:
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return np.random.default_rng(rng_or_seed)


def draw_flat(dist: SampleDistribution, n: int, rng) -> np.ndarray:
    """``n`` independent flat pixel indices drawn from ``dist``."""
    if dist.support_size == 0:
        raise EmptySupportError("sampling distribution has empty support")
    p = dist.flat
    cdf = np.cumsum(p)
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, _as_rng(rng).random(n), side="right")
    return np.minimum(idx, len(p) - 1)


def draw_pixels(dist: SampleDistribution, n: int, rng_seed, dedupe: bool = True) -> List[Tuple[int, int]]:
    """Draw ``n`` pixels (u, v); with ``dedupe`` repeats collapse, first occurrence kept."""
    idx = draw_flat(dist, n, rng_seed)
    if dedupe:
        _, first = np.unique(idx, return_index=True)
        idx = idx[np.sort(first)]
    w = dist.probs.width
    return [(int(i % w), int(i // w)) for i in idx]


def top_k_pixels(dist: SampleDistribution, n: int) -> List[Tuple[int, int]]:
    """Deterministic selection of the ``n`` most probable pixels (ties by index)."""
    p = dist.flat
    order = np.lexsort((np.arange(len(p)), -p))
    order = order[p[order] > 0][:n]
    w = dist.probs.width
    return [(int(i % w), int(i // w)) for i in order]


def back_project(pixel, d: float, cam: Camera) -> np.ndarray:
    """World point R^-1 (d K^-1 [u v 1]^T - t)."""
    if not np.isfinite(d) or d <= 0:
        raise InvalidDepthError(f"invalid depth {d!r} at pixel {tuple(pixel)}")
    u, v = pixel
    ray = np.linalg.solve(cam.K, np.array([u, v, 1.0], dtype=np.float64))
    return cam.R.T @ (d * ray - cam.t)


def project_point(x, cam: Camera) -> Tuple[np.ndarray, float]:
    """Pixel coordinates and camera depth of a world point."""
    xc = cam.R @ np.asarray(x, dtype=np.float64) + cam.t
    uvw = cam.K @ xc
    return uvw[:2] / uvw[2], float(xc[2])


@dataclass
class LedgerEntry:
    birth_iter: int
    protected_until: int


@dataclass
class RetentionLedger:
    entries: Dict[int, LedgerEntry] = field(default_factory=dict)
    # audit trail: (gaussian id, iteration pruned, protected_until)
    pruned: List[Tuple[int, int, int]] = field(default_factory=list)

    def add(self, gid: int, birth_iter: int, t_protect: int) -> None:
        self.entries[int(gid)] = LedgerEntry(int(birth_iter), int(birth_iter) + int(t_protect))

    def protected_until(self, ids: np.ndarray) -> np.ndarray:
        return np.array([self.entries[int(i)].protected_until for i in ids], dtype=np.int64)

    def remove(self, ids, iteration: int) -> None:
        for i in ids:
            e = self.entries.pop(int(i))
            self.pruned.append((int(i), int(iteration), e.protected_until))

    def check(self, scene: Scene) -> None:
        fine_ids = set(int(i) for i in scene.fine.ids)
        if fine_ids != set(self.entries):
            raise AssertionError("ledger entries do not match fine Gaussians")


def effective_opacity_values(opacity_logit, is_fine, protected_until, iteration: int, alpha_minimum: float):
    raw = sigmoid(np.asarray(opacity_logit, dtype=np.float64))
    protected = np.asarray(is_fine, dtype=bool) & (iteration < np.asarray(protected_until))
    return np.where(protected, np.maximum(raw, alpha_minimum), raw)


def effective_opacity(g, ledger: RetentionLedger, iteration: int, alpha_minimum: float,
                      gid: Optional[int] = None) -> float:
    """Opacity seen by the renderer and the pruning test for one Gaussian."""
    if g.level == Level.FINE:
        until = ledger.entries[int(gid)].protected_until
    else:
        until = -1
    return float(effective_opacity_values(g.opacity_logit, g.level == Level.FINE, until, iteration, alpha_minimum))


def scene_effective_opacity(scene: Scene, ledger: RetentionLedger, iteration: int, alpha_minimum: float) -> np.ndarray:
    """Effective opacities in union order (coarse then fine)."""
    coarse = sigmoid(scene.coarse.opacity_logit)
    if scene.n_fine == 0:
        return coarse
    fine = effective_opacity_values(
        scene.fine.opacity_logit, True, ledger.protected_until(scene.fine.ids), iteration, alpha_minimum
    )
    return np.concatenate([coarse, fine])


def spawn_fine(scene: Scene, ledger: RetentionLedger, points: np.ndarray, colors: np.ndarray,
               config: TrainConfig, iteration: int) -> int:
    """Append isotropic fine Gaussians at ``points``; returns how many were added.

    The round is truncated at the fine budget unless ``config.evict_when_full``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    room = config.max_fine - scene.n_fine
    if len(points) > room and config.evict_when_full:
        evict(scene, ledger, len(points) - room, iteration, config.alpha_minimum)
        room = config.max_fine - scene.n_fine
    n = max(0, min(len(points), room))
    if n == 0:
        return 0
    ids = scene.allocate_ids(n)
    new = GaussianSet.create(
        mu=points[:n],
        scale=config.fine_init_scale,
        opacity_logit=float(logit(config.alpha_init)),
        color=np.clip(colors[:n], 0.0, 1.0),
        level=Level.FINE,
        birth_iter=iteration,
        ids=ids,
    )
    scene.fine = GaussianSet.concat([scene.fine, new])
    for gid in ids:
        ledger.add(gid, iteration, config.t_protect)
    return n


def evict(scene: Scene, ledger: RetentionLedger, n: int, iteration: int, alpha_minimum: float) -> int:
    """Remove up to ``n`` unprotected fine Gaussians, oldest first, then lowest opacity."""
    if n <= 0 or scene.n_fine == 0:
        return 0
    fine = scene.fine
    until = ledger.protected_until(fine.ids)
    cand = np.flatnonzero(iteration >= until)
    if len(cand) == 0:
        return 0
    order = np.lexsort((fine.ids[cand], sigmoid(fine.opacity_logit[cand]), fine.birth_iter[cand]))
    drop = cand[order[:n]]
    keep = np.setdiff1d(np.arange(len(fine)), drop)
    ledger.remove(fine.ids[drop], iteration)
    scene.fine = fine.select(keep)
    return len(drop)


def prune(scene: Scene, ledger: RetentionLedger, iteration: int, epsilon_prune: float,
          alpha_minimum: float) -> np.ndarray:
    """Drop unprotected fine Gaussians whose effective opacity is below ``epsilon_prune``.

    Returns the ids removed. Coarse Gaussians are never touched.
    """
    if scene.n_fine == 0:
        return np.zeros(0, dtype=np.int64)
    fine = scene.fine
    until = ledger.protected_until(fine.ids)
    eff = effective_opacity_values(fine.opacity_logit, True, until, iteration, alpha_minimum)
    drop = (eff < epsilon_prune) & (iteration >= until)
    removed = fine.ids[drop].copy()
    if len(removed):
        ledger.remove(removed, iteration)
        scene.fine = fine.select(~drop)
    return removed


def make_fine_gaussian(p_w, pixel, gt_image, config: TrainConfig, iteration: int) -> Gaussian:
    """A single fine Gaussian at ``p_w`` colored by ``gt_image`` at ``pixel`` (u, v)."""
    u, v = pixel
    img = as_array(gt_image)
    return Gaussian(
        mu=np.asarray(p_w, dtype=np.float64).copy(),
        scale=np.full(3, config.fine_init_scale),
        rotation=np.array([1.0, 0.0, 0.0, 0.0]),
        opacity_logit=float(logit(config.alpha_init)),
        color=img[int(v), int(u), :3].copy(),
        level=Level.FINE,
        birth_iter=int(iteration),
    )
