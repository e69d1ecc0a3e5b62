"""Three-phase coarse-to-fine training with importance-driven fine sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import SCALE_FLOOR, Scene, TrainConfig, View, normalize_quat
from .importance import PriorInputs, ablated_weights, compute_scores
from .metrics import psnr
from .renderer import render, render_loss_and_grad
from .sampler import (
    RetentionLedger,
    back_project,
    build_distribution,
    draw_flat,
    prune,
    scene_effective_opacity,
    spawn_fine,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "loss", "psnr_train", "M_c", "M_f", "spawned", "pruned")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, snapshot: Optional[Path] = None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class AblationFlags:
    hier: bool = True
    s_rend: bool = True
    s_sem: bool = True
    s_geo: bool = True
    ra: bool = True
    agp: bool = True
    pm: bool = True

    @classmethod
    def full(cls) -> "AblationFlags":
        return cls()

    @classmethod
    def baseline(cls) -> "AblationFlags":
        return cls(hier=False, s_rend=False, s_sem=False, s_geo=False, ra=False, agp=False, pm=False)

    def effective(self) -> "AblationFlags":
        # without the hierarchy there is no fine-level machinery to toggle
        if self.hier:
            return self
        return AblationFlags.baseline()

    def label(self) -> str:
        names = ("hier", "s_rend", "s_sem", "s_geo", "ra", "agp", "pm")
        off = [n for n in names if not getattr(self, n)]
        return "full" if not off else "-" + ",-".join(off)


@dataclass(frozen=True)
class PhasePlan:
    coarse_end: int
    refine_end: int
    total_end: int

    @classmethod
    def from_config(cls, config: TrainConfig) -> "PhasePlan":
        plan = cls(config.coarse_end, config.refine_end, config.total_end)
        if not 0 < plan.coarse_end < plan.refine_end < plan.total_end:
            raise ValueError(f"invalid phase plan {plan}")
        return plan

    def phase(self, it: int) -> int:
        if it < self.coarse_end:
            return 1
        if it < self.refine_end:
            return 2
        return 3


def sample_interval(t: int, t_base: int, gamma: float) -> int:
    return int(round(t_base * (1.0 + gamma * t)))


def next_sample_iter(last_sample_iter: int, t: int, t_base: int, gamma: float) -> int:
    """Iteration of the next sampling round: last + round(T_base (1 + gamma t))."""
    if gamma < 0 or t_base < 1:
        raise ValueError("need gamma >= 0 and t_base >= 1")
    return int(last_sample_iter) + sample_interval(t, t_base, gamma)


def sampling_schedule(config: TrainConfig) -> List[int]:
    """Every sampling iteration inside Phase 2; t counts iterations since Phase 2 began."""
    out = []
    it = config.coarse_end
    while it < config.refine_end:
        out.append(it)
        it = next_sample_iter(it, it - config.coarse_end, config.t_base, config.gamma)
    return out


class Adam:
    """Adam over row-aligned parameter arrays with per-row step counts.

    Rows are keyed by Gaussian id so state survives spawning and pruning.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.ids = np.zeros(0, dtype=np.int64)
        self.steps = np.zeros(0, dtype=np.int64)
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def sync(self, ids: np.ndarray, shapes: Dict[str, Tuple[int, ...]]) -> None:
        """Reorder state to ``ids``; unseen ids start from zero state."""
        pos = {int(g): i for i, g in enumerate(self.ids)}
        src = np.array([pos.get(int(g), -1) for g in ids], dtype=np.int64)
        have = src >= 0
        steps = np.zeros(len(ids), dtype=np.int64)
        steps[have] = self.steps[src[have]]
        for name, shape in shapes.items():
            for store in (self.m, self.v):
                new = np.zeros((len(ids),) + shape)
                if name in store:
                    new[have] = store[name][src[have]]
                store[name] = new
        self.ids = np.asarray(ids, dtype=np.int64).copy()
        self.steps = steps

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lrs: Dict[str, float]) -> None:
        """In-place update of every parameter array with a positive rate."""
        self.steps += 1
        bc1 = 1.0 - self.beta1 ** self.steps
        bc2 = 1.0 - self.beta2 ** self.steps
        for name, p in params.items():
            lr = lrs[name]
            if lr <= 0:
                continue
            g = grads[name]
            m = self.m[name] = self.m[name] * self.beta1 + (1 - self.beta1) * g
            v = self.v[name] = self.v[name] * self.beta2 + (1 - self.beta2) * g * g
            shape = (-1,) + (1,) * (g.ndim - 1)
            p -= lr * (m / bc1.reshape(shape)) / (np.sqrt(v / bc2.reshape(shape)) + self.eps)


@dataclass
class SampleRound:
    iteration: int
    interval: int
    drawn: int
    spawned: int
    skipped_invalid: int


@dataclass
class TrainResult:
    scene: Scene
    log: List[dict]
    ledger: RetentionLedger
    sample_rounds: List[SampleRound] = field(default_factory=list)
    # (iteration, min effective opacity over protected fine Gaussians)
    protection_audit: List[Tuple[int, float]] = field(default_factory=list)

    def log_csv(self) -> str:
        lines = [",".join(LOG_COLUMNS)]
        for row in self.log:
            lines.append(",".join(_fmt(row[c]) for c in LOG_COLUMNS))
        return "\n".join(lines) + "\n"

    def write_log(self, path) -> None:
        Path(path).write_text(self.log_csv())


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _priors_for(views: Sequence[View], priors) -> List[PriorInputs]:
    if priors is not None:
        return list(priors)
    return [PriorInputs(depth=v.depth, labels=v.labels) for v in views]


class Trainer:
    """Holds the mutable training state; :func:`train` is the usual entry point."""

    PARAMS = ("mu", "log_scale", "rotation", "opacity_logit", "color")

    def __init__(self, scene_init: Scene, views: Sequence[View], config: TrainConfig,
                 flags: AblationFlags = AblationFlags(), seed: int = 0, priors=None,
                 snapshot_dir: Optional[Path] = None):
        if scene_init.n_coarse == 0:
            raise ValueError("coarse initialization is empty")
        if len(views) < 2:
            raise ValueError("need at least two training views")
        self.scene = scene_init.copy()
        self.views = list(views)
        self.priors = _priors_for(self.views, priors)
        self.config = config
        self.flags = flags.effective()
        self.plan = PhasePlan.from_config(config)
        self.rng = np.random.default_rng(seed)
        self.ledger = RetentionLedger()
        for gid, b in zip(self.scene.fine.ids, self.scene.fine.birth_iter):
            self.ledger.add(gid, b, self._t_protect)
        self.opt = {"coarse": Adam(), "fine": Adam()}
        self.snapshot_dir = snapshot_dir
        self.log: List[dict] = []
        self.rounds: List[SampleRound] = []
        self.audit: List[Tuple[int, float]] = []
        self.schedule = sampling_schedule(config) if self.flags.hier else []
        self._sync()

    @property
    def _t_protect(self) -> int:
        return self.config.t_protect if self.flags.pm else 0

    @property
    def _spawn_config(self) -> TrainConfig:
        # the protection window follows the pm flag
        return self.config.replace(t_protect=self._t_protect)

    @property
    def weights(self) -> np.ndarray:
        f = self.flags
        return ablated_weights(self.config.w, f.s_rend, f.s_sem, f.s_geo)

    def _sync(self) -> None:
        shapes = {"mu": (3,), "log_scale": (3,), "rotation": (4,), "opacity_logit": (), "color": (3,)}
        self.opt["coarse"].sync(self.scene.coarse.ids, shapes)
        self.opt["fine"].sync(self.scene.fine.ids, shapes)

    def position_lr(self, it: int) -> float:
        c = self.config
        frac = min(max(it / max(self.plan.total_end, 1), 0.0), 1.0)
        return float(np.exp(np.log(c.lr_position) * (1 - frac) + np.log(c.lr_position_final) * frac))

    def _group_lrs(self, it: int, level: str) -> Dict[str, float]:
        c = self.config
        lrs = {
            "mu": self.position_lr(it),
            "log_scale": c.lr_scale,
            "rotation": c.lr_rotation,
            "opacity_logit": c.lr_opacity,
            "color": c.lr_color,
        }
        if level == "coarse" and c.coarse_freeze and self.plan.phase(it) > 1:
            # coarse geometry is frozen after Phase 1; appearance keeps adapting slowly
            for k in ("mu", "log_scale", "rotation"):
                lrs[k] = 0.0
            for k in ("opacity_logit", "color"):
                lrs[k] *= c.coarse_appearance_lr_mult
        return lrs

    def effective_alphas(self, it: int) -> np.ndarray:
        return scene_effective_opacity(self.scene, self.ledger, it, self.config.alpha_minimum)

    def _audit_protection(self, it: int, alphas: np.ndarray) -> None:
        if self.scene.n_fine == 0:
            return
        until = self.ledger.protected_until(self.scene.fine.ids)
        prot = it < until
        if prot.any():
            self.audit.append((it, float(alphas[self.scene.n_coarse:][prot].min())))

    def _optimizer_step(self, it: int, grads) -> None:
        nc = self.scene.n_coarse
        for level, gs, sl in (("coarse", self.scene.coarse, slice(0, nc)),
                              ("fine", self.scene.fine, slice(nc, None))):
            if len(gs) == 0:
                continue
            log_scale = np.log(gs.scale)
            params = {
                "mu": gs.mu,
                "log_scale": log_scale,
                "rotation": gs.rotation,
                "opacity_logit": gs.opacity_logit,
                "color": gs.color,
            }
            g = {
                "mu": grads.mu[sl],
                "log_scale": grads.scale[sl] * gs.scale,
                "rotation": grads.rotation[sl],
                "opacity_logit": grads.opacity_logit[sl],
                "color": grads.color[sl],
            }
            lrs = self._group_lrs(it, level)
            self.opt[level].step(params, g, lrs)
            if lrs["log_scale"] > 0:
                gs.scale = np.maximum(np.exp(log_scale), SCALE_FLOOR)
            if lrs["rotation"] > 0:
                gs.rotation = normalize_quat(gs.rotation)
            np.clip(gs.color, 0.0, 1.0, out=gs.color)

    def sampling_round(self, it: int) -> SampleRound:
        """Spawn up to n_add fine Gaussians split across the training views."""
        c = self.config
        n_views = len(self.views)
        w = self.weights
        drawn = spawned = skipped = 0
        for k, (view, pri) in enumerate(zip(self.views, self.priors)):
            quota = c.n_add // n_views + (1 if k < c.n_add % n_views else 0)
            if quota == 0:
                continue
            out = render(self.scene, view.camera, alphas=self.effective_alphas(it), background=c.background)
            maps = compute_scores(
                view.image, out.image, pri, w, c.lambda_curv,
                tau_percentile=c.tau_geometry_percentile, r_boundary=c.r_boundary,
                base_bg=c.base_bg, use_reliability=self.flags.ra,
            )
            dist = build_distribution(maps.s_importance, maps.m_reliable)
            if dist.support_size == 0:
                continue
            pixels, n_draws, n_bad = self._select_pixels(dist, out, quota)
            drawn += n_draws
            skipped += n_bad
            if not pixels:
                continue
            depth = out.depth_map.plane
            pts = np.array([back_project(p, depth[p[1], p[0]], view.camera) for p in pixels])
            cols = np.array([view.image.data[p[1], p[0], :3] for p in pixels])
            spawned += spawn_fine(self.scene, self.ledger, pts, cols, self._spawn_config, it)
        self._sync()
        return SampleRound(it, 0, drawn, spawned, skipped)

    def _select_pixels(self, dist, out, quota: int):
        valid = out.depth_valid.reshape(-1)
        w = dist.probs.width
        if not self.flags.agp:
            p = dist.flat
            order = np.lexsort((np.arange(len(p)), -p))
            order = order[(p[order] > 0) & valid[order]][:quota]
            return [(int(i % w), int(i // w)) for i in order], len(order), 0
        chosen: List[int] = []
        seen = set()
        budget = 4 * quota
        n_draws = n_bad = 0
        while len(chosen) < quota and n_draws < budget:
            batch = draw_flat(dist, min(quota - len(chosen), budget - n_draws), self.rng)
            n_draws += len(batch)
            for i in batch:
                i = int(i)
                if i in seen:
                    continue
                seen.add(i)
                if not valid[i]:
                    n_bad += 1
                    continue
                chosen.append(i)
        return [(i % w, i // w) for i in chosen], n_draws, n_bad

    def _abort(self, it: int, value) -> None:
        snap = None
        if self.snapshot_dir is not None:
            from .dataio import save_scene

            self.snapshot_dir.mkdir(parents=True, exist_ok=True)
            snap = self.snapshot_dir / f"abort_iter{it:06d}.ply"
            save_scene(self.scene, snap)
        raise TrainingAborted(f"non-finite loss {value!r} at iteration {it}", snap)

    def run(self, callback: Optional[Callable[[int, "Trainer"], None]] = None) -> TrainResult:
        """Train to completion; ``callback(it, trainer)`` runs after every optimizer step."""
        c = self.config
        schedule = set(self.schedule)
        last_round: Optional[int] = None
        n_train = len(self.views)
        for it in range(self.plan.total_end):
            phase = self.plan.phase(it)
            spawned = pruned = 0
            if phase == 2 and self.flags.hier:
                since = it - self.plan.coarse_end
                if since > 0 and since % c.prune_interval == 0:
                    removed = prune(self.scene, self.ledger, it, c.epsilon_prune, c.alpha_minimum)
                    pruned = len(removed)
                    if pruned:
                        self._sync()
                if it in schedule:
                    rnd = self.sampling_round(it)
                    rnd.interval = 0 if last_round is None else it - last_round
                    last_round = it
                    self.rounds.append(rnd)
                    spawned = rnd.spawned
            view = self.views[it % n_train]
            alphas = self.effective_alphas(it)
            self._audit_protection(it, alphas)
            out, value, grads = render_loss_and_grad(
                self.scene, view.camera, view.image, c.lambda_ssim, alphas=alphas, background=c.background
            )
            if not np.isfinite(value):
                self._abort(it, value)
            self.log.append({
                "iter": it,
                "loss": float(value),
                "psnr_train": psnr(out.image, view.image),
                "M_c": self.scene.n_coarse,
                "M_f": self.scene.n_fine,
                "spawned": spawned,
                "pruned": pruned,
            })
            self._optimizer_step(it, grads)
            if callback is not None:
                callback(it, self)
        return TrainResult(self.scene, self.log, self.ledger, self.rounds, self.audit)


def train(scene_init: Scene, views: Sequence[View], priors=None, config: Optional[TrainConfig] = None,
          flags: AblationFlags = AblationFlags(), seed: int = 0,
          snapshot_dir: Optional[Path] = None) -> TrainResult:
    """Run all three phases and return the final scene with its logs."""
    config = config or TrainConfig()
    return Trainer(scene_init, views, config, flags, seed, priors, snapshot_dir).run()
