"""Scene representation, cameras and raster grids shared by the rest of the package.

Gaussians are stored struct-of-arrays in :class:`GaussianSet`; a single
:class:`Gaussian` is a convenience view used by tests and the sampler.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.special import expit

SCALE_FLOOR = 1e-4
_UNIT_TOL = 8 * np.finfo(np.float64).eps


class Level(IntEnum):
    COARSE = 0
    FINE = 1


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quat(q: np.ndarray) -> np.ndarray:
    """Normalize quaternions (w, x, y, z) along the last axis."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    # rows already unit to within rounding stay untouched, so normalizing is idempotent bitwise
    return np.where(np.abs(n - 1.0) <= _UNIT_TOL, q, q / n)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions; input is normalized first."""
    q = normalize_quat(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariance_from_factors(scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """R diag(scale^2) R^T for stacked factors, shape (..., 3, 3)."""
    R = quat_to_rotmat(rotation)
    M = R * np.asarray(scale, dtype=np.float64)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class Gaussian:
    mu: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray
    level: Level = Level.COARSE
    birth_iter: int = 0

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


def covariance(g: Gaussian) -> np.ndarray:
    return covariance_from_factors(g.scale, g.rotation)


_FIELDS = ("mu", "scale", "rotation", "opacity_logit", "color", "level", "birth_iter", "ids")


@dataclass
class GaussianSet:
    """Struct-of-arrays storage for N Gaussians."""

    mu: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    level: np.ndarray
    birth_iter: np.ndarray
    ids: np.ndarray

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(
            mu=np.zeros((0, 3)),
            scale=np.zeros((0, 3)),
            rotation=np.zeros((0, 4)),
            opacity_logit=np.zeros(0),
            color=np.zeros((0, 3)),
            level=np.zeros(0, dtype=np.uint8),
            birth_iter=np.zeros(0, dtype=np.int64),
            ids=np.zeros(0, dtype=np.int64),
        )

    @classmethod
    def create(
        cls,
        mu,
        scale,
        rotation=None,
        opacity_logit=None,
        color=None,
        level: Level = Level.COARSE,
        birth_iter=0,
        ids=None,
    ) -> "GaussianSet":
        mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
        n = len(mu)
        scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (n, 3)).copy()
        if rotation is None:
            rotation = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        rotation = normalize_quat(np.asarray(rotation, dtype=np.float64).reshape(n, 4))
        if opacity_logit is None:
            opacity_logit = np.zeros(n)
        opacity_logit = np.broadcast_to(np.asarray(opacity_logit, dtype=np.float64), (n,)).copy()
        if color is None:
            color = np.full((n, 3), 0.5)
        color = np.broadcast_to(np.asarray(color, dtype=np.float64), (n, 3)).copy()
        if ids is None:
            ids = np.arange(n, dtype=np.int64)
        return cls(
            mu=mu.copy(),
            scale=np.maximum(scale, SCALE_FLOOR),
            rotation=rotation,
            opacity_logit=opacity_logit,
            color=color,
            level=np.full(n, int(level), dtype=np.uint8),
            birth_iter=np.broadcast_to(np.asarray(birth_iter, dtype=np.int64), (n,)).copy(),
            ids=np.asarray(ids, dtype=np.int64).copy(),
        )

    def __len__(self) -> int:
        return len(self.mu)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            mu=self.mu[i].copy(),
            scale=self.scale[i].copy(),
            rotation=self.rotation[i].copy(),
            opacity_logit=float(self.opacity_logit[i]),
            color=self.color[i].copy(),
            level=Level(int(self.level[i])),
            birth_iter=int(self.birth_iter[i]),
        )

    def __iter__(self) -> Iterator[Gaussian]:
        for i in range(len(self)):
            yield self[i]

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    def covariances(self) -> np.ndarray:
        return covariance_from_factors(self.scale, self.rotation)

    def copy(self) -> "GaussianSet":
        return GaussianSet(**{k: getattr(self, k).copy() for k in _FIELDS})

    def select(self, idx) -> "GaussianSet":
        return GaussianSet(**{k: getattr(self, k)[idx].copy() for k in _FIELDS})

    @staticmethod
    def concat(parts: Sequence["GaussianSet"]) -> "GaussianSet":
        parts = list(parts)
        if not parts:
            return GaussianSet.empty()
        return GaussianSet(**{k: np.concatenate([getattr(p, k) for p in parts]) for k in _FIELDS})

    @staticmethod
    def from_gaussians(gs: Sequence[Gaussian], ids=None) -> "GaussianSet":
        if not gs:
            return GaussianSet.empty()
        out = GaussianSet.create(
            mu=[g.mu for g in gs],
            scale=[g.scale for g in gs],
            rotation=[g.rotation for g in gs],
            opacity_logit=[g.opacity_logit for g in gs],
            color=[g.color for g in gs],
            birth_iter=[g.birth_iter for g in gs],
            ids=ids,
        )
        out.level = np.array([int(g.level) for g in gs], dtype=np.uint8)
        return out


@dataclass
class Scene:
    coarse: GaussianSet = field(default_factory=GaussianSet.empty)
    fine: GaussianSet = field(default_factory=GaussianSet.empty)
    next_id: int = 0

    def __post_init__(self):
        if len(self.coarse) and np.any(self.coarse.level != Level.COARSE):
            raise ValueError("coarse set contains non-coarse Gaussians")
        if len(self.fine) and np.any(self.fine.level != Level.FINE):
            raise ValueError("fine set contains non-fine Gaussians")
        used = np.concatenate([self.coarse.ids, self.fine.ids])
        if len(used):
            self.next_id = max(self.next_id, int(used.max()) + 1)

    @classmethod
    def from_coarse(cls, coarse: GaussianSet) -> "Scene":
        coarse = coarse.copy()
        coarse.level[:] = Level.COARSE
        coarse.ids = np.arange(len(coarse), dtype=np.int64)
        return cls(coarse=coarse, fine=GaussianSet.empty(), next_id=len(coarse))

    @property
    def n_coarse(self) -> int:
        return len(self.coarse)

    @property
    def n_fine(self) -> int:
        return len(self.fine)

    def __len__(self) -> int:
        return self.n_coarse + self.n_fine

    def allocate_ids(self, n: int) -> np.ndarray:
        ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.next_id += n
        return ids

    def copy(self) -> "Scene":
        return Scene(coarse=self.coarse.copy(), fine=self.fine.copy(), next_id=self.next_id)


def scene_union(scene: Scene) -> GaussianSet:
    """Coarse Gaussians followed by fine Gaussians, as one set."""
    return GaussianSet.concat([scene.coarse, scene.fine])


@dataclass
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)

    @classmethod
    def from_intrinsics(cls, fx, fy, cx, cy, width, height, R=None, t=None) -> "Camera":
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, np.eye(3) if R is None else R, np.zeros(3) if t is None else t, width, height)

    def validate(self, tol: float = 1e-9) -> None:
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > tol:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3g})")
        det = np.linalg.det(self.R)
        if abs(det - 1.0) > tol:
            raise ValueError(f"rotation has det {det:.6g}, expected +1")
        K = self.K
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise ValueError("intrinsics must be upper-triangular with K[2,2] = 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    def world_to_camera(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.R.T + self.t

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t


class RasterGrid:
    """A width x height x channels float grid stored row-major.

    ``data`` is exposed as an (H, W, C) float64 array; ``flat`` gives the
    row-major vector.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray, check_finite: bool = True):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W[, 1|3]) array, got shape {data.shape}")
        if check_finite and not np.all(np.isfinite(data)):
            raise ValueError("raster grid contains non-finite values")
        self.data = data

    @classmethod
    def zeros(cls, width: int, height: int, channels: int = 1) -> "RasterGrid":
        return cls(np.zeros((height, width, channels)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def plane(self) -> np.ndarray:
        """(H, W) view of a single-channel grid."""
        if self.channels != 1:
            raise ValueError("plane is only defined for single-channel grids")
        return self.data[:, :, 0]

    def __repr__(self) -> str:
        return f"RasterGrid({self.width}x{self.height}x{self.channels})"


@dataclass
class View:
    """One posed image with its optional priors."""

    name: str
    camera: Camera
    image: RasterGrid
    depth: Optional[RasterGrid] = None
    labels: Optional[RasterGrid] = None


def as_array(x) -> np.ndarray:
    """Accept RasterGrid or ndarray; return the (H, W, C) or (H, W) array."""
    return x.data if isinstance(x, RasterGrid) else np.asarray(x, dtype=np.float64)


@dataclass
class TrainConfig:
    # schedule
    n_coarse: int = 500
    refine_len: int = 2000
    stabilize_len: int = 500
    t_base: int = 100
    gamma: float = 0.01
    prune_interval: int = 100
    # protection / pruning
    t_protect: int = 200
    alpha_minimum: float = 0.05
    alpha_init: float = 0.1
    epsilon_prune: float = 0.005
    # importance
    w: tuple = (0.4, 0.2, 0.4)
    tau_geometry_percentile: float = 50.0
    lambda_curv: float = 0.5
    r_boundary: int = 2
    base_bg: float = 0.1
    # sampling
    n_add: int = 64
    max_fine: int = 2000
    fine_init_scale: float = 0.04
    evict_when_full: bool = False
    # loss
    lambda_ssim: float = 0.2
    background: tuple = (0.0, 0.0, 0.0)
    # learning rates (scale is optimized in log space)
    lr_position: float = 1.6e-3
    lr_position_final: float = 1.6e-5
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 1e-2
    coarse_appearance_lr_mult: float = 0.1
    # freeze coarse geometry after Phase 1 (applies with or without the fine level)
    coarse_freeze: bool = True

    def __post_init__(self):
        self.w = tuple(float(v) for v in self.w)
        self.background = tuple(float(v) for v in self.background)
        self.validate()

    def validate(self) -> None:
        if len(self.w) != 3 or any(v < 0 for v in self.w):
            raise ValueError(f"fusion weights must be 3 non-negative values, got {self.w}")
        if self.t_protect < 0:
            raise ValueError("t_protect must be >= 0")
        if not 0.0 < self.alpha_minimum < 1.0:
            raise ValueError("alpha_minimum must lie in (0, 1)")
        if not 0.0 < self.alpha_init < 1.0:
            raise ValueError("alpha_init must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.t_base < 1:
            raise ValueError("t_base must be >= 1")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ValueError("lambda_ssim must lie in [0, 1]")
        if self.n_coarse <= 0 or self.refine_len <= 0 or self.stabilize_len <= 0:
            raise ValueError("phase lengths must be positive")
        if self.fine_init_scale < SCALE_FLOOR:
            raise ValueError("fine_init_scale below scale floor")

    @property
    def coarse_end(self) -> int:
        return self.n_coarse

    @property
    def refine_end(self) -> int:
        return self.n_coarse + self.refine_len

    @property
    def total_end(self) -> int:
        return self.refine_end + self.stabilize_len

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["w"] = list(self.w)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def background_array(bg: Optional[Sequence[float]]) -> np.ndarray:
    if bg is None:
        return np.zeros(3)
    return np.asarray(bg, dtype=np.float64).reshape(3)
