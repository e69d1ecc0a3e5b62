"""Hierarchical 3D Gaussian splatting with multimodal importance sampling."""
from .core import Camera, Gaussian, GaussianSet, Level, RasterGrid, Scene, TrainConfig, View
from .dataio import Dataset, load_dataset, load_scene, save_dataset, save_scene
from .importance import PriorInputs, ScoreMaps, compute_scores
from .metrics import psnr, ssim
from .renderer import loss, project, render, render_backward, render_naive
from .sampler import RetentionLedger, back_project, build_distribution, draw_pixels, prune, spawn_fine
from .synthetic import MetricsReport, evaluate, init_from_depth, make_synthetic
from .trainer import AblationFlags, TrainResult, next_sample_iter, train

__version__ = "0.1.0"

__all__ = [
    "AblationFlags", "Camera", "Dataset", "Gaussian", "GaussianSet", "Level", "MetricsReport",
    "PriorInputs", "RasterGrid", "RetentionLedger", "Scene", "ScoreMaps", "TrainConfig", "TrainResult",
    "View", "back_project", "build_distribution", "compute_scores", "draw_pixels", "evaluate",
    "init_from_depth", "load_dataset", "load_scene", "loss", "make_synthetic", "next_sample_iter",
    "project", "prune", "psnr", "render", "render_backward", "render_naive", "save_dataset",
    "save_scene", "spawn_fine", "ssim", "train",
]
