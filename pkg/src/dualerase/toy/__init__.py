"""Desk-scale reference backend and its procedural data."""
from .model import ToyConfig, ToyCondition, ToyMVDM, build_toy_backend, load_weights, save_weights
from .scenes import ProceduralScene, load_scenes, make_dataset, random_scene, save_scenes
from .train import generate_views, scene_tensors, train_toy

__all__ = [
    "ProceduralScene",
    "ToyCondition",
    "ToyConfig",
    "ToyMVDM",
    "build_toy_backend",
    "generate_views",
    "load_scenes",
    "load_weights",
    "make_dataset",
    "random_scene",
    "save_scenes",
    "save_weights",
    "scene_tensors",
    "train_toy",
]
