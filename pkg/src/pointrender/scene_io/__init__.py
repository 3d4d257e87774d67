from .colmap import load_colmap_model, save_colmap_model
from .ply import load_ply, save_ply
from .scene import Scene, crop_camera, load_scene, make_split, save_manifest

__all__ = [
    "Scene", "crop_camera", "load_colmap_model", "load_ply", "load_scene",
    "make_split", "save_colmap_model", "save_manifest", "save_ply",
]
