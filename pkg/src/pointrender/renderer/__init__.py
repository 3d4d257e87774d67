from .blocks import FourierConvBlock, FourierUnit, GatedFusionBlock, SpectralTransform
from .net import ArchConfig, MultiScaleRenderer, build_renderer, load_renderer, save_renderer

__all__ = [
    "ArchConfig", "FourierConvBlock", "FourierUnit", "GatedFusionBlock",
    "MultiScaleRenderer", "SpectralTransform", "build_renderer", "load_renderer",
    "save_renderer",
]
