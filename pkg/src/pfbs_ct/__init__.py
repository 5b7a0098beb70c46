"""Low-dose fan-beam CT reconstruction: projector, FBP, TV-ADMM and unrolled PFBS networks."""
from .geometry import (FidelityWeights, Image, PRESET_IMAGE_SHAPES, PRESETS, ScanGeometry,
                       Sinogram, geometry_preset, image_new)
from .projector import Projector, back_project, forward_project

__version__ = "0.1.0"

__all__ = [
    "FidelityWeights", "Image", "PRESETS", "PRESET_IMAGE_SHAPES", "Projector", "ScanGeometry",
    "Sinogram", "back_project", "forward_project", "geometry_preset", "image_new",
]
