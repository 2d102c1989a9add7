"""Planar scene reconstruction from posed images with semi-transparent textured tablets."""

from .errors import (
    AntiparallelNormals,
    DegenerateBasis,
    EmptySuperpixel,
    InvalidDistance,
    NonFiniteGradient,
    NonFiniteLoss,
    NotFound,
    SceneLoadError,
    SingleFragment,
    TabletError,
)
from .losses import LossWeights
from .merge import MergeConfig
from .pipeline import Schedule, edit_plane_texture, reconstruct
from .raster import TabletBatch, render_view
from .scene import PlaneSet, Scene
from .tablet import CameraView, Tablet

__version__ = "0.1.0"

__all__ = [
    "AntiparallelNormals",
    "CameraView",
    "DegenerateBasis",
    "EmptySuperpixel",
    "InvalidDistance",
    "LossWeights",
    "MergeConfig",
    "NonFiniteGradient",
    "NonFiniteLoss",
    "NotFound",
    "PlaneSet",
    "Scene",
    "SceneLoadError",
    "Schedule",
    "SingleFragment",
    "TabletBatch",
    "TabletError",
    "Tablet",
    "edit_plane_texture",
    "reconstruct",
    "render_view",
]
