"""Synthetic displacement fields, training-pair generation and registration evaluation for 3D volumes."""

__version__ = "0.1.0"

from .dvf import Category, SynthSpec, default_spec, generate  # noqa: E402
from .intensity import NoiseParams, add_noise, apply_sponge, jacobian_determinant  # noqa: E402
from .metrics import LandmarkSet, LossParams, bending_energy, huber, jacobian_stats, total_loss, tre  # noqa: E402
from .pipeline import compose, run_pipeline, warp  # noqa: E402
from .volume import ControlGrid, DisplacementField, Volume  # noqa: E402

__all__ = [
    "Category",
    "ControlGrid",
    "DisplacementField",
    "LandmarkSet",
    "LossParams",
    "NoiseParams",
    "SynthSpec",
    "Volume",
    "add_noise",
    "apply_sponge",
    "bending_energy",
    "compose",
    "default_spec",
    "generate",
    "huber",
    "jacobian_determinant",
    "jacobian_stats",
    "run_pipeline",
    "total_loss",
    "tre",
    "warp",
]
