"""Volumetric neural cellular automata for smoke stylization.

A small recurrent rule, trained on a single density frame and a 2D style
exemplar, grows a dynamic 3D texture volume (RGB plus a residual density
update) whose self-emerging motion is aligned with the smoke's velocity
field. Trained rules stylize whole density sequences feed-forward.
"""

from .grid import (
    CellGrid,
    DensityField,
    PerceptionVolume,
    PositionalEncoding,
    VelocityField,
    build_perception,
    laplacian27,
    positional_encoding,
    sobel3d,
)
from .render import CameraPose, RenderedView, project_velocity, render_color, render_gray
from .stylize import SequenceSpec, StylizedFrame, stylize_sequence, stylize_unseen
from .update import NonFiniteError, StepMask, UpdateRule, readout, rollout, step

__version__ = "0.1.0"

__all__ = [
    "CameraPose",
    "CellGrid",
    "DensityField",
    "NonFiniteError",
    "PerceptionVolume",
    "PositionalEncoding",
    "RenderedView",
    "SequenceSpec",
    "StepMask",
    "StylizedFrame",
    "UpdateRule",
    "VelocityField",
    "build_perception",
    "laplacian27",
    "positional_encoding",
    "project_velocity",
    "readout",
    "render_color",
    "render_gray",
    "rollout",
    "sobel3d",
    "step",
    "stylize_sequence",
    "stylize_unseen",
    "__version__",
]
