"""Differentiable 360-degree fisheye panorama stitching.

Per-scene numerical optimization of a five-stage stitching pipeline
(tone curves, global plus local warping, weighted blending) against
weak-supervision views rendered by an alternate camera set.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    color,
    config,
    geometry,
    gradcheck,
    image_core,
    losses,
    optimizer,
    parallel,
    pipeline,
    rigsim,
)
from .errors import (  # noqa: F401
    ConfigError,
    DegenerateFitError,
    DomainError,
    NonFiniteLossError,
    StitchError,
)
