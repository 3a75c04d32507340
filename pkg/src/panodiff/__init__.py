"""Joint image + panoptic-map diffusion at desk scale."""

__version__ = "0.1.0"
