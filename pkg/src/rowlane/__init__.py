"""Row-wise two-stage lane detection on LiDAR bird's-eye-view grids."""

from .tensor import Tensor, Tape, ShapeError, ConfigError

__all__ = ["Tensor", "Tape", "ShapeError", "ConfigError"]

__version__ = "0.1.0"
