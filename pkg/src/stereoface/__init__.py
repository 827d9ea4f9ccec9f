"""Stereo face verification with coordinate channels, an auxiliary passport
decoder and flat-attack liveness detection, built on a small numpy autodiff core."""

from .errors import ConfigError, DataError, NumericError, ShapeError, StereoFaceError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericError", "ShapeError", "StereoFaceError", "__version__"]
