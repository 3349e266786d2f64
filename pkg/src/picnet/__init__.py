"""Two-modality remote-sensing patch classifier on a small numpy autodiff engine.

Submodules: ``tensor`` (autodiff engine), ``model``, ``data``, ``train``,
``metrics``, ``gradcheck`` and ``cli``.
"""

from .errors import ConfigError, DataError, NumericError, PicnetError, ShapeError, UsageError
from .model import ModelConfig, PicnetModel

__all__ = ["ConfigError", "DataError", "ModelConfig", "NumericError", "PicnetError", "PicnetModel", "ShapeError",
           "UsageError"]
__version__ = "0.1.0"
