"""Cross-lingual acoustic similarity through posterior mapping networks."""

from .config import ExperimentConfig
from .errors import PosteriorMappingError

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "PosteriorMappingError", "__version__"]
