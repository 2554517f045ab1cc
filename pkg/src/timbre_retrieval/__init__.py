"""Synthetic instrument bank, contrastive timbre encoders and query-by-example retrieval."""
from .config import ExperimentConfig, config_from_dict, load_config
from .errors import DivergenceError, InvalidArgumentError, SilentAudioError

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "config_from_dict", "load_config", "DivergenceError", "InvalidArgumentError",
           "SilentAudioError", "__version__"]
