"""hiersig: hierarchical self-supervised learning for week-long wearable
PPG/ACC streams, with baselines and a linear-probe evaluation harness."""

__version__ = "0.1.0"

from .config import (ConfigError, MissingArtifactError, NumericalError,
                     config_hash, load_config)

__all__ = ["ConfigError", "MissingArtifactError", "NumericalError",
           "config_hash", "load_config", "__version__"]
