"""Offline multi-agent imitation from unlabeled mixed-quality data.

Preference labels pick an expert subset, a mixed discriminator estimates the
expert/union occupancy ratio, a mixed value function turns it into
closed-form correction weights, and per-agent policies are fitted by
weighted behaviour cloning.
"""

from .errors import ConfigError, DivergenceError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DivergenceError", "__version__"]
