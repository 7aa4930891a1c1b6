"""First-person social behavior prediction for multi-player play.

Modules: ``geometry`` (court projection, gaze triangulation, label images),
``formation``, ``attention``, ``retrieval``, ``compatibility``,
``selection``, ``simworld``, ``evaluate``, ``dataio``, ``cli``.
"""

from .errors import EgoForecastError

__version__ = "0.1.0"
__all__ = ["EgoForecastError", "__version__"]
