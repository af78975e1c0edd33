"""Constrained domain adaptation of transducer ASR models with positional adapters, at desk scale."""

from .errors import ConfigError, DataError, NumericalError, XferlabError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericalError", "XferlabError", "__version__"]
