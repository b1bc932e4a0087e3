"""Testing and estimating the rank of a time-varying spot covariance matrix."""

from .errors import InputError, ModelError, NumericalError

__version__ = "0.1.0"

__all__ = ["InputError", "ModelError", "NumericalError", "__version__"]
