"""Exception types shared by every module.

The command line maps :class:`InputError` to exit code 2 and
:class:`NumericalError` (including :class:`ModelError`) to exit code 3.
"""


class InputError(ValueError):
    """Invalid arguments, shapes, or incompatible schemes."""


class NumericalError(ArithmeticError):
    """A computation failed to converge or produced a non-finite result."""


class ModelError(NumericalError):
    """A covariance model produced an inadmissible (e.g. non-PSD) object."""
