"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates a documented precondition."""


class NumericalFailureError(RuntimeError):
    """A non-finite value appeared during iteration.

    Distinct from plain non-convergence, which is reported through a
    status object rather than raised.
    """


class UnsupportedInstanceError(ValueError):
    """The exact solver was handed an instance outside its guarantees."""


class ConfigError(ValueError):
    """An experiment configuration document failed to parse or validate."""
