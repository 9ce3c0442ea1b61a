"""Exception types raised across the package."""


class ConvergenceError(RuntimeError):
    """An iterative solver hit its sweep cap before reaching tolerance."""


class EnumerationLimitError(ValueError):
    """An exhaustive enumeration would exceed its configured size guard."""


class ModelMismatchError(ValueError):
    """An observation has zero predictive probability under a world model."""
