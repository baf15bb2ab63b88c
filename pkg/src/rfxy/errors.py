class DomainError(ValueError):
    """A site or region falls outside the data it needs."""


class ParameterError(ValueError):
    """A parameter is outside its admissible window."""


class ScaleError(ValueError):
    """A length scale is too small or does not divide a region."""


class SurgeryError(RuntimeError):
    """A surgery step could not be carried out on this instance."""


class NumericError(RuntimeError):
    """An iterative solver failed to converge."""

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}
