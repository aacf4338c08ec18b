"""Exception hierarchy shared by every stage of the pipeline.

The CLI maps these onto process exit codes, so each class carries one.
"""


class MetaDMError(Exception):
    exit_code = 1


class ConfigError(MetaDMError, ValueError):
    exit_code = 2


class IntegrityError(MetaDMError):
    """Stored bytes do not match their recorded digest or expected layout."""

    exit_code = 3


class FormatError(IntegrityError):
    """A binary file has a bad magic, version, shape header or is truncated."""


class NumericError(MetaDMError, ArithmeticError):
    exit_code = 4


class DimensionError(MetaDMError, ValueError):
    """Shape mismatch; ``axis`` names the offending dimension."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class GraphError(MetaDMError, RuntimeError):
    pass


class MissingGradError(MetaDMError, RuntimeError):
    def __init__(self, names):
        self.names = list(names)
        super().__init__("parameters without gradient: " + ", ".join(self.names))


class NonDeterministicLossError(MetaDMError, RuntimeError):
    pass


class SamplingError(MetaDMError, ValueError):
    """The pool cannot supply the requested episode shape."""

    exit_code = 2
