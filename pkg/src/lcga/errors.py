"""Exception hierarchy shared across the package."""


class LcgaError(Exception):
    """Base class for all errors raised by lcga."""


class DimensionError(LcgaError):
    """A field's shape does not match the model specification."""

    def __init__(self, field, expected, got):
        self.field = field
        self.expected = expected
        self.got = got
        super().__init__(f"{field}: expected {expected}, got {got}")


class ParameterDomainError(LcgaError):
    """A parameter value is outside its valid domain."""


class NonFiniteLoglikError(LcgaError):
    """A non-finite intermediate appeared while evaluating the likelihood."""

    def __init__(self, subject_index, message=None):
        self.subject_index = subject_index
        super().__init__(message or
                         f"non-finite log-likelihood for subject index {subject_index}")


class InputDataError(LcgaError):
    """Malformed or unusable input data; carries a line number when known."""

    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class EmptyDatasetError(InputDataError):
    """No usable subjects remained after parsing and exclusions."""
