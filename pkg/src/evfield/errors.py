class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class NumericalAbort(RuntimeError):
    """Optimisation produced a non-finite or diverging value."""

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context
