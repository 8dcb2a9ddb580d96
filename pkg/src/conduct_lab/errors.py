"""Exception types shared across the package.

The CLI maps :class:`DomainError` to exit status 2 and :class:`ToleranceError`
to exit status 3.
"""


class DomainError(ValueError):
    """An input lies outside the domain where an operation is defined."""


class ToleranceError(RuntimeError):
    """A numerical routine could not meet its tolerance or hit a configured ceiling."""
