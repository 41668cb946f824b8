"""Exception hierarchy. Everything derives from ``ValueError`` so callers that
only care about "bad input" can catch one type."""

from __future__ import annotations


class GfssmError(ValueError):
    pass


class ShapeError(GfssmError):
    def __init__(self, field: str, message: str) -> None:
        self.field = field
        super().__init__(f"{field}: {message}")


class NonFiniteError(GfssmError):
    """Raised when an input or an intermediate becomes NaN/Inf.

    ``step`` is the time index at which it was detected, or ``None`` for inputs.
    """

    def __init__(self, field: str, step: int | None = None) -> None:
        self.field = field
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"non-finite value in {field}{where}")


class SizeLimitError(GfssmError):
    pass


class ScheduleError(GfssmError):
    """Cache and chunk disagree on Q, n, dimensions or dtype."""
