"""Exception types raised across the package."""


class ForMLError(ValueError):
    """Base class for all structured errors raised by this package."""


class ShapeError(ForMLError):
    """Array dimensions or parameter layouts do not agree."""


class NonFiniteError(ForMLError):
    """A loss, gradient or weight became NaN/inf.

    ``index`` is the offending sample position within the batch (if known) and
    ``step`` labels the training-step phase where it was detected.
    """

    def __init__(self, message, index=None, step=None):
        self.index = index
        self.step = step
        parts = [message]
        if index is not None:
            parts.append(f"sample index {index}")
        if step is not None:
            parts.append(f"step {step}")
        super().__init__("; ".join(parts))


class IdxFormatError(ForMLError):
    """Malformed IDX file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = f" ({path} @ byte {offset})" if offset is not None else ""
        super().__init__(message + where)


class SamplingError(ForMLError):
    """A split or batch cannot be drawn with the requested constraints."""
