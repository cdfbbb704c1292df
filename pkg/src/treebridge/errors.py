"""Exception types shared across the package."""


class TreeBridgeError(Exception):
    """Base class for all package-specific errors."""


class InvalidTreeError(TreeBridgeError):
    """A tree structure violates the canonical-form invariants."""


class DegenerateTimesError(InvalidTreeError):
    """Two internal nodes carry (numerically) identical times."""


class InvalidOperationError(TreeBridgeError):
    """A subtree-move operation violates its node or time constraints."""


class NewickError(TreeBridgeError):
    """Malformed Newick input.  Carries the offending string position."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class DataFormatError(TreeBridgeError):
    """Malformed or unsupported input data."""


class ConfigError(TreeBridgeError):
    """Invalid run configuration."""


class ScanAbort(TreeBridgeError):
    """Raised internally when a segment scan cannot produce any path.

    Callers treat this as "skip the update", not as a fatal error.
    ``cap`` distinguishes a frontier-size overflow from a dead end.
    """

    def __init__(self, message="", *, cap=False):
        super().__init__(message)
        self.cap = cap


class ConsistencyError(TreeBridgeError):
    """An internal self-check failed; indicates a bug, not bad input."""
