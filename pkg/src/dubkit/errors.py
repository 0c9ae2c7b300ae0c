"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Raised when an input violates an operation's preconditions."""


class DecodeTimeout(RuntimeError):
    """Raised when a search finishes no hypothesis within its limits."""
