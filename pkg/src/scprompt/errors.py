"""Exception hierarchy shared across the package.

The CLI maps these onto its exit codes: configuration problems are usage
errors, broken or missing files are data errors, and anything non-finite
or failing a numerical check is a numerical failure.
"""


class ScpromptError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ScpromptError):
    """Invalid or inconsistent configuration (bad value, unknown key)."""


class ShapeError(ScpromptError):
    """Tensor shapes incompatible with an operation's shape rule."""


class GraphError(ScpromptError):
    """Misuse of a computation graph (no forward values, non-scalar loss)."""


class NonFiniteError(ScpromptError):
    """A NaN or infinity appeared where finite values are required."""


class DataFormatError(ScpromptError):
    """Missing, truncated, corrupt, or wrong-version on-disk artifact."""


class GenerationError(ScpromptError):
    """Synthetic data request that cannot be rendered (sprite leaves frame)."""
