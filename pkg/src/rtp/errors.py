"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested kernel."""


class ConfigurationError(ValueError):
    """A layer or experiment configuration violates a partitioning precondition."""


class ProtocolError(RuntimeError):
    """Workers disagreed about a ring step, or a shard turned up in the wrong place."""


class DeadlockError(ProtocolError):
    """A ring exchange could not complete because a peer never arrived."""


class StateError(RuntimeError):
    """An operation was called out of order (e.g. backward without forward)."""
