"""Exception types shared across the package."""


class DDPError(Exception):
    """Base class for all package errors."""


class TopologyError(DDPError):
    """Raised when a network graph violates a structural invariant."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid topology: " + "; ".join(self.violations))


class DimensionError(DDPError, ValueError):
    pass


class NonFiniteError(DDPError, FloatingPointError):
    """A forward or backward quantity became inf/nan at a known node."""

    def __init__(self, node, what="activation"):
        self.node = node
        super().__init__(f"non-finite {what} at node {node!r}")


class DegenerateNormalizationError(DDPError):
    """An internal node's normalizer collapsed below the configured floor."""

    def __init__(self, node, value):
        self.node = node
        self.value = value
        super().__init__(f"degenerate normalizer at node {node!r}: gamma~^2={value:.3e}")


class PathLimitExceeded(DDPError):
    def __init__(self, count, limit):
        self.count = count
        self.limit = limit
        super().__init__(f"network has {count} paths, limit is {limit}")


class InadmissiblePoint(DDPError):
    """Finite-difference test point sits too close to a ReLU kink."""


class ConfigError(DDPError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"config field {field!r}: {message}")


class DivergenceError(DDPError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (loss={loss})")
