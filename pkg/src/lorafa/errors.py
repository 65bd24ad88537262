"""Exception hierarchy for the lorafa package."""


class LorafaError(Exception):
    """Base class for all lorafa errors."""


class DimensionError(LorafaError):
    """Operand shapes are incompatible."""


class ParameterError(LorafaError):
    """A configuration or hyper-parameter value is invalid."""


class NumericsError(LorafaError):
    """An operation produced NaN or Inf."""


class RetentionPolicyError(LorafaError):
    """A backward pass requested an activation the forward pass did not retain.

    This is load-bearing: it is how the reduced retention of frozen-A
    adapters is enforced rather than merely assumed.
    """


class ModeError(LorafaError):
    """An operation was called on a layer in an unsupported adaptation mode."""


class StateError(LorafaError):
    """Optimizer state does not match the parameter set."""


class DataError(LorafaError):
    """Input data is invalid (e.g. token id out of range)."""


class ReconciliationError(LorafaError):
    """Measured and analytic activation counts disagree."""
