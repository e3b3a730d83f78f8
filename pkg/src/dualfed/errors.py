"""Exception hierarchy shared across the package."""


class DualFedError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DualFedError):
    """Operand shapes are incompatible."""


class NonFiniteError(DualFedError):
    """A NaN or Inf appeared in the output of a numeric op."""


class BatchTooSmallError(DualFedError):
    """An op that needs at least two batch rows received fewer."""


class DegenerateVectorError(DualFedError):
    """Cosine geometry is undefined for a zero-norm vector."""


class LabelError(DualFedError):
    """A label row is not a valid one-hot vector."""


class MetricError(DualFedError):
    """Base class for evaluation-metric failures."""


class DegenerateGeometryError(MetricError):
    """All pairwise distances vanish; the metric is undefined."""


class UndefinedMetricError(MetricError):
    """The metric has no value on this input (empty, no same-class pair, ...)."""


class DataError(DualFedError):
    """Invalid dataset specification or unusable dataset."""


class ParseError(DataError):
    """A flat file could not be parsed; the message names row and column."""


class ProtocolViolationError(DualFedError):
    """A federated message or state transition broke the protocol contract."""


class SchemaMismatchError(ProtocolViolationError):
    """Two parameter collections disagree on slot names or shapes."""


class ConfigError(DualFedError):
    """Run configuration failed validation; the message names the key."""
