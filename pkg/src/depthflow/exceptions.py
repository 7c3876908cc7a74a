"""Exception types shared across the package.

Every error that callers are expected to catch has its own class so that
tests and the CLI can distinguish usage problems from runtime failures.
"""


class DepthflowError(Exception):
    """Base class for all package errors."""


# --- tensor / autodiff ---

class ShapeMismatch(DepthflowError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteValue(DepthflowError):
    """A forward operation produced NaN or Inf."""


class NotScalarLoss(DepthflowError):
    """backward() was called on a non-scalar tensor."""


class DetachedGraph(DepthflowError):
    """The loss tensor was not produced on the given tape."""


# --- network / schedules ---

class OutOfRangeT(DepthflowError):
    """Time argument outside [0, 1]."""


# --- data generation / normalization ---

class BadSize(DepthflowError):
    """Requested grid size violates generator preconditions."""


class DegenerateQuantiles(DepthflowError):
    """Dataset quantiles collapse (d2 == d98)."""


class AllInvalid(DepthflowError):
    """Depth grid has no valid pixel."""


class IoError(DepthflowError):
    """File could not be read or written."""


class MalformedHeader(DepthflowError):
    """Image file header does not parse."""


# --- training ---

class NonFiniteLoss(DepthflowError):
    """Training loss became NaN or Inf; the run is aborted."""


class InsufficientPseudo(DepthflowError):
    """Not enough pseudo-labeled samples for the requested ratio."""


class NonFiniteState(DepthflowError):
    """ODE state became NaN or Inf during integration."""


# --- evaluation ---

class DegenerateGT(DepthflowError):
    """Ground truth is constant (or the affine fit has non-positive scale)."""


class TooFewValid(DepthflowError):
    """Fewer jointly-valid pixels than the operation requires."""


class NoValidPixels(DepthflowError):
    """Metric computed over an empty set of valid pixels."""


class NonPositivePrediction(DepthflowError):
    """delta1 requires strictly positive predictions at valid pixels."""


class SizeMismatch(DepthflowError):
    """Sample sets have different cardinality."""


class TooLargeForOptimal(DepthflowError):
    """Optimal coupling requested on more samples than the solver cap."""


class DegenerateSplit(DepthflowError):
    """Uncertainty values are constant; no quantile split exists."""


# --- completion ---

class EmptyMask(DepthflowError):
    """Distance transform requested on an all-false mask."""


class IncompatibleCheckpoint(DepthflowError):
    """Checkpoint cannot be used for the requested fine-tuning."""


# --- persistence ---

class BadMagic(DepthflowError):
    """Checkpoint file does not start with the expected magic bytes."""


class VersionMismatch(DepthflowError):
    """Checkpoint format version is not supported."""


class TruncatedFile(DepthflowError):
    """Checkpoint payload is shorter than its header declares."""


# --- configuration ---

class ConfigError(DepthflowError):
    """Unknown or malformed configuration key (usage error)."""
