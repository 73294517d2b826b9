"""Exception types shared across the package."""


class LsslError(Exception):
    """Base class for all package errors."""


class InvalidFactor(LsslError):
    """Generative factor vector is malformed (non-finite or too short)."""


class GenerationError(LsslError):
    """Dataset generation failed (usually an I/O problem)."""


class ArchError(LsslError):
    """Architecture configuration is internally inconsistent."""


class ShapeError(LsslError):
    """Array shape does not match what the model or operation expects."""


class EmptyDataset(LsslError):
    """A manifest with zero visits was supplied."""


class NoPairs(LsslError):
    """No within-subject pairs satisfy the scan-interval rule."""


class DegeneratePair(LsslError):
    """Representation difference of a pair is numerically zero."""


class EmptyBatch(LsslError):
    """A loss was requested over an empty image batch."""


class DivergenceError(LsslError):
    """Training produced a non-finite loss.

    Carries the path of the last finite checkpoint (None if training ran
    without an output directory).
    """

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class DegenerateDistribution(LsslError):
    """A sample with zero spread cannot be moment-matched."""


class SingularFit(LsslError):
    """Regression design matrix is rank deficient."""


class EmptyInput(LsslError):
    """An operation requiring at least one element got none."""


class DegenerateSet(LsslError):
    """Every pair in a colinearity probe was degenerate."""


class ZeroReference(LsslError):
    """Age-factor reference displacement is zero; ratios are undefined."""


class InsufficientData(LsslError):
    """Too few samples for the requested statistic."""


class SplitError(LsslError):
    """Cross-validation split request is unsatisfiable."""


class DegenerateLabels(LsslError):
    """A training fold contains a single class."""


class ConfigError(LsslError):
    """Configuration is invalid (unknown key, wrong type, bad value)."""


class FormatError(LsslError):
    """A serialized artifact is corrupt or has the wrong format."""
