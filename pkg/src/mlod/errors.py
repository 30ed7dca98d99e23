"""Exception types raised by the mlod library.

Every error condition that callers may want to catch has its own class so
that CLI exit-code mapping and tests can match on type rather than message.
"""

from __future__ import annotations


class MlodError(Exception):
    """Base class for all library errors."""


class ConfigError(MlodError):
    """Invalid configuration value (bad alpha, temperature, k, and so on)."""


# feature pack -----------------------------------------------------------

class MissingFile(MlodError):
    """A matrix file declared in the manifest is absent on disk."""


class SizeMismatch(MlodError):
    """A matrix file's byte length disagrees with count * dim * 4."""


class SchemaError(MlodError):
    """The manifest JSON is malformed or violates a structural invariant."""


class NaNInData(MlodError):
    """A loaded matrix contains NaN or infinite entries."""


class UnknownSplit(MlodError):
    """A requested split name is not declared in the manifest."""


class IncompleteGrid(MlodError):
    """write_pack was given matrices that do not cover every (layer, split) cell."""


class IoFailure(MlodError):
    """An underlying read or write failed."""


# scorers ----------------------------------------------------------------

class DegenerateLogits(MlodError):
    """Logit vector is non-finite or has fewer than two classes."""


class ZeroVector(MlodError):
    """A feature row has zero norm and cannot be L2-normalized."""


class TooFewPoints(MlodError):
    """The calibration set holds fewer points than the requested k."""


class DimMismatch(MlodError):
    """Query dimensionality differs from the indexed points."""


class KindMismatch(MlodError):
    """Scorer applied to the wrong layer kind (logits scorer on features or vice versa)."""


# calibrator -------------------------------------------------------------

class TooFewSamples(MlodError):
    """Not enough calibration scores to fit a table."""


class ShapeMismatch(MlodError):
    """Score arrays passed to the calibrator have inconsistent shapes."""


# combiner ---------------------------------------------------------------

class EmptyPVector(MlodError):
    """A p-value vector with zero entries was passed to a combiner."""


class BadWeights(MlodError):
    """Cauchy weights are negative, wrong length, or do not sum to one."""


class UnsupportedMethod(MlodError):
    """The requested method does not support this operation."""


# statfn -----------------------------------------------------------------

class OddDf(MlodError):
    """Chi-square routines here only accept even degrees of freedom."""


# evaluator --------------------------------------------------------------

class EmptyInput(MlodError):
    """A metric was asked to evaluate empty score arrays."""


# synthgen ---------------------------------------------------------------

class InvalidSpec(MlodError):
    """A synthetic-data spec has inconsistent or out-of-range fields."""


class UnknownScenario(MlodError):
    """No built-in scenario with the requested name."""
