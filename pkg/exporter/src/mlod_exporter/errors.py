"""Exception types raised by the exporter.

Each catchable failure has its own class so the CLI can map usage mistakes
and broken data to different exit codes, and tests can match on type.
"""

from __future__ import annotations


class ExporterError(Exception):
    """Base class for all exporter errors."""


class BadTapSpec(ExporterError):
    """A TapSpec field is missing, malformed, or out of range."""


class ModelLoadError(ExporterError):
    """The model file could not be loaded as a torch module."""


class TapNotFound(ExporterError):
    """A requested tap name matches no submodule of the model."""


class TapRefired(ExporterError):
    """A tapped submodule ran more than once in a single forward pass."""


class EmptySplit(ExporterError):
    """A split folder holds no readable image files."""


class BadImage(ExporterError):
    """An image file could not be decoded."""


class ShapeDrift(ExporterError):
    """Tensor shapes changed between batches of the same split."""


class UnsupportedShape(ExporterError):
    """An activation or logits tensor has a rank the pooling cannot handle."""


class ExitMismatch(ExporterError):
    """Classifier exits disagree on the number of classes."""


class PackInvariant(ExporterError):
    """Matrices handed to the pack writer violate the format's invariants."""
