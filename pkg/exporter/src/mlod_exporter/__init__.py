"""Feature-pack exporter: tap a torch classifier and dump per-layer features."""

from .errors import (
    BadImage,
    BadTapSpec,
    EmptySplit,
    ExitMismatch,
    ExporterError,
    ModelLoadError,
    PackInvariant,
    ShapeDrift,
    TapNotFound,
    TapRefired,
    UnsupportedShape,
)
from .export import (
    IMAGE_SUFFIXES,
    POOLINGS,
    OdinPerturbation,
    TapSpec,
    export,
    list_images,
    load_model,
    validate_spec,
)
from .packio import PACK_VERSION, PackLayer, matrix_filename, write_pack
