"""On-disk formats: tensor container, checkpoints, recipe, report and histograms."""

from .checkpoint import (
    read_checkpoint,
    read_quantized,
    write_checkpoint,
    write_quantized,
)
from .container import (
    BadMagicError,
    ChecksumError,
    FormatError,
    LayoutError,
    ManifestError,
    OverlapError,
    TruncatedError,
    VersionError,
    file_digest,
    pack4,
    unpack4,
)
from .recipe_json import (
    RecipeFormatError,
    recipe_digest,
    recipe_from_text,
    recipe_to_text,
)
from .report import (
    build_report,
    read_histogram,
    read_report,
    write_histograms,
    write_report,
)

__all__ = [
    "BadMagicError",
    "ChecksumError",
    "FormatError",
    "LayoutError",
    "ManifestError",
    "OverlapError",
    "RecipeFormatError",
    "TruncatedError",
    "VersionError",
    "build_report",
    "file_digest",
    "pack4",
    "read_checkpoint",
    "read_histogram",
    "read_quantized",
    "read_report",
    "recipe_digest",
    "recipe_from_text",
    "recipe_to_text",
    "unpack4",
    "write_checkpoint",
    "write_histograms",
    "write_quantized",
    "write_report",
]
