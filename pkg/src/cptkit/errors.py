"""Exception types shared across the toolkit.

Every error carries a stable machine-readable ``code`` that the CLI uses to
emit single-line error records and to choose its exit status.
"""


class ToolkitError(Exception):
    code = "error"
    exit_code = 2  # validation failure unless overridden


class InvalidParameterError(ToolkitError):
    code = "invalid-parameter"


class OutOfRangeError(ToolkitError):
    code = "out-of-range"


class UnreachableTargetError(ToolkitError):
    code = "unreachable-target"
    exit_code = 4


class EmptyBlendError(ToolkitError):
    code = "empty-blend"


class UnknownSourceError(ToolkitError):
    code = "unknown-source"


class SourceOverlapError(ToolkitError):
    code = "source-overlap"


class ManifestEmptyError(ToolkitError):
    code = "manifest-empty"


class ZeroSizeSourceError(ToolkitError):
    code = "zero-size-source"


class NoOtherSourcesError(ToolkitError):
    code = "no-other-sources"


class DegeneratePhaseError(ToolkitError):
    code = "degenerate-phase"


class MissingInventoryError(ToolkitError):
    code = "missing-inventory"


class MissingDocumentError(ToolkitError):
    code = "missing-document"


class DigestMismatchError(ToolkitError):
    code = "digest-mismatch"


class EmptyCorpusError(ToolkitError):
    code = "empty-corpus"


class DegenerateOrderError(ToolkitError):
    code = "degenerate-order"


class EmptyDocumentError(ToolkitError):
    code = "empty-document"


class EmptyScoresError(ToolkitError):
    code = "empty-scores"


class EmptyMiningResultError(ToolkitError):
    code = "empty-mining-result"


class DimensionMismatchError(ToolkitError):
    code = "dimension-mismatch"


class EmbeddingFormatError(ToolkitError):
    """Malformed embedding file; ``byte_offset`` locates the first failure."""

    code = "embedding-format"

    def __init__(self, message: str, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class ConfigError(ToolkitError):
    code = "config"
