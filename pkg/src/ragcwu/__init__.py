"""Find the chunk size, top-k and context window utilization that maximise
answer quality for a retrieval-augmented generation pipeline."""

from ragcwu.errors import (
    IndexBuildError,
    IndexLoadError,
    InvalidParameterError,
    ProviderError,
    QAFormatError,
    SweepAborted,
)

__version__ = "0.1.0"

__all__ = [
    "IndexBuildError",
    "IndexLoadError",
    "InvalidParameterError",
    "ProviderError",
    "QAFormatError",
    "SweepAborted",
    "__version__",
]
