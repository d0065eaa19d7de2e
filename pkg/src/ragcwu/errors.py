from __future__ import annotations


class InvalidParameterError(ValueError):
    pass


class IndexBuildError(ValueError):
    pass


class IndexLoadError(RuntimeError):
    pass


class QAFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ProviderError(RuntimeError):
    """A remote provider call failed.

    ``retryable`` is true for transport failures and 5xx responses; 4xx
    responses are final and carry their ``status_code``.
    """

    def __init__(self, message: str, status_code: int | None = None, retryable: bool = False) -> None:
        super().__init__(message)
        self.status_code = status_code
        self.retryable = retryable


class SweepAborted(RuntimeError):
    pass
