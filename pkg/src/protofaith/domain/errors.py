from __future__ import annotations

from typing import Any


class ProtoFaithError(Exception):
    """Base class for every failure raised by the library."""


class ShapeMismatchError(ProtoFaithError, ValueError):
    def __init__(self, what: str, expected: Any, actual: Any) -> None:
        self.what = what
        self.expected = tuple(expected) if isinstance(expected, (list, tuple)) else expected
        self.actual = tuple(actual) if isinstance(actual, (list, tuple)) else actual
        super().__init__(f"{what}: expected shape {self.expected}, got {self.actual}")


class NonFiniteError(ProtoFaithError, ValueError):
    def __init__(self, layer_index: int | str, detail: str = "") -> None:
        self.layer_index = layer_index
        message = f"non-finite values after layer {layer_index}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class ClassIndexError(ProtoFaithError, ValueError):
    pass


class ConfigurationError(ProtoFaithError, ValueError):
    pass


class UnsupportedLayerError(ProtoFaithError, ValueError):
    pass


class EnumerationLimitError(ProtoFaithError, ValueError):
    def __init__(self, features: int, limit: int) -> None:
        self.features = features
        self.limit = limit
        super().__init__(
            f"exact enumeration refused: {features} features exceeds the limit of {limit}"
        )


class ProvenanceError(ProtoFaithError, ValueError):
    pass


class ModelFileError(ProtoFaithError, ValueError):
    def __init__(
        self,
        message: str,
        *,
        line: int | None = None,
        offset: int | None = None,
        field: str | None = None,
    ) -> None:
        self.message = message
        self.line = line
        self.offset = offset
        self.field = field
        context = []
        if field:
            context.append(f"field {field}")
        if line is not None:
            context.append(f"line {line}")
        if offset is not None:
            context.append(f"byte offset {offset}")
        suffix = f" [{', '.join(context)}]" if context else ""
        super().__init__(f"{message}{suffix}")


class UsageError(ProtoFaithError):
    pass


class TensorFileError(ModelFileError):
    pass
