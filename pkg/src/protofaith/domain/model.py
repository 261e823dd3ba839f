from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Any

import numpy as np

from protofaith.domain.constants import ACTIVATIONS, LAYER_KINDS
from protofaith.domain.errors import ConfigurationError, ShapeMismatchError


def frozen_array(values: Any, ndim: int | None = None, what: str = "array") -> np.ndarray:
    """Copy into a read-only float64 array."""
    array = np.array(values, dtype=np.float64, copy=True)
    if ndim is not None and array.ndim != ndim:
        raise ShapeMismatchError(what, f"{ndim}-d", array.shape)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """One backbone or extractor layer.

    Conv kernels are laid out (kh, kw, c_in, c_out); affine weights are (out, in) and the
    layer flattens its input, emitting a (1, 1, out) map.
    """

    kind: str
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    activation: str = "none"

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.stride < 1:
            raise ConfigurationError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ConfigurationError(f"padding must be nonnegative, got {self.padding}")
        ndim = 4 if self.kind == "conv" else 2
        weights = frozen_array(self.weights, ndim, f"{self.kind} weights")
        bias = frozen_array(self.bias, 1, f"{self.kind} bias")
        out_channels = weights.shape[3] if self.kind == "conv" else weights.shape[0]
        if bias.shape[0] != out_channels:
            raise ShapeMismatchError(f"{self.kind} bias", (out_channels,), bias.shape)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)

    @property
    def out_channels(self) -> int:
        return int(self.weights.shape[3] if self.kind == "conv" else self.weights.shape[0])

    def same_as(self, other: LayerSpec) -> bool:
        return (
            self.kind == other.kind
            and self.stride == other.stride
            and self.padding == other.padding
            and self.activation == other.activation
            and _bitwise_equal(self.weights, other.weights)
            and _bitwise_equal(self.bias, other.bias)
        )


@dataclass(frozen=True)
class ProvenanceRecord:
    class_index: int
    proto_index: int
    image_id: str
    row: int
    col: int


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    """K prototypes for each of C classes; prototype (c, k) sits at flat index c * K + k."""

    per_class: int
    classes: int
    values: np.ndarray
    provenance: tuple[ProvenanceRecord, ...] | None = None

    def __post_init__(self) -> None:
        if self.per_class < 1 or self.classes < 1:
            raise ConfigurationError(
                f"need K >= 1 and C >= 1, got K={self.per_class}, C={self.classes}"
            )
        values = frozen_array(self.values, 2, "prototype values")
        if values.shape[0] != self.per_class * self.classes:
            raise ShapeMismatchError(
                "prototype values", (self.per_class * self.classes, values.shape[1]), values.shape
            )
        object.__setattr__(self, "values", values)
        if self.provenance is not None:
            records = tuple(self.provenance)
            if len(records) != self.count:
                raise ConfigurationError(
                    f"provenance has {len(records)} records for {self.count} prototypes"
                )
            for flat, record in enumerate(records):
                if self.flat_index(record.class_index, record.proto_index) != flat:
                    raise ConfigurationError(
                        f"provenance record {flat} names prototype "
                        f"({record.class_index}, {record.proto_index})"
                    )
            object.__setattr__(self, "provenance", records)

    @property
    def count(self) -> int:
        return self.per_class * self.classes

    @property
    def channels(self) -> int:
        return int(self.values.shape[1])

    def flat_index(self, class_index: int, proto_index: int) -> int:
        return class_index * self.per_class + proto_index

    def identity(self, flat: int) -> tuple[int, int]:
        return divmod(flat, self.per_class)

    def with_provenance(
        self, values: np.ndarray, provenance: tuple[ProvenanceRecord, ...]
    ) -> PrototypeSet:
        return PrototypeSet(self.per_class, self.classes, values, provenance)

    def same_as(self, other: PrototypeSet) -> bool:
        return (
            self.per_class == other.per_class
            and self.classes == other.classes
            and _bitwise_equal(self.values, other.values)
            and self.provenance == other.provenance
        )


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A prototype network f = F ∘ Q ∘ Z ∘ V.

    The classifier maps raw distances to logits: logits = weights @ s (+ bias), so
    own-class entries are stored negative to make a smaller distance a larger logit.
    """

    input_shape: tuple[int, int, int]
    backbone: tuple[LayerSpec, ...]
    extractor: tuple[LayerSpec, ...]
    prototypes: PrototypeSet
    classifier_weights: np.ndarray
    classifier_bias: np.ndarray | None = None

    def __post_init__(self) -> None:
        shape = tuple(int(extent) for extent in self.input_shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ShapeMismatchError("input_shape", "(H, W, C)", shape)
        object.__setattr__(self, "input_shape", shape)
        object.__setattr__(self, "backbone", tuple(self.backbone))
        extractor = tuple(self.extractor)
        if len(extractor) != 2:
            raise ConfigurationError(f"extractor needs exactly two layers, got {len(extractor)}")
        for layer in extractor:
            if layer.kind != "conv" or layer.weights.shape[:2] != (1, 1):
                raise ConfigurationError("extractor layers must be 1x1 convolutions")
            if layer.stride != 1 or layer.padding != 0:
                raise ConfigurationError("extractor convolutions use stride 1 and padding 0")
        if extractor[-1].out_channels != self.prototypes.channels:
            raise ShapeMismatchError(
                "extractor output channels", (self.prototypes.channels,), (extractor[-1].out_channels,)
            )
        object.__setattr__(self, "extractor", extractor)
        weights = frozen_array(self.classifier_weights, 2, "classifier weights")
        expected = (self.prototypes.classes, self.prototypes.count)
        if weights.shape != expected:
            raise ShapeMismatchError("classifier weights (C, K*C)", expected, weights.shape)
        object.__setattr__(self, "classifier_weights", weights)
        if self.classifier_bias is not None:
            bias = frozen_array(self.classifier_bias, 1, "classifier bias")
            if bias.shape != (self.prototypes.classes,):
                raise ShapeMismatchError("classifier bias", (self.prototypes.classes,), bias.shape)
            object.__setattr__(self, "classifier_bias", bias)

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        return self.backbone + self.extractor

    @property
    def latents_bounded(self) -> bool:
        """True when the final extractor activation is relu1, so every distance lies in [0, L]."""
        return self.extractor[-1].activation == "relu1"

    @property
    def classes(self) -> int:
        return self.prototypes.classes

    @property
    def per_class(self) -> int:
        return self.prototypes.per_class

    @property
    def latent_channels(self) -> int:
        return self.prototypes.channels

    def with_prototypes(self, prototypes: PrototypeSet) -> ModelSpec:
        return ModelSpec(
            self.input_shape,
            self.backbone,
            self.extractor,
            prototypes,
            self.classifier_weights,
            self.classifier_bias,
        )

    def same_as(self, other: ModelSpec) -> bool:
        if self.input_shape != other.input_shape:
            return False
        if len(self.layers) != len(other.layers) or len(self.backbone) != len(other.backbone):
            return False
        if not all(a.same_as(b) for a, b in zip(self.layers, other.layers)):
            return False
        if (self.classifier_bias is None) != (other.classifier_bias is None):
            return False
        if self.classifier_bias is not None and not _bitwise_equal(
            self.classifier_bias, other.classifier_bias
        ):
            return False
        return self.prototypes.same_as(other.prototypes) and _bitwise_equal(
            self.classifier_weights, other.classifier_weights
        )


@dataclass(frozen=True)
class LossConfig:
    cluster_weight: float = 0.5
    separation_weight: float = 0.5

    def __post_init__(self) -> None:
        for name in ("cluster_weight", "separation_weight"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be finite and nonnegative, got {value}")


def _bitwise_equal(left: np.ndarray, right: np.ndarray) -> bool:
    return left.shape == right.shape and left.tobytes() == right.tobytes()


@dataclass(frozen=True, eq=False)
class LabeledImage:
    image_id: str
    image: np.ndarray
    label: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "image", frozen_array(self.image, 3, f"image {self.image_id}"))
