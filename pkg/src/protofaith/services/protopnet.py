from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
import logging
from typing import Any, Sequence

import numpy as np

from protofaith.domain.constants import ARGMIN_TOL, DEFAULT_LEGACY_EPSILON
from protofaith.domain.errors import (
    ClassIndexError,
    ConfigurationError,
    ShapeMismatchError,
)
from protofaith.domain.model import (
    LabeledImage,
    LayerSpec,
    LossConfig,
    ModelSpec,
    PrototypeSet,
    ProvenanceRecord,
)
from protofaith.services.numerics import (
    activate,
    affine,
    as_tensor,
    conv2d,
    conv_output_extent,
    ensure_finite,
    log_softmax,
)

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DistanceVector:
    values: np.ndarray
    positions: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, eq=False)
class ForwardResult:
    latent: np.ndarray
    distances: DistanceVector
    logits: np.ndarray
    probabilities: np.ndarray

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.logits))


@dataclass(frozen=True, eq=False)
class ContributionScores:
    class_index: int
    scores: np.ndarray
    remainder: float
    log_probability: float

    @property
    def total(self) -> float:
        return float(np.sum(self.scores))


def validate_model(model: ModelSpec) -> tuple[int, int, int]:
    """Shape-check the layer chain end to end; return the latent (H', W', L)."""
    height, width, channels = model.input_shape
    for index, layer in enumerate(model.layers):
        if layer.kind == "conv":
            kh, kw, c_in, _ = layer.weights.shape
            if c_in != channels:
                raise ShapeMismatchError(f"layer {index} input channels", (c_in,), (channels,))
            if kh > height + 2 * layer.padding or kw > width + 2 * layer.padding:
                raise ShapeMismatchError(
                    f"layer {index} kernel vs padded input",
                    (height + 2 * layer.padding, width + 2 * layer.padding),
                    (kh, kw),
                )
            height = conv_output_extent(height, kh, layer.stride, layer.padding)
            width = conv_output_extent(width, kw, layer.stride, layer.padding)
        else:
            flat = height * width * channels
            if layer.weights.shape[1] != flat:
                raise ShapeMismatchError(
                    f"layer {index} affine input", (layer.weights.shape[1],), (flat,)
                )
            height, width = 1, 1
        channels = layer.out_channels
    if channels != model.latent_channels:
        raise ShapeMismatchError("latent channels", (model.latent_channels,), (channels,))
    return height, width, channels


def apply_layer(layer: LayerSpec, values: np.ndarray) -> np.ndarray:
    if layer.kind == "conv":
        out = conv2d(values, layer.weights, layer.bias, layer.stride, layer.padding)
    else:
        batch = values.shape[:-3]
        flat = values.reshape(batch + (-1,))
        out = affine(flat, layer.weights, layer.bias).reshape(batch + (1, 1, layer.out_channels))
    return activate(out, layer.activation)


def latent_map(model: ModelSpec, images: Any) -> np.ndarray:
    """Run V then Z on one image (H, W, C) or a batch (..., H, W, C)."""
    values = as_tensor(images)
    if values.ndim < 3 or values.shape[-3:] != model.input_shape:
        raise ShapeMismatchError("image", model.input_shape, values.shape[-3:])
    for index, layer in enumerate(model.layers):
        values = ensure_finite(apply_layer(layer, values), index)
    return values


def squared_distance_map(latent: Any, prototypes: PrototypeSet) -> np.ndarray:
    """Squared L2 between every latent vector and every prototype: (..., H', W', P).

    Sums run over channels in ascending order.
    """
    z = as_tensor(latent)
    if z.ndim < 3 or z.shape[-1] != prototypes.channels:
        raise ShapeMismatchError(
            "latent channels", (prototypes.channels,), (z.shape[-1] if z.ndim else 0,)
        )
    out = np.zeros(z.shape[:-1] + (prototypes.count,), dtype=np.float64)
    for channel in range(prototypes.channels):
        diff = z[..., channel, None] - prototypes.values[:, channel]
        out += diff * diff
    return out


def distance_values(latent: Any, prototypes: PrototypeSet) -> np.ndarray:
    maps = squared_distance_map(latent, prototypes)
    return maps.min(axis=(-3, -2))


def distances(latent: Any, prototypes: PrototypeSet) -> DistanceVector:
    """Per-prototype minimum squared L2 with ties broken by smallest row, then column."""
    maps = squared_distance_map(latent, prototypes)
    if maps.ndim != 3:
        raise ShapeMismatchError("latent", "(H', W', L)", as_tensor(latent).shape)
    height, width, count = maps.shape
    flat = maps.reshape(height * width, count)
    best = np.argmin(flat, axis=0)
    values = flat[best, np.arange(count)].copy()
    values.flags.writeable = False
    positions = tuple((int(index // width), int(index % width)) for index in best)
    return DistanceVector(values, positions)


def classify(model: ModelSpec, distance_values: Any) -> np.ndarray:
    return affine(as_tensor(distance_values), model.classifier_weights, model.classifier_bias)


def forward(model: ModelSpec, image: Any) -> ForwardResult:
    latent = latent_map(model, image)
    if latent.ndim != 3:
        raise ShapeMismatchError("image", model.input_shape, as_tensor(image).shape)
    vector = distances(latent, model.prototypes)
    logits = ensure_finite(classify(model, vector.values), "classifier")
    probabilities = np.exp(log_softmax(logits))
    return ForwardResult(latent, vector, logits, probabilities)


def contribution_scores(
    model: ModelSpec,
    distance_vector: DistanceVector | Any,
    class_index: int,
) -> ContributionScores:
    """Split log P(y=c|I) over the K own-class prototypes.

    Psi_k = w[c, (c, k)] * s_(c, k) + remainder, where the shared remainder carries
    -log R (and any cross-class or bias contribution) divided by K.
    """
    if not 0 <= class_index < model.classes:
        raise ClassIndexError(f"class {class_index} out of range for C={model.classes}")
    values = (
        distance_vector.values
        if isinstance(distance_vector, DistanceVector)
        else as_tensor(distance_vector)
    )
    if values.shape != (model.prototypes.count,):
        raise ShapeMismatchError("distance vector", (model.prototypes.count,), values.shape)
    logits = classify(model, values)
    log_probability = float(log_softmax(logits)[class_index])
    per_class = model.per_class
    own = np.array(
        [
            model.classifier_weights[class_index, model.prototypes.flat_index(class_index, k)]
            * values[model.prototypes.flat_index(class_index, k)]
            for k in range(per_class)
        ]
    )
    remainder = (log_probability - float(np.sum(own))) / per_class
    return ContributionScores(class_index, own + remainder, remainder, log_probability)


def legacy_activation(distance: Any, epsilon: float = DEFAULT_LEGACY_EPSILON) -> Any:
    """log((s + 1) / (s + eps)), the similarity the original architecture fed to F."""
    if not epsilon > 0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    values = as_tensor(distance)
    if np.any(values < 0):
        raise ConfigurationError("distances must be nonnegative")
    result = np.log((values + 1.0) / (values + epsilon))
    return float(result) if result.ndim == 0 else result


def _check_label(prototypes: PrototypeSet, label: int) -> None:
    if not 0 <= label < prototypes.classes:
        raise ClassIndexError(f"label {label} out of range for C={prototypes.classes}")


def cluster_loss(latent: Any, prototypes: PrototypeSet, label: int) -> float:
    _check_label(prototypes, label)
    values = distance_values(latent, prototypes)
    start = prototypes.flat_index(label, 0)
    return float(values[start : start + prototypes.per_class].min())


def separation_loss(latent: Any, prototypes: PrototypeSet, label: int) -> float:
    _check_label(prototypes, label)
    if prototypes.classes == 1:
        raise ConfigurationError("no other-class prototypes for the separation cost")
    values = distance_values(latent, prototypes)
    start = prototypes.flat_index(label, 0)
    others = np.concatenate([values[:start], values[start + prototypes.per_class :]])
    return float(others.min())


def total_loss(
    model: ModelSpec,
    image: Any,
    label: int,
    config: LossConfig | None = None,
) -> dict[str, float]:
    """Cross entropy plus weighted cluster and separation costs (evaluation only)."""
    config = config or LossConfig()
    result = forward(model, image)
    _check_label(model.prototypes, label)
    cross_entropy = -float(log_softmax(result.logits)[label])
    cluster = cluster_loss(result.latent, model.prototypes, label)
    separation = (
        separation_loss(result.latent, model.prototypes, label) if model.classes > 1 else None
    )
    total = cross_entropy + config.cluster_weight * cluster
    if separation is not None:
        total += config.separation_weight * separation
    return {
        "cross_entropy": cross_entropy,
        "cluster": cluster,
        "separation": separation,
        "total": total,
    }


def project_prototypes(
    model: ModelSpec,
    training_images: Sequence[LabeledImage],
) -> PrototypeSet:
    """Replace each prototype by its closest latent vector among same-class images.

    Candidates are scanned in image order, then row, then column; the first strict
    minimum wins, so duplicates across prototypes are allowed.
    """
    prototypes = model.prototypes
    by_class: dict[int, list[LabeledImage]] = defaultdict(list)
    for item in training_images:
        _check_label(prototypes, item.label)
        by_class[item.label].append(item)
    missing = [c for c in range(prototypes.classes) if not by_class.get(c)]
    if missing:
        raise ConfigurationError(f"no training images for classes {missing}")

    values = np.array(prototypes.values, dtype=np.float64, copy=True)
    records: list[ProvenanceRecord] = []
    for class_index in range(prototypes.classes):
        items = by_class[class_index]
        latents = latent_map(model, np.stack([item.image for item in items]))
        maps = squared_distance_map(latents, prototypes)
        n_images, height, width, _ = maps.shape
        for proto_index in range(prototypes.per_class):
            flat = prototypes.flat_index(class_index, proto_index)
            candidates = maps[..., flat].reshape(-1)
            best = int(np.argmin(candidates))
            image_pos, cell = divmod(best, height * width)
            row, col = divmod(cell, width)
            values[flat] = latents[image_pos, row, col]
            records.append(
                ProvenanceRecord(class_index, proto_index, items[image_pos].image_id, row, col)
            )
            LOGGER.debug(
                "Prototype (%s, %s) projected onto %s at (%s, %s), distance %.6g",
                class_index,
                proto_index,
                items[image_pos].image_id,
                row,
                col,
                candidates[best],
            )
    projected = prototypes.with_provenance(values, tuple(records))
    groups = duplicate_prototypes(projected)
    if groups:
        LOGGER.warning("Projection produced duplicate prototypes: %s", groups)
    return projected


def duplicate_prototypes(prototypes: PrototypeSet) -> list[tuple[int, ...]]:
    """Groups (by flat index) of prototypes with bitwise identical vectors."""
    seen: dict[bytes, list[int]] = {}
    for flat in range(prototypes.count):
        seen.setdefault(prototypes.values[flat].tobytes(), []).append(flat)
    return [tuple(group) for group in seen.values() if len(group) > 1]



def duplicate_of(prototypes: PrototypeSet) -> dict[int, int]:
    """Each repeated prototype's flat index mapped to the first flat index of its group."""
    return {flat: group[0] for group in duplicate_prototypes(prototypes) for flat in group[1:]}


def check_argmin_consistency(latent: Any, prototypes: PrototypeSet, vector: DistanceVector) -> bool:
    z = as_tensor(latent)
    for flat, (row, col) in enumerate(vector.positions):
        diff = prototypes.values[flat] - z[row, col]
        if abs(float(np.sum(diff * diff)) - float(vector.values[flat])) > ARGMIN_TOL:
            return False
    return True
