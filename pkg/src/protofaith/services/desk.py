from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np

from protofaith.domain.errors import ConfigurationError
from protofaith.domain.model import LabeledImage, LayerSpec, ModelSpec, PrototypeSet
from protofaith.services.protopnet import latent_map, project_prototypes, validate_model

LOGGER = logging.getLogger(__name__)

OWN_CLASS_WEIGHT = -1.0
OTHER_CLASS_WEIGHT = 0.5
DOT_INTENSITY = (0.6, 1.0)
RESPONSE_TOL = 1e-6
MAX_DRAWS = 64


def classifier_weights(classes: int, per_class: int) -> np.ndarray:
    """Own-class entries -1, cross-class entries +0.5."""
    weights = np.full((classes, classes * per_class), OTHER_CLASS_WEIGHT)
    for class_index in range(classes):
        start = class_index * per_class
        weights[class_index, start : start + per_class] = OWN_CLASS_WEIGHT
    return weights


def build_desk_model(
    seed: int,
    input_shape: tuple[int, int, int] = (6, 6, 1),
    conv_channels: Sequence[int] = (4,),
    latent_channels: int = 4,
    classes: int = 2,
    per_class: int = 2,
    stride: int = 1,
    strides: Sequence[int] | None = None,
) -> ModelSpec:
    """Seeded random 3x3 conv backbone, two 1x1 extractor convs ending in relu1.

    `stride` applies to the last backbone conv; `strides` sets every conv instead.
    """
    if strides is None:
        strides = [1] * len(conv_channels)
        if strides:
            strides[-1] = stride
    if len(strides) != len(conv_channels):
        raise ConfigurationError(f"{len(strides)} strides for {len(conv_channels)} backbone convs")
    rng = np.random.default_rng(seed)
    backbone: list[LayerSpec] = []
    channels = input_shape[2]
    for index, out_channels in enumerate(conv_channels):
        scale = math.sqrt(2.0 / (9 * channels))
        backbone.append(
            LayerSpec(
                "conv",
                rng.normal(0.0, scale, size=(3, 3, channels, out_channels)),
                rng.normal(0.0, 0.05, size=out_channels),
                stride=int(strides[index]),
                padding=1,
                activation="relu",
            )
        )
        channels = out_channels
    extractor = (
        LayerSpec(
            "conv",
            rng.normal(0.0, math.sqrt(2.0 / channels), size=(1, 1, channels, latent_channels)),
            np.zeros(latent_channels),
            activation="relu",
        ),
        LayerSpec(
            "conv",
            rng.normal(0.0, math.sqrt(1.0 / latent_channels), size=(1, 1, latent_channels, latent_channels)),
            np.full(latent_channels, 0.25),
            activation="relu1",
        ),
    )
    prototypes = PrototypeSet(
        per_class, classes, rng.uniform(0.0, 1.0, size=(classes * per_class, latent_channels))
    )
    model = ModelSpec(
        input_shape, tuple(backbone), extractor, prototypes, classifier_weights(classes, per_class)
    )
    validate_model(model)
    return model


def make_desk_dataset(
    seed: int,
    input_shape: tuple[int, int, int] = (6, 6, 1),
    classes: int = 2,
    images_per_class: int = 3,
) -> list[LabeledImage]:
    """Noisy grayscale images with a bright 2x2 patch whose position encodes the class."""
    rng = np.random.default_rng(seed)
    height, width, channels = input_shape
    anchors = _class_anchors(height, width, classes)
    dataset: list[LabeledImage] = []
    for class_index in range(classes):
        row, col = anchors[class_index]
        for number in range(images_per_class):
            image = rng.uniform(0.0, 0.2, size=(height, width, channels))
            image[row : row + 2, col : col + 2, :] += rng.uniform(0.7, 0.8)
            dataset.append(LabeledImage(f"c{class_index}_{number:03d}", image, class_index))
    return dataset


def build_projected_desk_model(
    seed: int,
    input_shape: tuple[int, int, int] = (6, 6, 1),
    conv_channels: Sequence[int] = (4,),
    latent_channels: int = 4,
    classes: int = 2,
    per_class: int = 2,
    images_per_class: int = 3,
) -> tuple[ModelSpec, list[LabeledImage]]:
    model = build_desk_model(
        seed, input_shape, conv_channels, latent_channels, classes, per_class
    )
    dataset = make_desk_dataset(seed + 1, input_shape, classes, images_per_class)
    projected = model.with_prototypes(project_prototypes(model, dataset))
    LOGGER.info(
        "Desk model seed=%s: %s classes x %s prototypes, %s training images",
        seed,
        classes,
        per_class,
        len(dataset),
    )
    return projected, dataset


def _class_anchors(height: int, width: int, classes: int) -> list[tuple[int, int]]:
    corners = [
        (0, 0),
        (max(height - 2, 0), max(width - 2, 0)),
        (0, max(width - 2, 0)),
        (max(height - 2, 0), 0),
    ]
    anchors = []
    for class_index in range(classes):
        if class_index < len(corners):
            anchors.append(corners[class_index])
        else:
            offset = class_index - len(corners) + 1
            anchors.append((min(offset, max(height - 2, 0)), min(offset, max(width - 2, 0))))
    return anchors


def make_dot_dataset(
    seed: int,
    input_shape: tuple[int, int, int] = (6, 6, 1),
    classes: int = 2,
    images_per_class: int = 3,
) -> list[LabeledImage]:
    """Blank images holding one bright pixel whose position encodes the class."""
    rng = np.random.default_rng(seed)
    dataset: list[LabeledImage] = []
    for class_index, (row, col) in enumerate(_dot_positions(input_shape[0], input_shape[1], classes)):
        for number in range(images_per_class):
            image = np.zeros(input_shape)
            image[row, col, :] = rng.uniform(*DOT_INTENSITY)
            dataset.append(LabeledImage(f"c{class_index}_{number:03d}", image, class_index))
    return dataset


def build_dot_study_model(
    seed: int,
    input_shape: tuple[int, int, int] = (6, 6, 1),
    conv_channels: Sequence[int] = (4, 4),
    latent_channels: int = 4,
    classes: int = 2,
    per_class: int = 2,
    images_per_class: int = 3,
) -> tuple[ModelSpec, list[LabeledImage]]:
    """Projected model on dot images; every backbone conv has stride 2.

    Weights are redrawn until each class has latent vectors away from all blank-image
    latents. Prototypes start on such vectors, so every projected prototype keeps a
    positive distance to the blank image.
    """
    dataset = make_dot_dataset(seed + 1, input_shape, classes, images_per_class)
    draws = np.random.default_rng(seed)
    for attempt in range(MAX_DRAWS):
        model = build_desk_model(
            int(draws.integers(2**31)),
            input_shape,
            conv_channels,
            latent_channels,
            classes,
            per_class,
            strides=[2] * len(conv_channels),
        )
        start = _responsive_prototypes(model, dataset, draws)
        if start is not None:
            break
        LOGGER.debug("Dot study seed=%s: draw %s leaves a class silent", seed, attempt)
    else:
        raise ConfigurationError(f"no responsive dot model within {MAX_DRAWS} draws for seed {seed}")
    model = model.with_prototypes(start)
    projected = model.with_prototypes(project_prototypes(model, dataset))
    LOGGER.info(
        "Dot study seed=%s: %s classes x %s prototypes after %s draws",
        seed,
        classes,
        per_class,
        attempt + 1,
    )
    return projected, dataset


def _responsive_prototypes(
    model: ModelSpec, dataset: Sequence[LabeledImage], rng: np.random.Generator
) -> PrototypeSet | None:
    channels = model.prototypes.channels
    blank = latent_map(model, np.zeros(model.input_shape)).reshape(-1, channels)
    values: list[np.ndarray] = []
    for class_index in range(model.classes):
        images = np.stack([item.image for item in dataset if item.label == class_index])
        latents = latent_map(model, images).reshape(-1, channels)
        gaps = ((latents[:, None, :] - blank[None, :, :]) ** 2).sum(axis=2).min(axis=1)
        candidates = np.flatnonzero(gaps > RESPONSE_TOL)
        if candidates.size == 0:
            return None
        chosen = rng.choice(candidates, size=model.per_class, replace=candidates.size < model.per_class)
        values.extend(latents[chosen])
    return PrototypeSet(model.per_class, model.classes, np.array(values))


def _dot_positions(height: int, width: int, classes: int) -> list[tuple[int, int]]:
    """Non-corner cells nearest the centre, ties in row-major order."""
    corners = {(0, 0), (0, width - 1), (height - 1, 0), (height - 1, width - 1)}
    centre_row, centre_col = (height - 1) / 2, (width - 1) / 2
    cells = sorted(
        ((row, col) for row in range(height) for col in range(width) if (row, col) not in corners),
        key=lambda cell: (abs(cell[0] - centre_row) + abs(cell[1] - centre_col), cell),
    )
    if classes > len(cells):
        raise ConfigurationError(f"{height}x{width} images hold at most {len(cells)} dot classes")
    return cells[:classes]


def build_separable_fixture(
    seed: int, latent_channels: int = 4, spread: float = 0.1
) -> tuple[ModelSpec, np.ndarray]:
    """A 3x3 image feeding one latent position through units that never clip.

    Every pre-activation moves by at most `spread` over all coalitions and is centred on
    0.5; the extractor convs are diagonal. Each latent channel is then affine in the
    pixels and the prototype distance is a quadratic.
    """
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.2, 1.0, size=(3, 3, 1))
    kernel = rng.normal(size=(3, 3, 1, latent_channels))
    kernel *= spread / np.abs(kernel * image[..., None]).sum(axis=(0, 1, 2))
    full = (kernel * image[..., None]).sum(axis=(0, 1, 2))
    backbone = (LayerSpec("conv", kernel, 0.5 - 0.5 * full, activation="relu"),)
    gains = rng.uniform(0.5, 1.0, size=(2, latent_channels))
    extractor = tuple(
        LayerSpec(
            "conv",
            np.diag(gain).reshape(1, 1, latent_channels, latent_channels),
            0.5 - 0.5 * gain,
            activation=activation,
        )
        for gain, activation in zip(gains, ("relu", "relu1"))
    )
    prototypes = PrototypeSet(1, 1, rng.uniform(0.4, 0.6, size=(1, latent_channels)))
    model = ModelSpec((3, 3, 1), backbone, extractor, prototypes, classifier_weights(1, 1))
    validate_model(model)
    return model, image
