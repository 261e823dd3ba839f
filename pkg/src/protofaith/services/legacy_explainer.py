from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Any

import numpy as np

from protofaith.domain.constants import (
    DEFAULT_BASELINE,
    DEFAULT_LEGACY_EPSILON,
    DEFAULT_LEGACY_PERCENTILE,
)
from protofaith.domain.errors import ClassIndexError, ConfigurationError, ShapeMismatchError
from protofaith.domain.model import ModelSpec, frozen_array
from protofaith.services.numerics import as_tensor
from protofaith.services.protopnet import latent_map, legacy_activation, squared_distance_map
from protofaith.services.shapley import AttributionMap, Target, evaluate_target

LOGGER = logging.getLogger(__name__)

LEGACY_ACTIVATIONS = ("flip", "log")


@dataclass(frozen=True, eq=False)
class LegacyMap:
    """The upscaled similarity map the original prototype pipeline shows for one prototype.

    box is (row_start, row_stop, col_start, col_stop), stops exclusive.
    """

    class_index: int
    proto_index: int
    raw: np.ndarray
    activation_map: np.ndarray
    upscaled: np.ndarray
    max_distance: float | None
    percentile: float
    threshold: float
    box: tuple[int, int, int, int]
    activation: str
    full_value: float
    empty_value: float
    baseline: float = DEFAULT_BASELINE

    @property
    def flipped(self) -> np.ndarray:
        return self.activation_map


def _resize_axis(values: np.ndarray, size: int, axis: int) -> np.ndarray:
    extent = values.shape[axis]
    coords = np.linspace(0.0, extent - 1, size) if size > 1 else np.zeros(1)
    lower = np.minimum(np.floor(coords).astype(int), extent - 1)
    upper = np.minimum(lower + 1, extent - 1)
    frac = coords - lower
    shape = [1] * values.ndim
    shape[axis] = size
    start = np.take(values, lower, axis=axis)
    stop = np.take(values, upper, axis=axis)
    return start + frac.reshape(shape) * (stop - start)


def upscale(values: Any, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with corner pixels aligned to corner cells.

    Corner pixels reproduce corner cells exactly and a constant map stays constant.
    """
    grid = as_tensor(values)
    if grid.ndim != 2 or min(grid.shape) < 1:
        raise ShapeMismatchError("map to upscale", "(H', W')", grid.shape)
    return _resize_axis(_resize_axis(grid, shape[0], 0), shape[1], 1)


def high_activation_box(values: np.ndarray, percentile: float) -> tuple[float, tuple[int, int, int, int]]:
    threshold = float(np.percentile(values, percentile, method="linear"))
    rows = np.flatnonzero((values >= threshold).any(axis=1))
    cols = np.flatnonzero((values >= threshold).any(axis=0))
    return threshold, (int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1)


def legacy_map(
    model: ModelSpec,
    image: Any,
    class_index: int,
    proto_index: int,
    activation: str = "flip",
    percentile: float = DEFAULT_LEGACY_PERCENTILE,
    epsilon: float = DEFAULT_LEGACY_EPSILON,
    baseline: float = DEFAULT_BASELINE,
) -> LegacyMap:
    if activation not in LEGACY_ACTIVATIONS:
        raise ConfigurationError(f"unknown legacy activation {activation!r}")
    if activation == "flip" and not model.latents_bounded:
        raise ConfigurationError(
            "legacy flip needs a relu1-bounded latent map; the maximum distance is undefined "
            f"for final activation {model.extractor[-1].activation!r}"
        )
    if not 0.0 <= percentile <= 100.0:
        raise ConfigurationError(f"percentile must lie in [0, 100], got {percentile}")
    if not (0 <= class_index < model.classes and 0 <= proto_index < model.per_class):
        raise ClassIndexError(
            f"prototype ({class_index}, {proto_index}) out of range for C={model.classes}, K={model.per_class}"
        )
    pixels = frozen_array(image, 3, "image")
    flat = model.prototypes.flat_index(class_index, proto_index)
    raw = squared_distance_map(latent_map(model, pixels), model.prototypes)[..., flat]

    if activation == "flip":
        max_distance: float | None = float(model.latent_channels)
        activated = max_distance - raw
    else:
        max_distance = None
        activated = legacy_activation(raw, epsilon)
    upscaled = upscale(activated, pixels.shape[:2])
    threshold, box = high_activation_box(upscaled, percentile)

    target = Target.distance(class_index, proto_index)
    ends = evaluate_target(model, target, np.stack([pixels, np.full(pixels.shape, baseline)]))
    LOGGER.debug(
        "Legacy %s map for prototype (%s, %s): threshold %.6g, box %s",
        activation,
        class_index,
        proto_index,
        threshold,
        box,
    )
    return LegacyMap(
        class_index,
        proto_index,
        frozen_array(raw),
        frozen_array(activated),
        frozen_array(upscaled),
        max_distance,
        float(percentile),
        threshold,
        box,
        activation,
        float(ends[0]),
        float(ends[1]),
        float(baseline),
    )


def legacy_as_attribution(legacy: LegacyMap) -> AttributionMap:
    return AttributionMap(
        legacy.upscaled,
        "legacy",
        Target.distance(legacy.class_index, legacy.proto_index),
        legacy.full_value,
        legacy.empty_value,
        legacy.baseline,
        "pixel",
    )


def sensitivity_violations(legacy: LegacyMap) -> int:
    """Pixels with non-zero upscaled attribution that fall outside the crop box."""
    row_start, row_stop, col_start, col_stop = legacy.box
    outside = np.ones(legacy.upscaled.shape, dtype=bool)
    outside[row_start:row_stop, col_start:col_stop] = False
    return int(np.count_nonzero(outside & (legacy.upscaled != 0)))
