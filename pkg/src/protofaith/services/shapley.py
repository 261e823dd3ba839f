"""Shapley attributions for masked-image set functions.

Three engines share one set function: exact enumeration (the oracle), permutation
sampling, and DASP, which replaces the average over coalitions of size d by one pass of
the Gaussian twin per (feature, size).
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from typing import Any, Sequence

import numpy as np
from scipy import stats

from protofaith.domain.constants import (
    DEFAULT_BASELINE,
    DEFAULT_DASP_SAMPLES,
    GRANULARITIES,
    MAX_EXACT_FEATURES,
    METHOD_TAGS,
    TARGET_KINDS,
)
from protofaith.domain.errors import (
    ClassIndexError,
    ConfigurationError,
    EnumerationLimitError,
    ShapeMismatchError,
)
from protofaith.domain.model import ModelSpec, frozen_array
from protofaith.services.gauss_prop import GaussianTensor, g_forward, gaussian_from_coalition
from protofaith.services.numerics import affine, as_tensor
from protofaith.services.protopnet import classify, distance_values, latent_map, validate_model

LOGGER = logging.getLogger(__name__)

COALITION_CHUNK = 2048


@dataclass(frozen=True)
class Target:
    """Which scalar of the network is explained."""

    kind: str
    class_index: int = 0
    proto_index: int = 0
    row: int = 0
    col: int = 0
    channel: int = 0

    def __post_init__(self) -> None:
        if self.kind not in TARGET_KINDS:
            raise ConfigurationError(f"unknown target kind {self.kind!r}")

    @classmethod
    def distance(cls, class_index: int, proto_index: int) -> Target:
        return cls("distance", class_index=class_index, proto_index=proto_index)

    @classmethod
    def logit(cls, class_index: int) -> Target:
        return cls("logit", class_index=class_index)

    @classmethod
    def latent(cls, row: int, col: int, channel: int = 0) -> Target:
        return cls("latent", row=row, col=col, channel=channel)

    def describe(self) -> str:
        if self.kind == "distance":
            return f"distance[{self.class_index},{self.proto_index}]"
        if self.kind == "logit":
            return f"logit[{self.class_index}]"
        return f"latent[{self.row},{self.col},{self.channel}]"

    def check(self, model: ModelSpec) -> None:
        if self.kind in ("distance", "logit") and not 0 <= self.class_index < model.classes:
            raise ClassIndexError(f"class {self.class_index} out of range for C={model.classes}")
        if self.kind == "distance" and not 0 <= self.proto_index < model.per_class:
            raise ClassIndexError(
                f"prototype index {self.proto_index} out of range for K={model.per_class}"
            )
        if self.kind == "latent":
            height, width, channels = validate_model(model)
            if not (0 <= self.row < height and 0 <= self.col < width and 0 <= self.channel < channels):
                raise ShapeMismatchError(
                    "latent target cell", (height, width, channels), (self.row, self.col, self.channel)
                )


def evaluate_target(model: ModelSpec, target: Target, images: Any) -> np.ndarray:
    """The explained scalar for a batch of images (..., H, W, C) -> (...)."""
    latent = latent_map(model, images)
    if target.kind == "latent":
        return latent[..., target.row, target.col, target.channel]
    values = distance_values(latent, model.prototypes)
    if target.kind == "distance":
        return values[..., model.prototypes.flat_index(target.class_index, target.proto_index)]
    return classify(model, values)[..., target.class_index]


def _twin_target(model: ModelSpec, target: Target, x: GaussianTensor) -> np.ndarray:
    result = g_forward(model, x)
    if target.kind == "latent":
        return result.latent.mean[..., target.row, target.col, target.channel]
    if target.kind == "distance":
        flat = model.prototypes.flat_index(target.class_index, target.proto_index)
        return result.distance_mean[..., flat]
    logits = affine(result.distance_mean, model.classifier_weights, model.classifier_bias)
    return logits[..., target.class_index]


@dataclass(frozen=True, eq=False)
class SetFunctionSpec:
    """f(S): the target with every feature outside S replaced by the baseline."""

    model: ModelSpec
    target: Target
    image: np.ndarray
    baseline: float = DEFAULT_BASELINE
    granularity: str = "pixel"

    def __post_init__(self) -> None:
        image = frozen_array(self.image, 3, "image")
        if image.shape != self.model.input_shape:
            raise ShapeMismatchError("image", self.model.input_shape, image.shape)
        if not np.all(np.isfinite(image)):
            raise ConfigurationError("image contains non-finite values")
        if not math.isfinite(self.baseline):
            raise ConfigurationError(f"baseline must be finite, got {self.baseline}")
        if self.granularity not in GRANULARITIES:
            raise ConfigurationError(f"unknown feature granularity {self.granularity!r}")
        self.target.check(self.model)
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "baseline", float(self.baseline))

    @property
    def layout(self) -> tuple[int, ...]:
        height, width, channels = self.image.shape
        return (height, width) if self.granularity == "pixel" else (height, width, channels)

    @property
    def feature_count(self) -> int:
        return int(np.prod(self.layout))

    def element_mask(self, feature_mask: np.ndarray) -> np.ndarray:
        """Expand (..., n) feature membership to (..., H, W, C) element membership."""
        mask = np.asarray(feature_mask, dtype=bool)
        if mask.shape[-1:] != (self.feature_count,):
            raise ShapeMismatchError("coalition mask", (self.feature_count,), mask.shape[-1:])
        spatial = mask.reshape(mask.shape[:-1] + self.layout)
        if self.granularity == "pixel":
            return np.broadcast_to(spatial[..., None], spatial.shape + (self.image.shape[2],))
        return spatial

    def compose(self, feature_mask: np.ndarray) -> np.ndarray:
        return np.where(self.element_mask(feature_mask), self.image, self.baseline)


@dataclass(frozen=True, eq=False)
class AttributionMap:
    """Per-feature attributions laid out like the image.

    full_value and empty_value are f(P) and f(empty), kept so the completeness residual
    is always reported.
    """

    values: np.ndarray
    method: str
    target: Target
    full_value: float
    empty_value: float
    baseline: float = DEFAULT_BASELINE
    granularity: str = "pixel"
    standard_error: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.method not in METHOD_TAGS:
            raise ConfigurationError(f"unknown attribution method {self.method!r}")
        values = frozen_array(self.values, None, "attribution")
        if not np.all(np.isfinite(values)):
            raise ConfigurationError(f"{self.method} attribution contains non-finite entries")
        object.__setattr__(self, "values", values)
        if self.standard_error is not None:
            object.__setattr__(self, "standard_error", frozen_array(self.standard_error))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def residual(self) -> float:
        return float(np.sum(self.values) - (self.full_value - self.empty_value))

    def relevance(self) -> np.ndarray:
        """Similarity-oriented scores; larger means more relevant for the match."""
        if self.target.kind == "distance" and self.method != "legacy":
            return -self.values
        return self.values

    def ranking(self) -> np.ndarray:
        """Flat feature indices by decreasing relevance, ties in row-major order."""
        return np.argsort(-self.relevance().reshape(-1), kind="stable")


@dataclass(frozen=True)
class DaspConfig:
    samples: int = DEFAULT_DASP_SAMPLES
    batch_size: int = 64

    def __post_init__(self) -> None:
        if self.samples < 1:
            raise ConfigurationError(f"DASP needs at least one coalition size, got {self.samples}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")


def evaluate_coalitions(spec: SetFunctionSpec, masks: Any) -> np.ndarray:
    """f(S) for a stack of boolean coalition masks (..., n)."""
    mask = np.asarray(masks, dtype=bool)
    flat = mask.reshape(-1, spec.feature_count)
    out = np.empty(flat.shape[0], dtype=np.float64)
    for start in range(0, flat.shape[0], COALITION_CHUNK):
        chunk = flat[start : start + COALITION_CHUNK]
        out[start : start + chunk.shape[0]] = evaluate_target(spec.model, spec.target, spec.compose(chunk))
    return out.reshape(mask.shape[:-1])


def _endpoints(spec: SetFunctionSpec) -> tuple[float, float]:
    ends = evaluate_coalitions(spec, np.array([[True] * spec.feature_count, [False] * spec.feature_count]))
    return float(ends[0]), float(ends[1])


def shapley_weights(features: int) -> np.ndarray:
    """|S|! (n - |S| - 1)! / n! for |S| = 0 .. n - 1."""
    total = math.factorial(features)
    return np.array(
        [math.factorial(size) * math.factorial(features - size - 1) / total for size in range(features)]
    )


def exact_shapley(spec: SetFunctionSpec, max_features: int = MAX_EXACT_FEATURES) -> AttributionMap:
    """Enumerate all 2^n coalitions; bit i of a coalition code is feature i (row-major)."""
    if max_features > MAX_EXACT_FEATURES:
        raise ConfigurationError(f"enumeration limit cannot exceed {MAX_EXACT_FEATURES}")
    n = spec.feature_count
    if n > max_features:
        raise EnumerationLimitError(n, max_features)
    codes = np.arange(1 << n, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(n)) & 1
    values = evaluate_coalitions(spec, bits.astype(bool))
    sizes = bits.sum(axis=1)
    weights = shapley_weights(n)

    psi = np.zeros(n)
    for feature in range(n):
        without = codes[bits[:, feature] == 0]
        marginal = values[without | (1 << feature)] - values[without]
        psi[feature] = float(np.sum(weights[sizes[without]] * marginal))
    result = AttributionMap(
        psi.reshape(spec.layout),
        "oracle",
        spec.target,
        float(values[-1]),
        float(values[0]),
        spec.baseline,
        spec.granularity,
    )
    LOGGER.debug("Exact Shapley over %s features: residual %.3g", n, result.residual)
    return result


def sampled_shapley(spec: SetFunctionSpec, permutations: int, seed: int) -> AttributionMap:
    """Average marginal contributions along random feature orderings."""
    if permutations < 1:
        raise ConfigurationError(f"permutations must be positive, got {permutations}")
    n = spec.feature_count
    rng = np.random.default_rng(seed)
    orders = np.stack([rng.permutation(n) for _ in range(permutations)])
    rank = np.argsort(orders, axis=1)
    steps = np.arange(n + 1)
    # masks[p, t, i]: feature i is among the first t features of ordering p
    masks = rank[:, None, :] < steps[None, :, None]
    values = evaluate_coalitions(spec, masks)
    gains = np.diff(values, axis=1)
    contributions = np.zeros((permutations, n))
    np.put_along_axis(contributions, orders, gains, axis=1)
    psi = contributions.mean(axis=0)
    if permutations > 1:
        error = contributions.std(axis=0, ddof=1) / math.sqrt(permutations)
    else:
        error = np.zeros(n)
    return AttributionMap(
        psi.reshape(spec.layout),
        "sampler",
        spec.target,
        float(values[0, -1]),
        float(values[0, 0]),
        spec.baseline,
        spec.granularity,
        standard_error=error.reshape(spec.layout),
    )


def coalition_sizes(features: int, samples: int) -> np.ndarray:
    """Evenly spaced sizes over 0 .. n-1 including both endpoints."""
    if features < 1:
        raise ConfigurationError("need at least one feature")
    samples = min(samples, features)
    if samples == 1:
        return np.array([(features - 1) // 2])
    return np.unique(np.rint(np.linspace(0, features - 1, samples)).astype(int))


def size_weights(sizes: np.ndarray, features: int) -> np.ndarray:
    """Trapezoidal weights: every size 0 .. n-1 is interpolated from its sampled neighbours."""
    if sizes.shape[0] == 1:
        return np.ones(1)
    weights = np.zeros(sizes.shape[0])
    for size in range(features):
        upper = int(np.searchsorted(sizes, size))
        if sizes[upper] == size:
            weights[upper] += 1.0
            continue
        lower = upper - 1
        share = (size - sizes[lower]) / (sizes[upper] - sizes[lower])
        weights[lower] += 1.0 - share
        weights[upper] += share
    return weights / features


def dasp_shapley(spec: SetFunctionSpec, config: DaspConfig | None = None) -> AttributionMap:
    config = config or DaspConfig()
    n = spec.feature_count
    sizes = coalition_sizes(n, config.samples)
    if config.samples > n:
        LOGGER.info("DASP budget %s capped at %s coalition sizes", config.samples, n)
    weights = size_weights(sizes, n)
    one_hot = spec.element_mask(np.eye(n, dtype=bool))

    psi = np.zeros(n)
    for size, weight in zip(sizes, weights):
        q = size / (n - 1) if n > 1 else 0.0
        background = gaussian_from_coalition(spec.image, q, spec.baseline)
        per_size = np.empty(n)
        for start in range(0, n, config.batch_size):
            fixed = one_hot[start : start + config.batch_size]
            absent = np.where(fixed, spec.baseline, background.mean)
            present = np.where(fixed, spec.image, background.mean)
            variance = np.where(fixed, 0.0, background.variance)
            batch = GaussianTensor(
                np.stack([absent, present], axis=1),
                np.broadcast_to(variance[:, None], variance.shape[:1] + (2,) + variance.shape[1:]),
            )
            means = _twin_target(spec.model, spec.target, batch)
            per_size[start : start + fixed.shape[0]] = means[:, 1] - means[:, 0]
        psi += weight * per_size
        LOGGER.debug("DASP coalition size %s (q=%.4f, weight %.4f) done", size, q, weight)
    full, empty = _endpoints(spec)
    return AttributionMap(
        psi.reshape(spec.layout), "dasp", spec.target, full, empty, spec.baseline, spec.granularity
    )


def attribution_for_logit(
    maps: Sequence[AttributionMap],
    classifier_weights: Any,
    class_index: int,
    classifier_bias: Any | None = None,
) -> AttributionMap:
    """Combine per-prototype distance maps into a logit map through the classifier row."""
    weights = as_tensor(classifier_weights)
    if weights.ndim != 2 or len(maps) != weights.shape[1]:
        raise ShapeMismatchError("per-prototype maps", (weights.shape[-1],), (len(maps),))
    if not 0 <= class_index < weights.shape[0]:
        raise ClassIndexError(f"class {class_index} out of range for C={weights.shape[0]}")
    first = maps[0]
    for flat, item in enumerate(maps):
        if item.target.kind != "distance":
            raise ConfigurationError(f"map {flat} explains {item.target.describe()}, not a distance")
        if (
            item.shape != first.shape
            or item.method != first.method
            or item.baseline != first.baseline
            or item.granularity != first.granularity
        ):
            raise ConfigurationError(f"map {flat} was computed under a different set function")
    row = weights[class_index]
    values = np.zeros(first.shape)
    full = 0.0
    empty = 0.0
    for flat, item in enumerate(maps):
        values += row[flat] * item.values
        full += row[flat] * item.full_value
        empty += row[flat] * item.empty_value
    if classifier_bias is not None:
        bias = float(as_tensor(classifier_bias)[class_index])
        full += bias
        empty += bias
    return AttributionMap(
        values,
        first.method,
        Target.logit(class_index),
        full,
        empty,
        first.baseline,
        first.granularity,
    )


def rank_agreement(candidate: AttributionMap, reference: AttributionMap) -> dict[str, Any]:
    """Spearman correlation and mean absolute error relative to max |reference|."""
    if candidate.shape != reference.shape:
        raise ShapeMismatchError("attribution maps", reference.shape, candidate.shape)
    a = candidate.values.reshape(-1)
    b = reference.values.reshape(-1)
    mae = float(np.mean(np.abs(a - b)))
    scale = float(np.max(np.abs(b)))
    spearman = None
    if np.ptp(a) > 0 and np.ptp(b) > 0:
        spearman = float(stats.spearmanr(a, b).statistic)
    return {
        "spearman": spearman,
        "mae": mae,
        "relative_mae": mae / scale if scale > 0 else None,
        "max_abs_reference": scale,
    }
