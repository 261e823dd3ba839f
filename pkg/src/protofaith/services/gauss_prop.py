"""Lightweight probabilistic twin of a prototype network.

Every activation is an independent Gaussian carried as an element-wise (mean, variance)
pair. Layers map moments to moments in closed form; zero-variance entries take exact
deterministic shortcuts so a point-mass input reproduces the deterministic network.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from typing import Any, Sequence

import numpy as np
from scipy import special

from protofaith.domain.constants import SATURATION_BOUND, VARIANCE_CLAMP_TOL
from protofaith.domain.errors import (
    ConfigurationError,
    ShapeMismatchError,
    UnsupportedLayerError,
)
from protofaith.domain.model import LayerSpec, ModelSpec, PrototypeSet
from protofaith.services.numerics import affine, as_tensor, bounded_relu, conv2d

LOGGER = logging.getLogger(__name__)

_SQRT_2 = math.sqrt(2.0)
_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class GaussianTensor:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self) -> None:
        mean = as_tensor(self.mean)
        variance = as_tensor(self.variance)
        if mean.shape != variance.shape:
            raise ShapeMismatchError("gaussian variance", mean.shape, variance.shape)
        if np.any(variance < 0):
            raise ConfigurationError(f"negative variance (min {float(variance.min())!r})")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)

    @classmethod
    def point(cls, values: Any) -> GaussianTensor:
        mean = as_tensor(values)
        return cls(mean, np.zeros_like(mean))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.mean.shape)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


@dataclass(frozen=True, eq=False)
class GaussianForward:
    latent: GaussianTensor
    distance_mean: np.ndarray
    distance_variance: np.ndarray


def normal_pdf(x: Any) -> np.ndarray:
    values = as_tensor(x)
    density = np.exp(-0.5 * values * values) / _SQRT_2PI
    return np.where(np.abs(values) > SATURATION_BOUND, 0.0, density)


def normal_cdf(x: Any) -> np.ndarray:
    values = as_tensor(x)
    cdf = 0.5 * special.erfc(-values / _SQRT_2)
    return np.where(values > SATURATION_BOUND, 1.0, np.where(values < -SATURATION_BOUND, 0.0, cdf))


def clamp_variance(variance: np.ndarray, scale: np.ndarray | float, where: str) -> np.ndarray:
    """Zero out negative round-off; warn when it exceeds the tolerance."""
    tolerance = VARIANCE_CLAMP_TOL * np.maximum(1.0, scale)
    beyond = variance < -tolerance
    if np.any(beyond):
        LOGGER.warning(
            "%s: %s variances below -tolerance clamped (min %.3g)",
            where,
            int(np.count_nonzero(beyond)),
            float(variance.min()),
        )
    return np.maximum(variance, 0.0)


def g_affine(x: GaussianTensor, weights: Any, bias: Any | None = None) -> GaussianTensor:
    matrix = as_tensor(weights)
    mean = affine(x.mean, matrix, bias)
    variance = affine(x.variance, matrix * matrix)
    return GaussianTensor(mean, variance)


def g_conv2d(
    x: GaussianTensor,
    kernel: Any,
    bias: Any | None = None,
    stride: int = 1,
    padding: int = 0,
) -> GaussianTensor:
    weights = as_tensor(kernel)
    mean = conv2d(x.mean, weights, bias, stride, padding)
    variance = conv2d(x.variance, weights * weights, None, stride, padding)
    return GaussianTensor(mean, variance)


def g_bounded_relu(x: GaussianTensor, upper: float = 1.0) -> GaussianTensor:
    """Closed-form moments of min(max(X, 0), upper) for X ~ N(mu, sigma^2)."""
    if not upper > 0:
        raise ConfigurationError(f"upper bound must be positive, got {upper}")
    mu = x.mean
    sigma = np.sqrt(x.variance)
    point = sigma == 0
    s = np.where(point, 1.0, sigma)
    a = -mu / s
    b = (upper - mu) / s
    pdf_a, pdf_b = normal_pdf(a), normal_pdf(b)
    cdf_a, cdf_b = normal_cdf(a), normal_cdf(b)

    mean = s * (pdf_a - pdf_b) + mu * (cdf_b - cdf_a) + upper * (1.0 - cdf_b)
    mean = np.clip(mean, 0.0, upper)
    quad = mu * mu - 2.0 * mu * mean + s * s
    variance = (
        (quad + 2.0 * upper * mean - upper * upper) * cdf_b
        - quad * cdf_a
        - (mu * s - 2.0 * mean * s + upper * s) * pdf_b
        + (mu * s - 2.0 * mean * s) * pdf_a
        + mean * mean
        - 2.0 * upper * mean
        + upper * upper
    )
    variance = clamp_variance(np.where(point, 0.0, variance), mu * mu + s * s, "bounded relu")
    variance = np.minimum(variance, 0.25 * upper * upper)

    mean = np.where(point, bounded_relu(mu, upper), mean)
    variance = np.where(point, 0.0, variance)
    return GaussianTensor(mean, variance)


def g_relu1(x: GaussianTensor) -> GaussianTensor:
    return g_bounded_relu(x, 1.0)


def g_relu(x: GaussianTensor) -> GaussianTensor:
    mu = x.mean
    sigma = np.sqrt(x.variance)
    point = sigma == 0
    s = np.where(point, 1.0, sigma)
    ratio = mu / s
    pdf, cdf = normal_pdf(ratio), normal_cdf(ratio)
    mean = np.maximum(mu * cdf + s * pdf, 0.0)
    variance = (mu * mu + s * s) * cdf + mu * s * pdf - mean * mean
    variance = clamp_variance(np.where(point, 0.0, variance), mu * mu + s * s, "relu")
    mean = np.where(point, np.maximum(mu, 0.0), mean)
    variance = np.where(point, 0.0, variance)
    return GaussianTensor(mean, variance)


def g_activate(x: GaussianTensor, tag: str) -> GaussianTensor:
    if tag == "relu":
        return g_relu(x)
    if tag == "relu1":
        return g_relu1(x)
    if tag == "none":
        return x
    raise UnsupportedLayerError(f"no moment propagation for activation {tag!r}")


def g_apply_layer(layer: LayerSpec, x: GaussianTensor) -> GaussianTensor:
    if layer.kind == "conv":
        out = g_conv2d(x, layer.weights, layer.bias, layer.stride, layer.padding)
    elif layer.kind == "affine":
        batch = x.shape[:-3]
        flat = GaussianTensor(x.mean.reshape(batch + (-1,)), x.variance.reshape(batch + (-1,)))
        out = g_affine(flat, layer.weights, layer.bias)
        target = batch + (1, 1, layer.out_channels)
        out = GaussianTensor(out.mean.reshape(target), out.variance.reshape(target))
    else:
        raise UnsupportedLayerError(f"no moment propagation for layer kind {layer.kind!r}")
    return g_activate(out, layer.activation)


def g_sq_l2_distance(latent_vec: GaussianTensor, prototype: Any) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of ||z - p||^2 for z with diagonal covariance.

    With m = mean - p: mean = sum(var) + sum(m^2), variance = 2 sum(var^2) + 4 sum(m^2 var).
    """
    p = as_tensor(prototype)
    if latent_vec.shape[-1:] != p.shape:
        raise ShapeMismatchError("prototype length", latent_vec.shape[-1:], p.shape)
    trace = np.zeros(latent_vec.shape[:-1])
    squares = np.zeros(latent_vec.shape[:-1])
    trace_sq = np.zeros(latent_vec.shape[:-1])
    cross = np.zeros(latent_vec.shape[:-1])
    for channel in range(p.shape[0]):
        var = latent_vec.variance[..., channel]
        diff = latent_vec.mean[..., channel] - p[channel]
        trace += var
        squares += diff * diff
        trace_sq += var * var
        cross += diff * diff * var
    mean = trace + squares
    variance = 2.0 * trace_sq + 4.0 * cross
    if mean.ndim == 0:
        return float(mean), float(variance)
    return mean, variance


def g_distance_maps(latent: GaussianTensor, prototypes: PrototypeSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-position distance moments for all prototypes: (..., H', W', P) each."""
    if latent.shape[-1] != prototypes.channels:
        raise ShapeMismatchError("latent channels", (prototypes.channels,), latent.shape[-1:])
    shape = latent.shape[:-1] + (prototypes.count,)
    trace = np.zeros(shape)
    squares = np.zeros(shape)
    trace_sq = np.zeros(shape)
    cross = np.zeros(shape)
    for channel in range(prototypes.channels):
        var = latent.variance[..., channel, None]
        diff = latent.mean[..., channel, None] - prototypes.values[:, channel]
        trace += var
        squares += diff * diff
        trace_sq += var * var
        cross += diff * diff * var
    return trace + squares, 2.0 * trace_sq + 4.0 * cross


def clark_max(
    mean_a: Any, var_a: Any, mean_b: Any, var_b: Any
) -> tuple[np.ndarray, np.ndarray]:
    """Moment-matched max of two independent Gaussians."""
    m1, v1, m2, v2 = (as_tensor(value) for value in (mean_a, var_a, mean_b, var_b))
    theta_sq = v1 + v2
    point = theta_sq == 0
    theta = np.sqrt(np.where(point, 1.0, theta_sq))
    alpha = (m1 - m2) / theta
    cdf_pos, cdf_neg, pdf = normal_cdf(alpha), normal_cdf(-alpha), normal_pdf(alpha)
    mean = m1 * cdf_pos + m2 * cdf_neg + theta * pdf
    second = (m1 * m1 + v1) * cdf_pos + (m2 * m2 + v2) * cdf_neg + (m1 + m2) * theta * pdf
    first_wins = alpha > SATURATION_BOUND
    second_wins = alpha < -SATURATION_BOUND
    # replaced entries never reach the clamp
    settled = point | first_wins | second_wins
    variance = clamp_variance(
        np.where(settled, 0.0, second - mean * mean), m1 * m1 + m2 * m2 + theta_sq, "clark max"
    )
    mean = np.where(first_wins, m1, np.where(second_wins, m2, mean))
    variance = np.where(first_wins, v1, np.where(second_wins, v2, variance))
    mean = np.where(point, np.maximum(m1, m2), mean)
    variance = np.where(point, 0.0, variance)
    return mean, variance


def g_min_pool_axis(mean: np.ndarray, variance: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Min over axis -2 by negating, folding clark_max left to right, negating back."""
    if mean.shape != variance.shape or mean.ndim < 2 or mean.shape[-2] == 0:
        raise ShapeMismatchError("min-pool moments", "(..., n>=1, P)", mean.shape)
    acc_mean = -mean[..., 0, :]
    acc_var = variance[..., 0, :]
    for index in range(1, mean.shape[-2]):
        acc_mean, acc_var = clark_max(acc_mean, acc_var, -mean[..., index, :], variance[..., index, :])
    return -acc_mean, acc_var


def g_min_pool(distance_moments: Sequence[tuple[float, float]]) -> tuple[float, float]:
    if len(distance_moments) == 0:
        raise ShapeMismatchError("min-pool moments", "non-empty list", (0,))
    moments = np.asarray(distance_moments, dtype=np.float64)
    if np.any(moments[:, 1] < 0):
        raise ConfigurationError("min-pool variances must be nonnegative")
    mean, variance = g_min_pool_axis(moments[:, 0][:, None], moments[:, 1][:, None])
    return float(mean[0]), float(variance[0])


def g_forward(model: ModelSpec, x: GaussianTensor) -> GaussianForward:
    """Propagate moments through V, Z and Q; distances are min-pooled over positions."""
    if len(x.shape) < 3 or x.shape[-3:] != model.input_shape:
        raise ShapeMismatchError("gaussian input", model.input_shape, x.shape[-3:])
    values = x
    for layer in model.layers:
        values = g_apply_layer(layer, values)
    mean_maps, var_maps = g_distance_maps(values, model.prototypes)
    flat_shape = mean_maps.shape[:-3] + (-1, model.prototypes.count)
    mean, variance = g_min_pool_axis(mean_maps.reshape(flat_shape), var_maps.reshape(flat_shape))
    # a distance is nonnegative; Clark folding can undershoot near zero
    return GaussianForward(values, np.maximum(mean, 0.0), variance)


def gaussian_from_coalition(values: Any, q: float, baseline: float = 0.0) -> GaussianTensor:
    """Each entry kept with probability q, else replaced by the baseline (mean-field)."""
    if not 0.0 <= q <= 1.0:
        raise ConfigurationError(f"coalition probability must lie in [0, 1], got {q}")
    x = as_tensor(values)
    gap = x - baseline
    return GaussianTensor(q * x + (1.0 - q) * baseline, q * (1.0 - q) * gap * gap)
