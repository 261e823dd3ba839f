from __future__ import annotations

from typing import Any

import numpy as np
from scipy import special

from protofaith.domain.errors import ConfigurationError, NonFiniteError, ShapeMismatchError


def as_tensor(values: Any) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


def ensure_finite(values: np.ndarray, layer_index: int | str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        bad = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
        raise NonFiniteError(layer_index, f"{bad} non-finite entries")
    return values


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def conv2d(
    image: Any,
    kernel: Any,
    bias: Any | None = None,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Zero-padded cross-correlation over the trailing (H, W, C) axes.

    Leading axes are batch axes. Each output element accumulates in ascending kernel
    row, kernel column, then input channel, and the bias is added last.
    """
    x = as_tensor(image)
    weights = as_tensor(kernel)
    if x.ndim < 3 or weights.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d operands (input {x.shape}, kernel {weights.shape})",
            "(..., H, W, C) and (kh, kw, c_in, c_out)",
            (x.shape, weights.shape),
        )
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    kh, kw, c_in, c_out = weights.shape
    height, width, channels = x.shape[-3:]
    if channels != c_in:
        raise ShapeMismatchError(
            f"conv2d channels (input {x.shape}, kernel {weights.shape})", (c_in,), (channels,)
        )
    if kh > height + 2 * padding or kw > width + 2 * padding:
        raise ShapeMismatchError(
            f"conv2d kernel larger than padded input (input {x.shape}, kernel {weights.shape})",
            (height + 2 * padding, width + 2 * padding),
            (kh, kw),
        )
    out_h = conv_output_extent(height, kh, stride, padding)
    out_w = conv_output_extent(width, kw, stride, padding)

    if padding:
        pad_width = [(0, 0)] * (x.ndim - 3) + [(padding, padding), (padding, padding), (0, 0)]
        x = np.pad(x, pad_width, mode="constant", constant_values=0.0)

    out = np.zeros(x.shape[:-3] + (out_h, out_w, c_out), dtype=np.float64)
    row_span = stride * (out_h - 1) + 1
    col_span = stride * (out_w - 1) + 1
    for ki in range(kh):
        for kj in range(kw):
            window = x[..., ki : ki + row_span : stride, kj : kj + col_span : stride, :]
            for ci in range(c_in):
                out += window[..., ci, None] * weights[ki, kj, ci]
    if bias is not None:
        bias_vec = as_tensor(bias)
        if bias_vec.shape != (c_out,):
            raise ShapeMismatchError("conv2d bias", (c_out,), bias_vec.shape)
        out += bias_vec
    return out


def affine(values: Any, weights: Any, bias: Any | None = None) -> np.ndarray:
    """y_j = sum_i w_{j,i} x_i + b_j over the trailing axis, accumulated in ascending i."""
    x = as_tensor(values)
    matrix = as_tensor(weights)
    if matrix.ndim != 2 or x.ndim < 1 or matrix.shape[1] != x.shape[-1]:
        raise ShapeMismatchError(
            f"affine operands (input {x.shape}, weights {matrix.shape})",
            (matrix.shape[-1] if matrix.ndim == 2 else "?",),
            (x.shape[-1] if x.ndim else 0,),
        )
    out = np.zeros(x.shape[:-1] + (matrix.shape[0],), dtype=np.float64)
    for i in range(matrix.shape[1]):
        out += x[..., i, None] * matrix[:, i]
    if bias is not None:
        bias_vec = as_tensor(bias)
        if bias_vec.shape != (matrix.shape[0],):
            raise ShapeMismatchError("affine bias", (matrix.shape[0],), bias_vec.shape)
        out += bias_vec
    return out


def relu(values: Any) -> np.ndarray:
    return np.maximum(as_tensor(values), 0.0)


def bounded_relu(values: Any, upper: float) -> np.ndarray:
    if not upper > 0:
        raise ConfigurationError(f"upper bound must be positive, got {upper}")
    return np.clip(as_tensor(values), 0.0, upper)


def relu1(values: Any) -> np.ndarray:
    return bounded_relu(values, 1.0)


def activate(values: np.ndarray, tag: str) -> np.ndarray:
    if tag == "relu":
        return relu(values)
    if tag == "relu1":
        return relu1(values)
    if tag == "none":
        return values
    raise ConfigurationError(f"unknown activation {tag!r}")


def log_softmax(logits: Any) -> np.ndarray:
    """Max-shifted log-probabilities over the trailing axis."""
    values = as_tensor(logits)
    if values.ndim == 0 or values.shape[-1] == 0:
        raise ShapeMismatchError("log_softmax logits", "non-empty vector", values.shape)
    return special.log_softmax(values, axis=-1)
