from __future__ import annotations

import io
import logging
import math
from pathlib import Path
import re
from typing import Any

import numpy as np
from PIL import Image, UnidentifiedImageError

from protofaith.domain.errors import ShapeMismatchError, TensorFileError
from protofaith.services.numerics import as_tensor
from protofaith.services.shapley import AttributionMap

LOGGER = logging.getLogger(__name__)

PGM_MAXVALS = (255, 65535)
_RANGE_COMMENT = re.compile(rb"#\s*min=(\S+)\s+max=(\S+)")


def format_tensor(values: Any) -> str:
    """Shape line, then one shortest round-trip float per line in row-major order."""
    array = as_tensor(values)
    if not np.all(np.isfinite(array)):
        raise TensorFileError("tensor contains non-finite values")
    lines = [" ".join(str(extent) for extent in array.shape)]
    lines.extend(repr(float(value)) for value in array.reshape(-1))
    return "\n".join(lines) + "\n"


def save_tensor(values: Any, path: Path | str) -> Path:
    target = Path(path)
    target.write_text(format_tensor(values), encoding="utf-8")
    return target


def parse_tensor(text: str) -> np.ndarray:
    lines = text.split("\n")
    if not lines or not lines[0].strip():
        raise TensorFileError("missing shape line", line=1, offset=0)
    try:
        shape = tuple(int(token) for token in lines[0].split())
    except ValueError as exc:
        raise TensorFileError(f"malformed shape line {lines[0]!r}", line=1, offset=0) from exc
    if any(extent < 0 for extent in shape):
        raise TensorFileError(f"negative extent in shape {shape}", line=1, offset=0)

    values: list[float] = []
    offset = len(lines[0].encode("utf-8")) + 1
    for number, line in enumerate(lines[1:], start=2):
        for token in line.split():
            try:
                value = float(token)
            except ValueError as exc:
                raise TensorFileError(f"malformed number {token!r}", line=number, offset=offset) from exc
            if not math.isfinite(value):
                raise TensorFileError(f"non-finite value {token!r}", line=number, offset=offset)
            values.append(value)
        offset += len(line.encode("utf-8")) + 1
    expected = math.prod(shape)
    if len(values) != expected:
        raise TensorFileError(
            f"shape {shape} needs {expected} values, found {len(values)}", line=len(lines), offset=offset
        )
    return np.array(values, dtype=np.float64).reshape(shape)


def load_tensor(path: Path | str) -> np.ndarray:
    return parse_tensor(Path(path).read_text(encoding="utf-8"))


def pgm_levels(values: Any, maxval: int = 255) -> tuple[np.ndarray, float, float]:
    """Linear min-max scaling to 0 .. maxval; a constant map becomes mid-gray."""
    if maxval not in PGM_MAXVALS:
        raise TensorFileError(f"maxval must be one of {PGM_MAXVALS}, got {maxval}")
    array = as_tensor(values)
    if array.ndim != 2:
        raise ShapeMismatchError("heatmap", "(H, W)", array.shape)
    if not np.all(np.isfinite(array)):
        raise TensorFileError("heatmap contains non-finite values")
    low = float(array.min())
    high = float(array.max())
    if high == low:
        levels = np.full(array.shape, (maxval + 1) // 2)
    else:
        levels = np.rint((array - low) / (high - low) * maxval)
    return np.clip(levels, 0, maxval).astype(np.int64), low, high


def write_pgm(values: Any, path: Path | str, maxval: int = 255) -> Path:
    """Binary PGM encoded by Pillow, with the value range recorded as a header comment."""
    levels, low, high = pgm_levels(values, maxval)
    image = Image.fromarray(levels.astype(np.uint8 if maxval == 255 else np.uint16))
    buffer = io.BytesIO()
    image.save(buffer, format="PPM")
    magic, body = buffer.getvalue().split(b"\n", 1)
    comment = f"# min={low!r} max={high!r}\n".encode("ascii")
    target = Path(path)
    target.write_bytes(magic + b"\n" + comment + body)
    return target


def read_pgm(path: Path | str) -> tuple[np.ndarray, int, tuple[float, float] | None]:
    """Gray levels, maxval and the recorded (min, max) comment when present."""
    source = Path(path)
    raw = source.read_bytes()
    if not raw.startswith(b"P5"):
        raise TensorFileError(f"{source} is not a binary PGM (P5)", line=1, offset=0)
    try:
        with Image.open(source) as image:
            levels = np.asarray(image).astype(np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise TensorFileError(f"unreadable PGM {source}: {exc}") from exc
    tokens = re.sub(rb"#[^\n]*\n", b" ", raw[:256]).split()
    maxval = int(tokens[3]) if len(tokens) > 3 and tokens[3].isdigit() else 255
    recorded = None
    match = _RANGE_COMMENT.search(raw[:256])
    if match:
        recorded = (float(match.group(1)), float(match.group(2)))
    return levels, maxval, recorded


def load_image(path: Path | str) -> np.ndarray:
    """(H, W, C) float image from a PGM (scaled to [0, 1]) or a text tensor."""
    source = Path(path)
    if source.suffix.lower() == ".pgm":
        levels, maxval, _ = read_pgm(source)
        return (levels / maxval)[..., None]
    values = load_tensor(source)
    if values.ndim == 2:
        return values[..., None]
    if values.ndim != 3:
        raise ShapeMismatchError(f"image {source}", "(H, W, C)", values.shape)
    return values


def render_heatmap(attribution: AttributionMap, path: Path | str, maxval: int = 255) -> Path:
    values = attribution.values
    if values.ndim == 3:
        values = values.sum(axis=-1)
    target = write_pgm(values, path, maxval)
    LOGGER.debug("Heatmap for %s written to %s", attribution.target.describe(), target)
    return target
