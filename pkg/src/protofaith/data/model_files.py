"""JSON model files.

Floats are written with Python's shortest round-trip repr, so every weight survives a
save/load cycle bitwise. Non-finite values are refused in both directions.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Any

import numpy as np

from protofaith.domain.constants import MODEL_SCHEMA
from protofaith.domain.errors import ModelFileError, ProtoFaithError
from protofaith.domain.model import LayerSpec, ModelSpec, PrototypeSet, ProvenanceRecord

LOGGER = logging.getLogger(__name__)


def _reject_constant(token: str) -> Any:
    raise ValueError(f"non-finite number {token}")


def _layer_payload(section: str, layer: LayerSpec) -> dict[str, Any]:
    return {
        "section": section,
        "type": layer.kind,
        "kernel_shape": list(layer.weights.shape),
        "stride": layer.stride,
        "padding": layer.padding,
        "activation": layer.activation,
        "weights": layer.weights.reshape(-1).tolist(),
        "bias": layer.bias.tolist(),
    }


def model_payload(model: ModelSpec) -> dict[str, Any]:
    prototypes = model.prototypes
    provenance = None
    if prototypes.provenance is not None:
        provenance = [
            {
                "class": record.class_index,
                "index": record.proto_index,
                "image_id": record.image_id,
                "row": record.row,
                "col": record.col,
            }
            for record in prototypes.provenance
        ]
    return {
        "schema": MODEL_SCHEMA,
        "input_shape": list(model.input_shape),
        "layers": [_layer_payload("backbone", layer) for layer in model.backbone]
        + [_layer_payload("extractor", layer) for layer in model.extractor],
        "prototypes": {
            "per_class": prototypes.per_class,
            "classes": prototypes.classes,
            "channels": prototypes.channels,
            "values": prototypes.values.tolist(),
            "provenance": provenance,
        },
        "classifier": {
            "weights": model.classifier_weights.tolist(),
            "bias": None if model.classifier_bias is None else model.classifier_bias.tolist(),
        },
    }


def save_model(model: ModelSpec, path: Path | str) -> Path:
    target = Path(path)
    try:
        text = json.dumps(model_payload(model), indent=1, allow_nan=False)
    except ValueError as exc:
        raise ModelFileError(f"model holds non-finite values: {exc}") from exc
    target.write_text(text + "\n", encoding="utf-8")
    LOGGER.info("Model saved to %s", target)
    return target


def _line_of(text: str, *keys: str) -> int | None:
    position = 0
    for key in keys:
        found = text.find(f'"{key}"', position)
        if found < 0:
            return None
        position = found
    return text.count("\n", 0, position) + 1


def _number(value: Any, field: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ModelFileError(f"expected a number, got {value!r}", field=field)
    if not math.isfinite(value):
        raise ModelFileError("non-finite number", field=field)
    return float(value)


def _numbers(values: Any, field: str) -> np.ndarray:
    if not isinstance(values, list):
        raise ModelFileError(f"expected a list, got {type(values).__name__}", field=field)
    if values and isinstance(values[0], list):
        rows = [_numbers(row, f"{field}[{index}]") for index, row in enumerate(values)]
        if len({row.shape for row in rows}) > 1:
            raise ModelFileError("ragged nested list", field=field)
        return np.stack(rows)
    return np.array([_number(value, f"{field}[{index}]") for index, value in enumerate(values)])


def _integer(value: Any, field: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ModelFileError(f"expected an integer, got {value!r}", field=field)
    return value


def _require(payload: dict[str, Any], key: str, field: str) -> Any:
    if not isinstance(payload, dict) or key not in payload:
        raise ModelFileError("missing field", field=f"{field}.{key}" if field else key)
    return payload[key]


def _parse_layer(entry: Any, index: int) -> tuple[str, LayerSpec]:
    field = f"layers[{index}]"
    section = _require(entry, "section", field)
    if section not in ("backbone", "extractor"):
        raise ModelFileError(f"unknown section {section!r}", field=f"{field}.section")
    kind = _require(entry, "type", field)
    shape = tuple(_integer(extent, f"{field}.kernel_shape") for extent in _require(entry, "kernel_shape", field))
    weights = _numbers(_require(entry, "weights", field), f"{field}.weights")
    if weights.size != int(np.prod(shape)):
        raise ModelFileError(
            f"kernel_shape {shape} needs {int(np.prod(shape))} weights, got {weights.size}",
            field=f"{field}.weights",
        )
    layer = LayerSpec(
        kind,
        weights.reshape(shape),
        _numbers(_require(entry, "bias", field), f"{field}.bias"),
        stride=_integer(_require(entry, "stride", field), f"{field}.stride"),
        padding=_integer(_require(entry, "padding", field), f"{field}.padding"),
        activation=_require(entry, "activation", field),
    )
    return section, layer


def _parse_prototypes(block: Any) -> PrototypeSet:
    per_class = _integer(_require(block, "per_class", "prototypes"), "prototypes.per_class")
    classes = _integer(_require(block, "classes", "prototypes"), "prototypes.classes")
    channels = _integer(_require(block, "channels", "prototypes"), "prototypes.channels")
    values = _numbers(_require(block, "values", "prototypes"), "prototypes.values")
    if values.shape != (per_class * classes, channels):
        raise ModelFileError(
            f"expected K*C x L = {per_class * classes} x {channels} values, got {values.shape}",
            field="prototypes.values",
        )
    records = block.get("provenance")
    provenance = None
    if records is not None:
        provenance = tuple(
            ProvenanceRecord(
                _integer(_require(record, "class", f"prototypes.provenance[{n}]"), "class"),
                _integer(_require(record, "index", f"prototypes.provenance[{n}]"), "index"),
                str(_require(record, "image_id", f"prototypes.provenance[{n}]")),
                _integer(_require(record, "row", f"prototypes.provenance[{n}]"), "row"),
                _integer(_require(record, "col", f"prototypes.provenance[{n}]"), "col"),
            )
            for n, record in enumerate(records)
        )
    return PrototypeSet(per_class, classes, values, provenance)


def parse_model(text: str) -> ModelSpec:
    try:
        payload = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ModelFileError(f"malformed model file: {exc.msg}", line=exc.lineno, offset=offset) from exc
    except ValueError as exc:
        raise ModelFileError(str(exc)) from exc

    schema = _require(payload, "schema", "")
    if schema != MODEL_SCHEMA:
        raise ModelFileError(
            f"schema {schema!r} is not {MODEL_SCHEMA!r}", field="schema", line=_line_of(text, "schema")
        )
    section = "layers"
    try:
        input_shape = tuple(_integer(extent, "input_shape") for extent in _require(payload, "input_shape", ""))
        backbone: list[LayerSpec] = []
        extractor: list[LayerSpec] = []
        for index, entry in enumerate(_require(payload, "layers", "")):
            part, layer = _parse_layer(entry, index)
            (backbone if part == "backbone" else extractor).append(layer)
        section = "prototypes"
        prototypes = _parse_prototypes(_require(payload, "prototypes", ""))
        section = "classifier"
        classifier = _require(payload, "classifier", "")
        weights = _numbers(_require(classifier, "weights", "classifier"), "classifier.weights")
        expected = (prototypes.classes, prototypes.count)
        if weights.shape != expected:
            raise ModelFileError(
                f"classifier weights must be C x K*C = {expected[0]} x {expected[1]}, got {weights.shape}",
                field="classifier.weights",
                line=_line_of(text, "classifier", "weights"),
            )
        raw_bias = classifier.get("bias")
        bias = None if raw_bias is None else _numbers(raw_bias, "classifier.bias")
        section = "layers"
        return ModelSpec(input_shape, tuple(backbone), tuple(extractor), prototypes, weights, bias)
    except ModelFileError as exc:
        if exc.line is None and exc.field:
            root = exc.field.split(".")[0].split("[")[0]
            raise ModelFileError(
                exc.message, field=exc.field, line=_line_of(text, root), offset=exc.offset
            ) from exc
        raise
    except ProtoFaithError as exc:
        raise ModelFileError(str(exc), field=section, line=_line_of(text, section)) from exc
    except (TypeError, AttributeError) as exc:
        raise ModelFileError(f"unexpected structure: {exc}", field=section, line=_line_of(text, section)) from exc


def load_model(path: Path | str) -> ModelSpec:
    source = Path(path)
    try:
        text = source.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ModelFileError("model file is not UTF-8 text", offset=exc.start) from exc
    model = parse_model(text)
    LOGGER.info(
        "Model loaded from %s: %s classes x %s prototypes, L=%s",
        source,
        model.classes,
        model.per_class,
        model.latent_channels,
    )
    return model
