from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import pandas as pd

from protofaith.domain.model import ModelSpec
from protofaith.services.evaluation import AopcReport, PerturbationCurve
from protofaith.services.protopnet import ContributionScores, ForwardResult
from protofaith.services.shapley import AttributionMap

FLOAT_FORMAT = "%.17g"

CURVE_COLUMNS = ["prototype_class", "prototype_index", "t", "s_t", "term"]


def write_frame(frame: pd.DataFrame, path: Path | str) -> Path:
    target = Path(path)
    frame.to_csv(target, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return target


def logits_frame(result: ForwardResult) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "class": range(result.logits.shape[0]),
            "logit": result.logits,
            "probability": result.probabilities,
        }
    )


def distances_frame(model: ModelSpec, result: ForwardResult) -> pd.DataFrame:
    rows = []
    for flat, value in enumerate(result.distances.values):
        class_index, proto_index = model.prototypes.identity(flat)
        row, col = result.distances.positions[flat]
        rows.append(
            {
                "prototype_class": class_index,
                "prototype_index": proto_index,
                "distance": float(value),
                "row": row,
                "col": col,
            }
        )
    return pd.DataFrame(rows, columns=["prototype_class", "prototype_index", "distance", "row", "col"])


def contributions_frame(
    scores: Sequence[ContributionScores], duplicates: Mapping[int, int] | None = None
) -> pd.DataFrame:
    """One row per (class, flat prototype); duplicate_of names the first identical prototype."""
    duplicates = duplicates or {}
    rows = [
        {
            "class": item.class_index,
            "prototype_index": proto_index,
            "psi": float(value),
            "remainder": item.remainder,
            "log_probability": item.log_probability,
            "duplicate_of": duplicates.get(proto_index),
        }
        for item in scores
        for proto_index, value in enumerate(item.scores)
    ]
    frame = pd.DataFrame(
        rows,
        columns=["class", "prototype_index", "psi", "remainder", "log_probability", "duplicate_of"],
    )
    return _nullable_index(frame, "duplicate_of")


def _nullable_index(frame: pd.DataFrame, column: str) -> pd.DataFrame:
    frame[column] = frame[column].astype("Int64")
    return frame


def attribution_frame(attribution: AttributionMap) -> pd.DataFrame:
    values = attribution.values
    grid = values if values.ndim == 3 else values[..., None]
    rows = [
        {"row": row, "col": col, "channel": channel, "value": float(grid[row, col, channel])}
        for row in range(grid.shape[0])
        for col in range(grid.shape[1])
        for channel in range(grid.shape[2])
    ]
    return pd.DataFrame(rows, columns=["row", "col", "channel", "value"])


def attribution_summary_frame(entries: Sequence[dict[str, object]]) -> pd.DataFrame:
    frame = pd.DataFrame(
        list(entries),
        columns=[
            "image",
            "prototype_class",
            "prototype_index",
            "method",
            "target",
            "sum",
            "full_value",
            "empty_value",
            "residual",
            "heatmap",
            "table",
            "duplicate_of",
        ],
    )
    return _nullable_index(frame, "duplicate_of")


def curves_frame(curves: Sequence[PerturbationCurve]) -> pd.DataFrame:
    rows = [
        {
            "prototype_class": curve.class_index,
            "prototype_index": curve.proto_index,
            "t": t,
            "s_t": float(curve.distances[t]),
            "term": float(curve.terms[t]),
        }
        for curve in curves
        for t in range(curve.steps + 1)
    ]
    return pd.DataFrame(rows, columns=CURVE_COLUMNS)


def aopc_frame(reports: Sequence[AopcReport]) -> pd.DataFrame:
    rows = [
        {
            "normalization": report.normalization,
            "method": method,
            "score": score,
            "curves": len(report.curves.get(method, ())),
            "verdict": report.verdict,
        }
        for report in reports
        for method, score in sorted(report.scores.items())
    ]
    return pd.DataFrame(rows, columns=["normalization", "method", "score", "curves", "verdict"])
