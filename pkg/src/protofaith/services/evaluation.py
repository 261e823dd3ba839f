from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
import logging
import math
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from protofaith.domain.constants import (
    COMPLETENESS_TOL,
    DEFAULT_BASELINE,
    MOMENT_KINDS,
    NORMALIZATIONS,
)
from protofaith.domain.errors import ConfigurationError, ProvenanceError
from protofaith.domain.model import (
    LabeledImage,
    LayerSpec,
    ModelSpec,
    PrototypeSet,
    ProvenanceRecord,
)
from protofaith.services import gauss_prop
from protofaith.services.legacy_explainer import legacy_as_attribution, legacy_map
from protofaith.services.numerics import affine, relu, relu1
from protofaith.services.shapley import (
    AttributionMap,
    DaspConfig,
    SetFunctionSpec,
    Target,
    dasp_shapley,
    evaluate_coalitions,
    exact_shapley,
    sampled_shapley,
)

LOGGER = logging.getLogger(__name__)

CLARK_MEAN_ENVELOPE = 0.05
MOMENT_Z_LIMIT = 4.0
MIN_MOMENT_SAMPLES = 10_000


@dataclass(frozen=True, eq=False)
class PerturbationCurve:
    class_index: int
    proto_index: int
    image_id: str
    method: str
    order: tuple[int, ...]
    distances: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.order)

    @property
    def terms(self) -> np.ndarray:
        """s(0) - s(t) for t = 0 .. T."""
        return self.distances[0] - self.distances


@dataclass(frozen=True, eq=False)
class AopcReport:
    normalization: str
    scores: dict[str, float]
    curves: dict[str, tuple[PerturbationCurve, ...]] = field(default_factory=dict)

    @property
    def ranking(self) -> list[str]:
        """Methods from most to least negative score."""
        return sorted(self.scores, key=lambda method: (self.scores[method], method))

    @property
    def verdict(self) -> str:
        ordered = self.ranking
        parts = [ordered[0]]
        for previous, current in zip(ordered, ordered[1:]):
            relation = "<" if self.scores[previous] < self.scores[current] else "="
            parts.append(f"{relation} {current}")
        return " ".join(parts)


def explain_prototype(
    model: ModelSpec,
    image: Any,
    class_index: int,
    proto_index: int,
    method: str,
    *,
    budget: int | None = None,
    seed: int | None = None,
    baseline: float = DEFAULT_BASELINE,
    max_exact_features: int | None = None,
) -> AttributionMap:
    """Attribution of one prototype distance by any of the four methods."""
    if method == "legacy":
        return legacy_as_attribution(
            legacy_map(model, image, class_index, proto_index, baseline=baseline)
        )
    spec = SetFunctionSpec(model, Target.distance(class_index, proto_index), image, baseline)
    if method == "faith":
        return dasp_shapley(spec, DaspConfig() if budget is None else DaspConfig(samples=budget))
    if method == "oracle":
        if max_exact_features is None:
            return exact_shapley(spec)
        return exact_shapley(spec, max_exact_features)
    if method == "sampler":
        if seed is None:
            raise ConfigurationError("the sampler needs an explicit seed")
        return sampled_shapley(spec, budget or 64, seed)
    raise ConfigurationError(f"unknown method {method!r}")


def perturbation_curve(
    model: ModelSpec,
    class_index: int,
    proto_index: int,
    attribution: AttributionMap,
    steps: int,
    source: LabeledImage,
) -> PerturbationCurve:
    """Remove the t most relevant features of the prototype's source image, t = 0 .. T."""
    provenance = model.prototypes.provenance
    if provenance is None:
        raise ProvenanceError("prototypes carry no provenance; project them first")
    record = provenance[model.prototypes.flat_index(class_index, proto_index)]
    if record.image_id != source.image_id:
        raise ProvenanceError(
            f"prototype ({class_index}, {proto_index}) was projected from {record.image_id!r}, "
            f"not {source.image_id!r}"
        )
    spec = SetFunctionSpec(
        model,
        Target.distance(class_index, proto_index),
        source.image,
        attribution.baseline,
        attribution.granularity,
    )
    if attribution.shape != spec.layout:
        raise ConfigurationError(
            f"attribution shape {attribution.shape} does not cover image layout {spec.layout}"
        )
    if not 0 <= steps <= spec.feature_count:
        raise ConfigurationError(f"steps must lie in [0, {spec.feature_count}], got {steps}")
    order = attribution.ranking()[:steps]
    masks = np.ones((steps + 1, spec.feature_count), dtype=bool)
    for t in range(1, steps + 1):
        masks[t:, order[t - 1]] = False
    values = evaluate_coalitions(spec, masks)
    curve = PerturbationCurve(
        class_index,
        proto_index,
        source.image_id,
        attribution.method,
        tuple(int(index) for index in order),
        values,
    )
    if abs(float(values[0])) > COMPLETENESS_TOL:
        LOGGER.warning(
            "Prototype (%s, %s): s(0) = %.3g on its own source image",
            class_index,
            proto_index,
            values[0],
        )
    if np.any(curve.terms > COMPLETENESS_TOL):
        LOGGER.warning("Prototype (%s, %s): positive perturbation term", class_index, proto_index)
    return curve


def aopc_score(curves: Sequence[PerturbationCurve], normalization: str = "paper") -> float:
    if normalization not in NORMALIZATIONS:
        raise ConfigurationError(f"unknown normalization {normalization!r}")
    if not curves:
        raise ConfigurationError("no perturbation curves")
    steps = {curve.steps for curve in curves}
    if len(steps) != 1:
        raise ConfigurationError(f"curves mix step counts {sorted(steps)}")
    (t_steps,) = steps
    per_class: dict[int, int] = defaultdict(int)
    for curve in curves:
        per_class[curve.class_index] += 1
    classes = len(per_class)
    protos = max(per_class.values())

    total = 0.0
    for curve in curves:
        total += float(np.sum(curve.terms[1:]))
    if normalization == "paper":
        return total / (classes + protos + t_steps - 1)
    count = classes * protos * t_steps
    return total / count if count else 0.0


def aopc(curves: Sequence[PerturbationCurve], normalization: str = "paper") -> AopcReport:
    """AOPC per attribution method; curves are grouped by their method tag."""
    if not curves:
        raise ConfigurationError("no perturbation curves")
    grouped: dict[str, list[PerturbationCurve]] = defaultdict(list)
    for curve in curves:
        grouped[curve.method].append(curve)
    scores = {method: aopc_score(group, normalization) for method, group in grouped.items()}
    return AopcReport(
        normalization,
        scores,
        {method: tuple(group) for method, group in grouped.items()},
    )


def counterexample_fixture() -> tuple[ModelSpec, np.ndarray, tuple[int, int]]:
    """Two 3x3 convs that only pass their top-left input; strides 1 and 2, padding 1 each.

    A 3x3 input with a single 1 at the top-left produces a 2x2 latent map whose only
    activation sits at the bottom-right cell.
    """
    kernel = np.zeros((3, 3, 1, 1))
    kernel[0, 0, 0, 0] = 1.0
    backbone = (
        LayerSpec("conv", kernel, np.zeros(1), stride=1, padding=1),
        LayerSpec("conv", kernel, np.zeros(1), stride=2, padding=1),
    )
    identity = np.ones((1, 1, 1, 1))
    extractor = (
        LayerSpec("conv", identity, np.zeros(1), activation="relu"),
        LayerSpec("conv", identity, np.zeros(1), activation="relu1"),
    )
    prototypes = PrototypeSet(
        1,
        1,
        np.ones((1, 1)),
        (ProvenanceRecord(0, 0, "counterexample", 1, 1),),
    )
    model = ModelSpec((3, 3, 1), backbone, extractor, prototypes, -np.ones((1, 1)))
    image = np.zeros((3, 3, 1))
    image[0, 0, 0] = 1.0
    return model, image, (1, 1)


def ordering_study(
    studies: Iterable[tuple[ModelSpec, Sequence[LabeledImage]]],
    methods: Sequence[str] = ("faith", "legacy"),
    steps: int | None = None,
    budget: int | None = None,
    seed: int | None = None,
) -> tuple[pd.DataFrame, dict[str, Any]]:
    """Per-prototype AOPC of each method on its source image, plus an aggregate verdict.

    The first method is the one expected to win; a prototype counts as a win when its
    score is strictly below every other method's under both normalizations.
    """
    rows: list[dict[str, Any]] = []
    aggregates: dict[str, dict[str, list[float]]] = {
        norm: defaultdict(list) for norm in NORMALIZATIONS
    }
    for model_number, (model, dataset) in enumerate(studies):
        provenance = model.prototypes.provenance
        if provenance is None:
            raise ProvenanceError(f"study model {model_number} has no provenance")
        by_id = {item.image_id: item for item in dataset}
        curves: list[PerturbationCurve] = []
        for record in provenance:
            source = by_id.get(record.image_id)
            if source is None:
                raise ProvenanceError(f"source image {record.image_id!r} missing from the dataset")
            t_steps = steps if steps is not None else default_steps(source.image.shape[0] * source.image.shape[1])
            for method in methods:
                attribution = explain_prototype(
                    model,
                    source.image,
                    record.class_index,
                    record.proto_index,
                    method,
                    budget=budget,
                    seed=seed,
                )
                curve = perturbation_curve(
                    model, record.class_index, record.proto_index, attribution, t_steps, source
                )
                curves.append(curve)
                rows.append(
                    {
                        "model": model_number,
                        "prototype_class": record.class_index,
                        "prototype_index": record.proto_index,
                        "image_id": record.image_id,
                        "method": attribution.method,
                        "requested": method,
                        "steps": t_steps,
                        "aopc_paper": aopc_score([curve], "paper"),
                        "aopc_per_term": aopc_score([curve], "per-term"),
                        "max_term": float(curve.terms.max()),
                    }
                )
        for norm in NORMALIZATIONS:
            for tag, score in aopc(curves, norm).scores.items():
                aggregates[norm][tag].append(score)

    frame = pd.DataFrame(rows)
    summary = _study_summary(frame, aggregates, methods)
    LOGGER.info("Ordering study: %s", summary)
    return frame, summary


def _study_summary(
    frame: pd.DataFrame,
    aggregates: Mapping[str, Mapping[str, list[float]]],
    methods: Sequence[str],
) -> dict[str, Any]:
    if frame.empty:
        return {"prototypes": 0, "win_fraction": None, "verdict": None}
    leader = methods[0]
    keys = ["model", "prototype_class", "prototype_index"]
    wins = 0
    groups = frame.groupby(keys, sort=True)
    for _, group in groups:
        scores = group.set_index("requested")
        lead = scores.loc[leader]
        others = scores.drop(index=leader)
        if all(
            (lead[column] < others[column]).all() for column in ("aopc_paper", "aopc_per_term")
        ):
            wins += 1
    summary: dict[str, Any] = {"prototypes": int(groups.ngroups), "win_fraction": wins / groups.ngroups}
    aggregate_wins = True
    for norm, per_method in aggregates.items():
        means = {tag: float(np.mean(values)) for tag, values in per_method.items()}
        summary[f"aggregate_{norm}"] = means
        lead_tag = frame.loc[frame["requested"] == leader, "method"].iloc[0]
        lead_score = means[lead_tag]
        rivals = [score for tag, score in means.items() if tag != lead_tag]
        aggregate_wins = aggregate_wins and all(lead_score < score for score in rivals)
        if len(rivals) == 1 and rivals[0] != 0:
            summary[f"ratio_{norm}"] = lead_score / rivals[0]
        else:
            summary[f"ratio_{norm}"] = None
    summary["verdict"] = f"{leader} wins" if aggregate_wins else f"{leader} does not win"
    return summary


def default_steps(features: int) -> int:
    """10% of the feature count, rounded up."""
    return (features + 9) // 10


def _z_score(closed: float, estimate: float, standard_error: float) -> float:
    return abs(closed - estimate) / standard_error


def _sample_stats(samples: np.ndarray) -> tuple[float, float, float, float]:
    count = samples.shape[0]
    mean = float(np.mean(samples))
    centred = samples - mean
    variance = float(np.sum(centred * centred) / (count - 1))
    fourth = float(np.mean(centred**4))
    # floor at the sampling resolution so all-equal draws do not give infinite z-scores
    se_mean = max(math.sqrt(variance / count), 1.0 / count)
    se_var = max(math.sqrt(max(fourth - variance * variance, 0.0) / count), 1.0 / count)
    return mean, variance, se_mean, se_var


def default_moment_grid(kind: str, seed: int) -> list[Any]:
    rng = np.random.default_rng(seed)
    if kind in ("relu", "relu1"):
        return [(float(mu), float(sigma)) for mu in np.linspace(-3, 3, 13) for sigma in np.linspace(0.1, 3, 8)]
    if kind == "affine":
        return [
            (rng.normal(size=3), rng.normal(size=3), rng.uniform(0.1, 2.0, size=3), float(rng.normal()))
            for _ in range(8)
        ]
    if kind == "sq_l2":
        return [(rng.normal(size=8), rng.uniform(0.05, 1.0, size=8)) for _ in range(12)]
    return [
        [(float(rng.normal()), float(rng.uniform(0.1, 1.0))) for _ in range(4)] for _ in range(8)
    ]


def validate_moments(
    kind: str,
    grid: Sequence[Any] | None = None,
    samples: int = 1_000_000,
    seed: int = 0,
) -> pd.DataFrame:
    """Closed-form moments against Monte-Carlo estimates, one row per grid point.

    relu/relu1 points are (mu, sigma); affine points (weights, means, variances, bias);
    sq_l2 points (m, diagonal variances) with the prototype at the origin; min_pool
    points are lists of (mean, variance). Exact forms pass at 4 standard errors, the
    Clark min-pool on a 5% relative envelope of the mean.
    """
    if kind not in MOMENT_KINDS:
        raise ConfigurationError(f"unknown layer kind {kind!r}; expected one of {MOMENT_KINDS}")
    if samples < MIN_MOMENT_SAMPLES:
        raise ConfigurationError(f"need at least {MIN_MOMENT_SAMPLES} samples, got {samples}")
    points = list(grid) if grid is not None else default_moment_grid(kind, seed)
    rng = np.random.default_rng(seed)
    rows: list[dict[str, Any]] = []
    for number, point in enumerate(points):
        closed_mean, closed_var, draws, label = _moment_case(kind, point, samples, rng)
        mean, variance, se_mean, se_var = _sample_stats(draws)
        row: dict[str, Any] = {
            "kind": kind,
            "point": number,
            "parameters": label,
            "closed_mean": closed_mean,
            "closed_variance": closed_var,
            "mc_mean": mean,
            "mc_variance": variance,
            "z_mean": _z_score(closed_mean, mean, se_mean),
            "z_variance": _z_score(closed_var, variance, se_var),
        }
        if kind == "min_pool":
            scale = max(abs(mean), math.sqrt(variance))
            row["relative_mean_error"] = abs(closed_mean - mean) / scale if scale > 0 else 0.0
            row["passed"] = row["relative_mean_error"] <= CLARK_MEAN_ENVELOPE
        else:
            row["relative_mean_error"] = None
            row["passed"] = row["z_mean"] <= MOMENT_Z_LIMIT and row["z_variance"] <= MOMENT_Z_LIMIT
        rows.append(row)
    frame = pd.DataFrame(rows)
    LOGGER.info(
        "Moment validation %s: %s/%s points passed",
        kind,
        int(frame["passed"].sum()) if not frame.empty else 0,
        len(frame),
    )
    return frame


def _moment_case(
    kind: str, point: Any, samples: int, rng: np.random.Generator
) -> tuple[float, float, np.ndarray, str]:
    if kind in ("relu", "relu1"):
        mu, sigma = (float(value) for value in point)
        closed = (gauss_prop.g_relu if kind == "relu" else gauss_prop.g_relu1)(
            gauss_prop.GaussianTensor(np.array([mu]), np.array([sigma * sigma]))
        )
        draws = rng.normal(mu, sigma, size=samples)
        draws = relu(draws) if kind == "relu" else relu1(draws)
        return float(closed.mean[0]), float(closed.variance[0]), draws, f"mu={mu:.6g} sigma={sigma:.6g}"
    if kind == "affine":
        weights, means, variances, bias = point
        weights, means, variances = (np.asarray(value, dtype=np.float64) for value in (weights, means, variances))
        matrix = weights.reshape(1, -1)
        closed = gauss_prop.g_affine(gauss_prop.GaussianTensor(means, variances), matrix, [bias])
        inputs = rng.normal(means, np.sqrt(variances), size=(samples, means.shape[0]))
        draws = affine(inputs, matrix, [bias])[:, 0]
        return float(closed.mean[0]), float(closed.variance[0]), draws, f"n={means.shape[0]}"
    if kind == "sq_l2":
        offsets, variances = (np.asarray(value, dtype=np.float64) for value in point)
        closed_mean, closed_var = gauss_prop.g_sq_l2_distance(
            gauss_prop.GaussianTensor(offsets, variances), np.zeros(offsets.shape[0])
        )
        draws = np.zeros(samples)
        for channel in range(offsets.shape[0]):
            values = rng.normal(offsets[channel], math.sqrt(variances[channel]), size=samples)
            draws += values * values
        return float(closed_mean), float(closed_var), draws, f"L={offsets.shape[0]}"
    moments = [(float(mean), float(var)) for mean, var in point]
    closed_mean, closed_var = gauss_prop.g_min_pool(moments)
    stacked = np.stack([rng.normal(mean, math.sqrt(var), size=samples) for mean, var in moments])
    return closed_mean, closed_var, stacked.min(axis=0), f"n={len(moments)}"
