from __future__ import annotations

import argparse
from dataclasses import dataclass
import json
import logging
import os
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from protofaith.data.model_files import load_model, save_model
from protofaith.data.tables import (
    aopc_frame,
    attribution_frame,
    attribution_summary_frame,
    contributions_frame,
    curves_frame,
    distances_frame,
    logits_frame,
    write_frame,
)
from protofaith.data.tensor_files import load_image, render_heatmap, save_tensor
from protofaith.domain.constants import (
    COMPLETENESS_TOL,
    DEFAULT_DASP_SAMPLES,
    MAX_EXACT_FEATURES,
    METHODS,
    MOMENT_KINDS,
    NORMALIZATIONS,
)
from protofaith.domain.errors import ProtoFaithError, ProvenanceError, UsageError
from protofaith.domain.model import LabeledImage, ModelSpec
from protofaith.services.desk import build_dot_study_model, build_projected_desk_model
from protofaith.services.evaluation import (
    MIN_MOMENT_SAMPLES,
    aopc,
    counterexample_fixture,
    default_steps,
    explain_prototype,
    perturbation_curve,
    validate_moments,
)
from protofaith.services.legacy_explainer import legacy_as_attribution, legacy_map
from protofaith.services.protopnet import contribution_scores, duplicate_of, forward, latent_map
from protofaith.services.shapley import SetFunctionSpec, Target, exact_shapley
from protofaith.version import APP_VERSION

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

STOCHASTIC_METHODS = ("sampler",)
BUILD_FAMILIES = ("desk", "dot")


@dataclass(frozen=True)
class Settings:
    out_dir: Path
    log_level: str
    max_exact_features: int
    dasp_budget: int


@dataclass(frozen=True)
class CommandConfig:
    command: str
    out_dir: Path
    model_path: Path | None = None
    image_paths: tuple[Path, ...] = ()
    class_index: int | None = None
    proto_selector: int | str = "all"
    method: str = "faith"
    budget: int | None = None
    seed: int | None = None
    steps: int | None = None
    normalization: str | None = None
    train_dir: Path | None = None
    layer: str | None = None
    samples: int | None = None
    build_options: dict[str, int] | None = None
    family: str = "desk"


def _parse_int(name: str, default: int) -> int:
    value = os.getenv(name)
    if value is None or not value.strip():
        return default
    try:
        return int(value)
    except ValueError as exc:
        raise UsageError(f"{name} must be an integer, got {value!r}") from exc


def _load_settings() -> Settings:
    max_exact = _parse_int("PROTOFAITH_MAX_EXACT_FEATURES", MAX_EXACT_FEATURES)
    budget = _parse_int("PROTOFAITH_DASP_BUDGET", DEFAULT_DASP_SAMPLES)
    if not 1 <= max_exact <= MAX_EXACT_FEATURES:
        raise UsageError(f"PROTOFAITH_MAX_EXACT_FEATURES must lie in [1, {MAX_EXACT_FEATURES}]")
    if budget < 1:
        raise UsageError("PROTOFAITH_DASP_BUDGET must be positive")
    return Settings(
        out_dir=Path(os.getenv("PROTOFAITH_OUT_DIR", "./out")),
        log_level=os.getenv("PROTOFAITH_LOG_LEVEL", "INFO").upper(),
        max_exact_features=max_exact,
        dasp_budget=budget,
    )


def _proto_selector(value: str) -> int | str:
    if value == "all":
        return value
    try:
        index = int(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected an integer or 'all', got {value!r}") from exc
    if index < 0:
        raise argparse.ArgumentTypeError("prototype index must be nonnegative")
    return index


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protofaith", description="Prototype networks with faithful Shapley explanations."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {APP_VERSION}")
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")

    build = commands.add_parser("build", help="Build a seeded desk model and training set.")
    build.add_argument("--seed", type=int, required=True)
    build.add_argument(
        "--family", choices=BUILD_FAMILIES, default="desk", help="Noisy patch images or single-dot images."
    )
    build.add_argument("--size", type=int, default=6, help="Square image extent.")
    build.add_argument("--classes", type=int, default=2)
    build.add_argument("--per-class", type=int, default=2)
    build.add_argument("--latent", type=int, default=4, help="Latent channels L.")
    build.add_argument("--images-per-class", type=int, default=3)
    build.add_argument("--out")

    fwd = commands.add_parser("forward", help="Logits, distances and contribution scores.")
    fwd.add_argument("--model", required=True)
    fwd.add_argument("--image", action="append", required=True)
    fwd.add_argument("--out")

    explain = commands.add_parser("explain", help="Per-prototype attribution maps.")
    explain.add_argument("--model", required=True)
    explain.add_argument("--image", action="append", required=True)
    explain.add_argument("--class", dest="class_index", type=int)
    explain.add_argument("--proto", type=_proto_selector, default="all")
    explain.add_argument("--method", choices=METHODS, default="faith")
    explain.add_argument("--budget", type=int)
    explain.add_argument("--seed", type=int)
    explain.add_argument("--train-dir")
    explain.add_argument("--out")

    perturb = commands.add_parser("aopc", help="AOPC of faith against legacy orderings.")
    perturb.add_argument("--model", required=True)
    perturb.add_argument("--class", dest="class_index", type=int)
    perturb.add_argument("--proto", type=_proto_selector, default="all")
    perturb.add_argument("--budget", type=int)
    perturb.add_argument("--seed", type=int, required=True)
    perturb.add_argument("--steps", type=int)
    perturb.add_argument("--norm", choices=NORMALIZATIONS)
    perturb.add_argument("--train-dir")
    perturb.add_argument("--out")

    validate = commands.add_parser("validate", help="Closed-form moments against Monte-Carlo.")
    validate.add_argument("--layer", choices=MOMENT_KINDS, required=True)
    validate.add_argument("--samples", type=int, default=1_000_000)
    validate.add_argument("--seed", type=int, required=True)
    validate.add_argument("--out")

    counter = commands.add_parser("counterexample", help="Legacy against oracle on the two-conv fixture.")
    counter.add_argument("--out")
    return parser


def _command_config(args: argparse.Namespace, settings: Settings) -> CommandConfig:
    out_dir = Path(args.out) if getattr(args, "out", None) else settings.out_dir
    model_path = Path(args.model) if getattr(args, "model", None) else None
    proto = getattr(args, "proto", "all")
    class_index = getattr(args, "class_index", None)
    if proto != "all" and class_index is None:
        raise UsageError("--proto with an index needs --class")
    if class_index is not None and class_index < 0:
        raise UsageError("--class must be nonnegative")
    method = getattr(args, "method", "faith")
    seed = getattr(args, "seed", None)
    if method in STOCHASTIC_METHODS and seed is None:
        raise UsageError(f"--method {method} needs --seed")
    budget = getattr(args, "budget", None)
    if budget is not None and budget < 1:
        raise UsageError("--budget must be positive")
    steps = getattr(args, "steps", None)
    if steps is not None and steps < 0:
        raise UsageError("--steps must be nonnegative")
    samples = getattr(args, "samples", None)
    if samples is not None and samples < MIN_MOMENT_SAMPLES:
        raise UsageError(f"--samples must be at least {MIN_MOMENT_SAMPLES}")
    train_dir = getattr(args, "train_dir", None)
    if train_dir:
        resolved_train: Path | None = Path(train_dir)
    else:
        resolved_train = model_path.parent / "train" if model_path is not None else None
    build_options = None
    if args.command == "build":
        build_options = {
            "size": args.size,
            "classes": args.classes,
            "per_class": args.per_class,
            "latent": args.latent,
            "images_per_class": args.images_per_class,
        }
        if min(build_options.values()) < 1 or args.size < 3:
            raise UsageError("build options must be positive and --size at least 3")
    return CommandConfig(
        command=args.command,
        out_dir=out_dir,
        model_path=model_path,
        image_paths=tuple(Path(path) for path in getattr(args, "image", None) or ()),
        class_index=class_index,
        proto_selector=proto,
        method=method,
        budget=budget,
        seed=seed,
        steps=steps,
        normalization=getattr(args, "norm", None),
        train_dir=resolved_train,
        layer=getattr(args, "layer", None),
        samples=samples,
        build_options=build_options,
        family=getattr(args, "family", "desk"),
    )


def _selected_prototypes(model: ModelSpec, config: CommandConfig) -> list[tuple[int, int]]:
    if config.class_index is not None and config.class_index >= model.classes:
        raise UsageError(f"--class {config.class_index} out of range for C={model.classes}")
    classes = range(model.classes) if config.class_index is None else [config.class_index]
    if config.proto_selector == "all":
        return [(c, k) for c in classes for k in range(model.per_class)]
    if config.proto_selector >= model.per_class:
        raise UsageError(f"--proto {config.proto_selector} out of range for K={model.per_class}")
    return [(c, config.proto_selector) for c in classes]


def _source_image(model: ModelSpec, class_index: int, proto_index: int, train_dir: Path | None) -> LabeledImage:
    provenance = model.prototypes.provenance
    if provenance is None:
        raise ProvenanceError("model prototypes carry no provenance")
    record = provenance[model.prototypes.flat_index(class_index, proto_index)]
    if train_dir is None:
        raise ProvenanceError("no training directory to resolve prototype source images")
    for suffix in (".txt", ".pgm"):
        candidate = train_dir / f"{record.image_id}{suffix}"
        if candidate.exists():
            return LabeledImage(record.image_id, load_image(candidate), record.class_index)
    raise ProvenanceError(f"source image {record.image_id!r} not found in {train_dir}")


def cmd_build(config: CommandConfig, settings: Settings) -> dict[str, Any]:
    options = config.build_options or {}
    size = options.get("size", 6)
    builder = build_dot_study_model if config.family == "dot" else build_projected_desk_model
    model, dataset = builder(
        config.seed,
        input_shape=(size, size, 1),
        latent_channels=options.get("latent", 4),
        classes=options.get("classes", 2),
        per_class=options.get("per_class", 2),
        images_per_class=options.get("images_per_class", 3),
    )
    train_dir = config.out_dir / "train"
    train_dir.mkdir(parents=True, exist_ok=True)
    save_model(model, config.out_dir / "model.json")
    for item in dataset:
        save_tensor(item.image, train_dir / f"{item.image_id}.txt")
    return {"family": config.family, "prototypes": model.prototypes.count, "images": len(dataset)}


def cmd_forward(config: CommandConfig, settings: Settings) -> dict[str, Any]:
    model = load_model(config.model_path)
    counts = {"images": 0, "tables": 0}
    for path in config.image_paths:
        result = forward(model, load_image(path))
        target = config.out_dir / path.stem
        target.mkdir(parents=True, exist_ok=True)
        scores = [contribution_scores(model, result.distances, c) for c in range(model.classes)]
        write_frame(logits_frame(result), target / "logits.csv")
        write_frame(distances_frame(model, result), target / "distances.csv")
        write_frame(
            contributions_frame(scores, duplicate_of(model.prototypes)), target / "contributions.csv"
        )
        counts["images"] += 1
        counts["tables"] += 3
        LOGGER.info("%s: predicted class %s", path.name, result.predicted_class)
    return counts


def _write_map(
    attribution: Any,
    stem: str,
    class_index: int,
    proto_index: int,
    method: str,
    out_dir: Path,
) -> dict[str, Any]:
    name = f"{stem}_c{class_index}_k{proto_index}_{method}"
    heatmap = render_heatmap(attribution, out_dir / f"{name}.pgm")
    table = write_frame(attribution_frame(attribution), out_dir / f"{name}.csv")
    return {
        "image": stem,
        "prototype_class": class_index,
        "prototype_index": proto_index,
        "method": attribution.method,
        "target": attribution.target.describe(),
        "sum": float(np.sum(attribution.values)),
        "full_value": attribution.full_value,
        "empty_value": attribution.empty_value,
        "residual": attribution.residual,
        "heatmap": heatmap.name,
        "table": table.name,
    }


def cmd_explain(config: CommandConfig, settings: Settings) -> dict[str, Any]:
    model = load_model(config.model_path)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    selected = _selected_prototypes(model, config)
    budget = config.budget or settings.dasp_budget
    images = [(path.stem, load_image(path)) for path in config.image_paths]
    duplicates = duplicate_of(model.prototypes)
    entries: list[dict[str, Any]] = []
    for class_index, proto_index in selected:
        repeated = duplicates.get(model.prototypes.flat_index(class_index, proto_index))
        if repeated is not None:
            LOGGER.info("Prototype (%s, %s) repeats prototype %s", class_index, proto_index, repeated)
        jobs = list(images)
        if model.prototypes.provenance is not None:
            try:
                source = _source_image(model, class_index, proto_index, config.train_dir)
                jobs.append((f"source_{source.image_id}", source.image))
            except ProvenanceError as exc:
                LOGGER.warning("Skipping source image of (%s, %s): %s", class_index, proto_index, exc)
        for stem, image in jobs:
            attribution = explain_prototype(
                model,
                image,
                class_index,
                proto_index,
                config.method,
                budget=budget,
                seed=config.seed,
                max_exact_features=settings.max_exact_features,
            )
            entry = _write_map(attribution, stem, class_index, proto_index, config.method, config.out_dir)
            entry["duplicate_of"] = repeated
            entries.append(entry)
            if config.method != "legacy" and abs(entry["residual"]) > COMPLETENESS_TOL:
                LOGGER.warning(
                    "%s map for (%s, %s) on %s: completeness residual %.3g",
                    config.method,
                    class_index,
                    proto_index,
                    stem,
                    entry["residual"],
                )
    write_frame(attribution_summary_frame(entries), config.out_dir / f"explain_{config.method}.csv")
    return {"maps": len(entries), "prototypes": len(selected)}


def cmd_aopc(config: CommandConfig, settings: Settings) -> dict[str, Any]:
    model = load_model(config.model_path)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    budget = config.budget or settings.dasp_budget
    curves = []
    for class_index, proto_index in _selected_prototypes(model, config):
        source = _source_image(model, class_index, proto_index, config.train_dir)
        height, width = source.image.shape[:2]
        steps = config.steps if config.steps is not None else default_steps(height * width)
        for method in ("faith", "legacy"):
            attribution = explain_prototype(
                model, source.image, class_index, proto_index, method, budget=budget, seed=config.seed
            )
            curves.append(perturbation_curve(model, class_index, proto_index, attribution, steps, source))
    norms = (config.normalization,) if config.normalization else NORMALIZATIONS
    reports = [aopc(curves, norm) for norm in norms]
    write_frame(aopc_frame(reports), config.out_dir / "aopc.csv")
    for method in sorted({curve.method for curve in curves}):
        selected = [curve for curve in curves if curve.method == method]
        write_frame(curves_frame(selected), config.out_dir / f"curves_{method}.csv")
    summary: dict[str, Any] = {"curves": len(curves)}
    for report in reports:
        summary[f"verdict_{report.normalization}"] = report.verdict
    return summary


def cmd_validate(config: CommandConfig, settings: Settings) -> dict[str, Any]:
    config.out_dir.mkdir(parents=True, exist_ok=True)
    frame = validate_moments(config.layer, samples=config.samples, seed=config.seed)
    write_frame(frame, config.out_dir / f"validate_{config.layer}.csv")
    failed = int((~frame["passed"].astype(bool)).sum())
    return {"points": len(frame), "failed": failed, "passed": failed == 0}


def cmd_counterexample(config: CommandConfig, settings: Settings) -> dict[str, Any]:
    model, image, expected = counterexample_fixture()
    config.out_dir.mkdir(parents=True, exist_ok=True)
    latent = latent_map(model, image)[..., 0]
    active = [tuple(int(v) for v in cell) for cell in np.argwhere(latent != 0)]

    row, col = expected
    oracle = exact_shapley(SetFunctionSpec(model, Target.latent(row, col), image))
    support = [tuple(int(v) for v in cell) for cell in np.argwhere(oracle.values != 0)]
    legacy = legacy_as_attribution(legacy_map(model, image, 0, 0))
    peak = tuple(int(v) for v in np.unravel_index(int(legacy.ranking()[0]), legacy.shape))

    source = LabeledImage("counterexample", image, 0)
    distance_oracle = explain_prototype(model, image, 0, 0, "oracle")
    curves = [
        perturbation_curve(model, 0, 0, distance_oracle, 1, source),
        perturbation_curve(model, 0, 0, legacy, 1, source),
    ]
    scores = aopc(curves, "paper").scores
    render_heatmap(oracle, config.out_dir / "counterexample_oracle.pgm")
    render_heatmap(legacy, config.out_dir / "counterexample_legacy.pgm")

    verdict = {
        "latent_active_cells": [list(cell) for cell in active],
        "oracle_support": [list(cell) for cell in support],
        "legacy_max_position": list(peak),
        "aopc_oracle": scores["oracle"],
        "aopc_legacy": scores["legacy"],
        "holds": active == [expected] and support == [(0, 0)] and peak != (0, 0)
        and scores["oracle"] < scores["legacy"],
    }
    path = config.out_dir / "counterexample.json"
    path.write_text(json.dumps(verdict, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"passed": verdict["holds"], "legacy_max_position": verdict["legacy_max_position"]}


COMMANDS: dict[str, Callable[[CommandConfig, Settings], dict[str, Any]]] = {
    "build": cmd_build,
    "forward": cmd_forward,
    "explain": cmd_explain,
    "aopc": cmd_aopc,
    "validate": cmd_validate,
    "counterexample": cmd_counterexample,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        settings = _load_settings()
    except UsageError as exc:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
        LOGGER.error("%s", exc)
        return EXIT_USAGE
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format="%(levelname)s %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        config = _command_config(args, settings)
    except UsageError as exc:
        parser.print_usage()
        LOGGER.error("%s", exc)
        return EXIT_USAGE

    try:
        summary = COMMANDS[config.command](config, settings)
    except UsageError as exc:
        LOGGER.error("%s", exc)
        return EXIT_USAGE
    except (ProtoFaithError, OSError) as exc:
        LOGGER.error("%s failed: %s", config.command, exc)
        return EXIT_FAILURE
    LOGGER.info("%s finished: %s", config.command, summary)
    if summary.get("passed") is False:
        LOGGER.error("%s: check did not hold", config.command)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
