"""Experiment runner: configure, run, and summarize training and ablations.

Every run writes a manifest (config snapshot, seed, build id, wall time) plus
metrics as structured text and plot-ready CSV. Metrics artifacts are
byte-identical across reruns with the same seed; only the manifest carries
wall-clock time. Exit codes: 0 ok, 1 configuration error, 2 runtime error.

Config files are flat key = value text. Keys must be ExperimentConfig field
names; unknown keys are rejected so misspelled hyper-parameters fail loudly.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import datagen, localize, model, selftrain
from .core import (
    OBJECTIVES,
    SIMPLIFICATIONS,
    BadConfigError,
    Error,
    ExperimentConfig,
)

LAMBDA_GRID_DEFAULT = (0.75, 0.80, 0.85, 0.90)
OUTPUT_ROOT_ENV = "PNTAL_OUT"


class MissingArtifactError(Error, FileNotFoundError):
    def __init__(self, path, what: str):
        super().__init__(f"missing {what}: expected file {path}")


class _UsageError(Error, ValueError):
    pass


# ---------------------------------------------------------------------------
# Config file parsing
# ---------------------------------------------------------------------------

_LIST_FIELDS = {"tiou_grid", "classification_thresholds", "mask_thresholds"}
_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _LIST_FIELDS:
        parts = [p for p in raw.replace(",", " ").split() if p]
        try:
            return tuple(float(p) for p in parts)
        except ValueError:
            raise BadConfigError(key, f"expected a list of numbers, got {raw!r}") from None
    kind = _FIELD_TYPES[key]
    try:
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw  # str fields (objective)
    except ValueError:
        raise BadConfigError(key, f"cannot parse {raw!r} as {kind}") from None


def parse_config_text(text: str) -> Dict[str, object]:
    """Parse flat key = value lines; '#' starts a comment."""
    values: Dict[str, object] = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise BadConfigError(f"line {line_no}", f"expected key = value, got {line.strip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise BadConfigError(key, "unknown configuration key")
        if key in values:
            raise BadConfigError(key, "duplicate configuration key")
        values[key] = _parse_value(key, raw)
    return values


def load_config(path: Optional[str], overrides: Dict[str, object]) -> ExperimentConfig:
    values: Dict[str, object] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise MissingArtifactError(p, "config file")
        values.update(parse_config_text(p.read_text(encoding="utf-8")))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def build_id() -> str:
    """Content hash of the package sources; a git-style build identifier."""
    digest = hashlib.sha256()
    pkg_dir = Path(__file__).parent
    for py in sorted(pkg_dir.glob("*.py")):
        digest.update(py.name.encode())
        digest.update(py.read_bytes())
    return digest.hexdigest()[:12]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return " ".join(_fmt(v) for v in value)
    return str(value)


def write_manifest(out_dir: Path, config: ExperimentConfig, command: str, wall_time: float) -> None:
    lines = [f"command = {command}", f"build_id = {build_id()}"]
    for key in sorted(config.to_dict()):
        lines.append(f"{key} = {_fmt(getattr(config, key))}")
    lines.append(f"simplifications = {','.join(SIMPLIFICATIONS)}")
    lines.append(f"wall_time_s = {wall_time:.3f}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_metrics_jsonl(path: Path, metrics: Sequence[selftrain.EpochMetrics]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in metrics:
            fh.write(json.dumps(m.to_dict(), sort_keys=True) + "\n")


def write_map_csv(path: Path, result: localize.EvalResult) -> None:
    rows = [[f"{thr:g}", value] for thr, value in result.per_threshold]
    rows.append(["average", result.average_map])
    write_csv(path, ("tiou", "map"), rows)


# ---------------------------------------------------------------------------
# Experiment driver (shared by CLI commands and the acceptance suite)
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ExperimentResult:
    config: ExperimentConfig
    params: model.ModelParams
    metrics: List[selftrain.EpochMetrics]
    detections: List[localize.Detection]
    evaluation: localize.EvalResult
    pretrain_test_accuracy: float
    final_test_accuracy: float


def run_experiment(config: ExperimentConfig, benchmark: Optional[datagen.Benchmark] = None) -> ExperimentResult:
    """Generate data (unless given), pretrain, self-train, evaluate."""
    if benchmark is None:
        benchmark = datagen.generate_benchmark(config)
    params = selftrain.pretrain(benchmark.labeled, config)
    pre_acc = selftrain.snippet_accuracy(params, benchmark.test, config)
    sealed = selftrain.sealed_label_map(benchmark, config)
    params, metrics = selftrain.self_train_loop(
        params, benchmark.labeled, benchmark.unlabeled, config, sealed_labels=sealed
    )
    detections, evaluation = localize.evaluate_model(params, benchmark.test, config)
    return ExperimentResult(
        config=config,
        params=params,
        metrics=metrics,
        detections=detections,
        evaluation=evaluation,
        pretrain_test_accuracy=pre_acc,
        final_test_accuracy=selftrain.snippet_accuracy(params, benchmark.test, config),
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_generate(config: ExperimentConfig, out: Path) -> None:
    benchmark = datagen.generate_benchmark(config)
    all_videos = list(benchmark.labeled) + list(benchmark.unlabeled) + list(benchmark.test)
    datagen.write_feature_file(out / "features.bin", all_videos, config.class_count, config.feature_dim)
    datagen.write_dataset_manifest(out / "dataset_manifest.txt", all_videos)
    sealed_rows = []
    for vid in sorted(benchmark.sealed):
        for inst in benchmark.sealed[vid]:
            sealed_rows.append([vid, inst.start, inst.end, inst.class_idx])
    write_csv(out / "sealed_truth.csv", ("video_id", "start", "end", "class"), sealed_rows)


def _cmd_pretrain(config: ExperimentConfig, out: Path) -> None:
    benchmark = datagen.generate_benchmark(config)
    params = selftrain.pretrain(benchmark.labeled, config)
    model.save_params(params, out / "checkpoint.txt")
    rows = [
        ["labeled_train_accuracy", selftrain.snippet_accuracy(params, benchmark.labeled, config)],
        ["test_accuracy", selftrain.snippet_accuracy(params, benchmark.test, config)],
    ]
    write_csv(out / "pretrain_metrics.csv", ("metric", "value"), rows)


def _cmd_selftrain(config: ExperimentConfig, out: Path, params_path: Optional[str]) -> None:
    benchmark = datagen.generate_benchmark(config)
    if params_path is not None:
        if not Path(params_path).is_file():
            raise MissingArtifactError(params_path, "pretrained checkpoint")
        params = model.load_params(
            params_path, config.model_input_dim, config.hidden_width, config.label_count
        )
    else:
        params = selftrain.pretrain(benchmark.labeled, config)
    sealed = selftrain.sealed_label_map(benchmark, config)
    params, metrics = selftrain.self_train_loop(
        params, benchmark.labeled, benchmark.unlabeled, config, sealed_labels=sealed
    )
    detections, evaluation = localize.evaluate_model(params, benchmark.test, config)
    model.save_params(params, out / "checkpoint.txt")
    write_metrics_jsonl(out / "metrics.jsonl", metrics)
    localize.write_detections(out / "detections.tsv", detections)
    write_map_csv(out / "map.csv", evaluation)


def _cmd_evaluate(config: ExperimentConfig, out: Path, params_path, detections_path) -> None:
    benchmark = datagen.generate_benchmark(config)
    if detections_path is not None:
        if not Path(detections_path).is_file():
            raise MissingArtifactError(detections_path, "detections file")
        detections = localize.load_detections(detections_path)
    elif params_path is not None:
        if not Path(params_path).is_file():
            raise MissingArtifactError(params_path, "model checkpoint")
        params = model.load_params(
            params_path, config.model_input_dim, config.hidden_width, config.label_count
        )
        detections = localize.detect_videos(params, benchmark.test, config)
        localize.write_detections(out / "detections.tsv", detections)
    else:
        raise _UsageError("evaluate needs --params or --detections")
    result = localize.mean_average_precision(
        detections, localize.ground_truth_map(benchmark.test), config.tiou_grid
    )
    write_map_csv(out / "map.csv", result)


def _seed_list(config: ExperimentConfig, count: int) -> List[int]:
    return [config.seed + i for i in range(count)]


def _cmd_ablate_losses(config: ExperimentConfig, out: Path, seeds: int) -> None:
    objectives = ("target-only", "target-negative", "hybrid")
    rows = []
    means = {}
    for objective in objectives:
        values = []
        for seed in _seed_list(config, seeds):
            result = run_experiment(config.replace(objective=objective, seed=seed))
            rows.append([objective, seed, result.evaluation.average_map])
            values.append(result.evaluation.average_map)
        means[objective] = float(np.mean(values))
    for objective in objectives:
        rows.append([objective, "mean", means[objective]])
    write_csv(out / "loss_ablation.csv", ("objective", "seed", "average_map"), rows)


def _cmd_ablate_lambda(config: ExperimentConfig, out: Path, seeds: int, grid: Sequence[float]) -> None:
    rows = []
    for lam in grid:
        values = []
        for seed in _seed_list(config, seeds):
            result = run_experiment(
                config.replace(positive_confidence_ratio=float(lam), seed=seed, objective="hybrid")
            )
            rows.append([f"{lam:g}", seed, result.evaluation.average_map])
            values.append(result.evaluation.average_map)
        rows.append([f"{lam:g}", "mean", float(np.mean(values))])
    write_csv(out / "lambda_sweep.csv", ("lambda", "seed", "average_map"), rows)


def _cmd_compare_baselines(config: ExperimentConfig, out: Path, seeds: int) -> None:
    objectives = ("soft-pseudo", "complementary", "hybrid")
    rows = []
    for objective in objectives:
        values = []
        for seed in _seed_list(config, seeds):
            result = run_experiment(config.replace(objective=objective, seed=seed))
            rows.append([objective, seed, result.evaluation.average_map])
            values.append(result.evaluation.average_map)
        rows.append([objective, "mean", float(np.mean(values))])
    write_csv(out / "baselines.csv", ("objective", "seed", "average_map"), rows)


def _cmd_subspace_audit(config: ExperimentConfig, out: Path) -> None:
    benchmark = datagen.generate_benchmark(config)
    params = selftrain.pretrain(benchmark.labeled, config)
    sealed = selftrain.sealed_label_map(benchmark, config)
    params, _ = selftrain.self_train_loop(
        params, benchmark.labeled, benchmark.unlabeled, config, sealed_labels=sealed
    )
    annotated = selftrain.assign_pseudo_labels(params, benchmark.unlabeled, config)
    stats = selftrain.subspace_statistics(annotated, sealed)
    rows = [
        ["target", stats.target_rate],
        ["positive", stats.positive_rate],
        ["ambiguous", stats.ambiguous_rate],
        ["negative", stats.negative_rate],
        ["positive_given_miss", stats.positive_rate_given_miss],
        ["ambiguous_given_miss", stats.ambiguous_rate_given_miss],
        ["negative_given_miss", stats.negative_rate_given_miss],
        ["snippet_count", stats.snippet_count],
    ]
    write_csv(out / "subspace.csv", ("subspace", "ground_truth_rate"), rows)


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_common(sub):
    sub.add_argument("--config", help="flat key = value config file")
    sub.add_argument("--seed", type=int, help="base RNG seed")
    sub.add_argument("--out", help="output directory (default: $PNTAL_OUT/<command>)")
    sub.add_argument("--labeled-ratio", type=float, dest="labeled_ratio")
    sub.add_argument(
        "--lambda", type=float, dest="positive_confidence_ratio",
        help="positive-class confidence ratio",
    )
    sub.add_argument(
        "--alpha", type=float, dest="unlabeled_loss_weight", help="unsupervised loss weight"
    )
    sub.add_argument("--objective", choices=list(OBJECTIVES))


def _build_parser() -> _Parser:
    parser = _Parser(prog="pntal", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    for name in ("generate", "pretrain", "subspace-audit"):
        _add_common(subs.add_parser(name))
    st = subs.add_parser("selftrain")
    _add_common(st)
    st.add_argument("--params", help="pretrained checkpoint to start from")
    ev = subs.add_parser("evaluate")
    _add_common(ev)
    ev.add_argument("--params", help="model checkpoint to evaluate")
    ev.add_argument("--detections", help="detection dump to evaluate instead of a model")
    for name in ("ablate-losses", "compare-baselines"):
        sweep = subs.add_parser(name)
        _add_common(sweep)
        sweep.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    al = subs.add_parser("ablate-lambda")
    _add_common(al)
    al.add_argument("--seeds", type=int, default=5)
    al.add_argument(
        "--grid", type=float, nargs="+", default=list(LAMBDA_GRID_DEFAULT),
        help="lambda values to sweep",
    )
    return parser


def _out_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        out = Path(root) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        overrides = {
            "seed": args.seed,
            "labeled_ratio": args.labeled_ratio,
            "positive_confidence_ratio": args.positive_confidence_ratio,
            "unlabeled_loss_weight": args.unlabeled_loss_weight,
            "objective": args.objective,
        }
        config = load_config(args.config, overrides)
        out = _out_dir(args)
        started = time.perf_counter()
        if args.command == "generate":
            _cmd_generate(config, out)
        elif args.command == "pretrain":
            _cmd_pretrain(config, out)
        elif args.command == "selftrain":
            _cmd_selftrain(config, out, args.params)
        elif args.command == "evaluate":
            _cmd_evaluate(config, out, args.params, args.detections)
        elif args.command == "ablate-losses":
            _cmd_ablate_losses(config, out, args.seeds)
        elif args.command == "ablate-lambda":
            _cmd_ablate_lambda(config, out, args.seeds, args.grid)
        elif args.command == "compare-baselines":
            _cmd_compare_baselines(config, out, args.seeds)
        elif args.command == "subspace-audit":
            _cmd_subspace_audit(config, out)
        write_manifest(out, config, args.command, time.perf_counter() - started)
        return 0
    except (_UsageError, BadConfigError) as exc:
        print(f"pntal: configuration error: {exc}", file=sys.stderr)
        return 1
    except (Error, OSError) as exc:
        print(f"pntal: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
