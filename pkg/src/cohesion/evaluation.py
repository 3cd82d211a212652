"""MSE metrics (overall and per level), the experiment-matrix runner that
reproduces the method x dataset-variant evaluation grid, and report files.

Report file (UTF-8, LF):
    line 1: `#cohesion-report v1 seed=<s> scale=raw`
    line 2: `method\\tdataset\\tsplit\\tn\\tmse\\tmse_l0\\tmse_l1\\tmse_l2\\tmse_l3`
    one row per cell, floats with 6 decimals, absent level MSE as `-`.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .dataset import (
    LEVELS,
    LabeledDataset,
    balance_downsample,
    denormalize_prediction,
    normalize_label,
)
from .errors import (
    EmptyFileError,
    EmptyTruthError,
    HeaderMismatchError,
    InvariantViolationError,
    LevelOutOfRangeError,
    MalformedRecordError,
    MissingPredictionError,
)
from .feature_store import apply_standardizer, fit_standardizer
from .svr import KernelSpec, SvrHyperparams, SvrModel, default_gamma, predict_batch, train_svr

VARIANTS = ("train", "balanced_train", "train_plus_val", "balanced_train_plus_val")
FUSION_METHODS = ("fusion_average", "fusion_grid")
BASELINE_METHOD = "baseline"

# Built-in modalities render in this order; custom ones follow alphabetically.
_PREFERRED_METHOD_ORDER = ("face", "skeleton", "scene")

# Fraction of the merged train+val pool held out for weight selection.
HOLDOUT_FRACTION = 0.1

_REPORT_HEADER_RE = re.compile(
    r"^#cohesion-report v1 seed=(-?\d+)(?: scale=(normalized|raw))?$"
)
_COLUMNS = "method\tdataset\tsplit\tn\tmse\tmse_l0\tmse_l1\tmse_l2\tmse_l3"


def mse(pred: Mapping[str, float], truth: Mapping[str, float]) -> float:
    """Mean squared error over the truth keys (raw [0,3] scale)."""
    if not truth:
        raise EmptyTruthError("mse requires a non-empty truth map")
    total = 0.0
    for image_id in sorted(truth):
        if image_id not in pred:
            raise MissingPredictionError(f"no prediction for image {image_id!r}")
        diff = pred[image_id] - truth[image_id]
        total += diff * diff
    return total / len(truth)


def per_level_mse(
    pred: Mapping[str, float], truth: Mapping[str, int]
) -> tuple[list[float | None], list[int]]:
    """MSE restricted to each true level; absent levels get (None, 0)."""
    if not truth:
        raise EmptyTruthError("per_level_mse requires a non-empty truth map")
    for image_id, level in truth.items():
        if level not in LEVELS:
            raise LevelOutOfRangeError(
                f"image {image_id!r}: level must be one of {LEVELS}, got {level}"
            )
    mses: list[float | None] = []
    counts: list[int] = []
    for level in LEVELS:
        subset = {i: l for i, l in truth.items() if l == level}
        counts.append(len(subset))
        mses.append(mse(pred, subset) if subset else None)
    return mses, counts


@dataclass(frozen=True)
class ReportRow:
    """One experiment-matrix cell.  Per-level counts are None when the row
    was parsed back from a file (the format does not serialize them)."""

    method: str
    dataset_variant: str
    eval_split: str
    n: int
    mse_overall: float
    mse_per_level: tuple[float | None, float | None, float | None, float | None]
    n_per_level: tuple[int | None, int | None, int | None, int | None]

    def __post_init__(self):
        if self.n < 0:
            raise InvariantViolationError("n must be non-negative")
        if self.mse_overall < 0:
            raise InvariantViolationError("mse must be non-negative")
        if len(self.mse_per_level) != 4 or len(self.n_per_level) != 4:
            raise InvariantViolationError("per-level columns must have 4 entries")
        for value, count in zip(self.mse_per_level, self.n_per_level):
            if value is not None and value < 0:
                raise InvariantViolationError("mse must be non-negative")
            if count is None:
                continue
            if count < 0:
                raise InvariantViolationError("counts must be non-negative")
            if (value is None) != (count == 0):
                raise InvariantViolationError(
                    "per-level MSE must be absent exactly for empty levels"
                )

    @classmethod
    def from_metrics(
        cls,
        method: str,
        dataset_variant: str,
        eval_split: str,
        pred: Mapping[str, float],
        truth: Mapping[str, int],
    ) -> "ReportRow":
        overall = mse(pred, truth)
        level_mses, level_counts = per_level_mse(pred, truth)
        recombined = (
            sum(m * c for m, c in zip(level_mses, level_counts) if m is not None)
            / sum(level_counts)
        )
        if abs(recombined - overall) > 1e-9:
            raise InvariantViolationError(
                f"per-level recombination {recombined!r} disagrees with overall {overall!r}"
            )
        return cls(
            method=method,
            dataset_variant=dataset_variant,
            eval_split=eval_split,
            n=len(truth),
            mse_overall=overall,
            mse_per_level=tuple(level_mses),
            n_per_level=tuple(level_counts),
        )


@dataclass(frozen=True)
class EvaluationReport:
    seed: int
    rows: tuple[ReportRow, ...]
    scale: str = "raw"
    hyper_summary: str = ""

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))


def render_report(r: EvaluationReport) -> str:
    out = [f"#cohesion-report v1 seed={r.seed} scale={r.scale}"]
    if r.hyper_summary:
        out.append(f"# hyperparams: {r.hyper_summary}")
    out.append(_COLUMNS)
    for row in r.rows:
        cells = [
            row.method,
            row.dataset_variant,
            row.eval_split,
            str(row.n),
            f"{row.mse_overall:.6f}",
        ]
        for value in row.mse_per_level:
            cells.append("-" if value is None else f"{value:.6f}")
        out.append("\t".join(cells))
    return "\n".join(out) + "\n"


def write_report(stream: IO[str], r: EvaluationReport) -> None:
    stream.write(render_report(r))


def parse_report(stream: Iterable[str]) -> EvaluationReport:
    lines = iter(stream)
    first = next(lines, None)
    if first is None:
        raise EmptyFileError("report file has no header line")
    match = _REPORT_HEADER_RE.match(first.rstrip("\n"))
    if not match:
        raise HeaderMismatchError(f"bad report header: {first.rstrip()!r}")
    seed = int(match.group(1))
    scale = match.group(2) or "raw"

    hyper_summary = ""
    rows: list[ReportRow] = []
    saw_columns = False
    for lineno, raw in enumerate(lines, start=2):
        line = raw.rstrip("\n")
        if not line:
            continue
        if line.startswith("# hyperparams: "):
            hyper_summary = line[len("# hyperparams: "):]
            continue
        if line.startswith("#"):
            continue
        if not saw_columns:
            if line != _COLUMNS:
                raise MalformedRecordError(
                    f"line {lineno}: expected column header {_COLUMNS!r}"
                )
            saw_columns = True
            continue
        parts = line.split("\t")
        if len(parts) != 9:
            raise MalformedRecordError(
                f"line {lineno}: expected 9 columns, got {len(parts)}"
            )
        try:
            n = int(parts[3])
            overall = float(parts[4])
            level_values = tuple(
                None if cell == "-" else float(cell) for cell in parts[5:9]
            )
        except ValueError as exc:
            raise MalformedRecordError(f"line {lineno}: {exc}") from exc
        counts = tuple(0 if v is None else None for v in level_values)
        rows.append(
            ReportRow(
                method=parts[0],
                dataset_variant=parts[1],
                eval_split=parts[2],
                n=n,
                mse_overall=overall,
                mse_per_level=level_values,
                n_per_level=counts,
            )
        )
    if not saw_columns:
        raise MalformedRecordError("report file has no column header line")
    return EvaluationReport(seed=seed, rows=tuple(rows), scale=scale, hyper_summary=hyper_summary)


def save_report(path: str | Path, r: EvaluationReport) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_report(fh, r)


def load_report(path: str | Path) -> EvaluationReport:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_report(fh)


@dataclass(frozen=True)
class MatrixConfig:
    """Everything one experiment-matrix run needs.

    `features` maps modality -> image_id -> raw per-image vector (faces
    already averaged).  kernel=None picks rbf with gamma = 1/dim per
    modality.  methods/variants default to the full grid on `val`.
    """

    ds: LabeledDataset
    features: Mapping[str, Mapping[str, np.ndarray]]
    methods: tuple[str, ...] | None = None
    variants: tuple[str, ...] = ("train",)
    eval_split: str = "val"
    kernel: KernelSpec | None = None
    hyper: SvrHyperparams = field(default_factory=SvrHyperparams)
    grid_step: float = 0.05
    balance_ratio: float = 0.3
    balance_level: int = 2
    seed: int = 42

    def __post_init__(self):
        for v in self.variants:
            if v not in VARIANTS:
                raise InvariantViolationError(f"unknown dataset variant {v!r}")
        if self.eval_split not in ("val", "test"):
            raise InvariantViolationError(
                f"eval split must be val or test, got {self.eval_split!r}"
            )

    def method_order(self) -> tuple[str, ...]:
        if self.methods is not None:
            return tuple(self.methods)
        names = set(self.features)
        ordered = [m for m in _PREFERRED_METHOD_ORDER if m in names]
        ordered += sorted(names - set(_PREFERRED_METHOD_ORDER))
        return (BASELINE_METHOD, *ordered, *FUSION_METHODS)

    def hyper_summary(self) -> str:
        kernel = "rbf(gamma=1/dim)" if self.kernel is None else (
            f"{self.kernel.kind}(gamma={self.kernel.gamma})"
        )
        h = self.hyper
        return (
            f"kernel={kernel} C={h.C} epsilon={h.epsilon} tol={h.tol} "
            f"max_iter={h.max_iter} grid_step={self.grid_step} "
            f"balance={self.balance_ratio}@L{self.balance_level}"
        )


def prepare_variant(
    ds: LabeledDataset,
    variant: str,
    seed: int,
    balance_ratio: float = 0.3,
    balance_level: int = 2,
) -> LabeledDataset:
    """Materialize a dataset variant.

    balanced variants downsample the train split first; *_plus_val variants
    then move val into train and carve a seeded 10% holdout back out as the
    new val split (used for fusion weight selection).
    """
    if variant not in VARIANTS:
        raise InvariantViolationError(f"unknown dataset variant {variant!r}")
    out = ds
    if variant in ("balanced_train", "balanced_train_plus_val"):
        out = balance_downsample(out, balance_level, balance_ratio, seed)
    if variant in ("train_plus_val", "balanced_train_plus_val"):
        merged = {
            i: ("train" if s == "val" else s) for i, s in out.split.items()
        }
        pool = sorted(i for i, s in merged.items() if s == "train")
        n_holdout = max(1, math.floor(HOLDOUT_FRACTION * len(pool)))
        rng = np.random.default_rng([seed, 1])
        holdout = rng.choice(np.array(pool, dtype=object), size=n_holdout, replace=False)
        for image_id in holdout:
            merged[image_id] = "val"
        out = LabeledDataset(out.entries, merged)
    return out


def train_modality_models(
    features: Mapping[str, Mapping[str, np.ndarray]],
    ds: LabeledDataset,
    kernel: KernelSpec | None,
    hyper: SvrHyperparams,
) -> dict[str, SvrModel]:
    """One SVR per modality on its covered train images (normalized targets).

    Standardizers are fit on the training vectors of each modality and
    attached to the models.
    """
    train_levels = ds.levels("train")
    models: dict[str, SvrModel] = {}
    for name in sorted(features):
        vectors = features[name]
        train_ids = sorted(i for i in train_levels if i in vectors)
        X_raw = [np.asarray(vectors[i], dtype=np.float64) for i in train_ids]
        y = np.array([normalize_label(train_levels[i]) for i in train_ids])
        standardizer = fit_standardizer(X_raw) if X_raw else None
        X = np.stack([apply_standardizer(standardizer, v) for v in X_raw]) if X_raw else np.zeros((0, 0))
        k = kernel if kernel is not None else KernelSpec("rbf", default_gamma(X.shape[1] if X.size else 1))
        models[name] = train_svr(X, y, k, hyper, standardizer=standardizer)
    return models


@dataclass(frozen=True)
class VariantRun:
    """Artifacts of one dataset-variant pipeline pass."""

    variant: str
    ds: LabeledDataset
    models: Mapping[str, SvrModel]
    predictions: "ModalityPredictions"  # type: ignore[name-defined]
    baseline_value: float  # normalized scale
    grid_weights: "FusionWeights | None"  # type: ignore[name-defined]


def run_variant(
    cfg: MatrixConfig,
    variant: str,
    need_grid: bool = True,
) -> VariantRun:
    from .fusion import build_predictions, grid_search_weights

    ds_v = prepare_variant(cfg.ds, variant, cfg.seed, cfg.balance_ratio, cfg.balance_level)
    models = train_modality_models(cfg.features, ds_v, cfg.kernel, cfg.hyper)
    preds = build_predictions(models, cfg.features, ds_v.ids("train"))
    train_levels = ds_v.levels("train")
    baseline = float(np.mean([normalize_label(l) for l in train_levels.values()]))
    weights = None
    if need_grid:
        truth_norm = {
            i: normalize_label(l) for i, l in ds_v.levels("val").items()
        }
        weights = grid_search_weights(preds, truth_norm, cfg.grid_step)
    return VariantRun(
        variant=variant,
        ds=ds_v,
        models=models,
        predictions=preds,
        baseline_value=baseline,
        grid_weights=weights,
    )


def method_predictions(run: VariantRun, method: str) -> dict[str, float]:
    """Normalized-scale predictions of one method over the full image set.

    Single-modality methods go through vertex-weight fusion so their values
    are bit-identical to the corresponding grid-search candidates.
    """
    from .fusion import FusionWeights, fuse_average, fuse_weighted

    p = run.predictions
    if method == BASELINE_METHOD:
        return {i: run.baseline_value for i in p.image_ids()}
    if method == "fusion_average":
        return fuse_average(p)
    if method == "fusion_grid":
        if run.grid_weights is None:
            raise InvariantViolationError("variant run was built without grid weights")
        return fuse_weighted(p, run.grid_weights)
    modalities = p.modalities()
    if method not in modalities:
        raise InvariantViolationError(f"unknown method {method!r}")
    vertex = np.array([1.0 if m == method else 0.0 for m in modalities])
    return fuse_weighted(p, FusionWeights(modalities, vertex, "average"))


def run_experiment_matrix(cfg: MatrixConfig) -> EvaluationReport:
    """Full pipeline per (variant x method) cell, evaluated on cfg.eval_split.

    Deterministic per seed: balancing, holdout carving, and training all key
    off cfg.seed; candidate ties resolve lexicographically.
    """
    methods = cfg.method_order()
    rows: list[ReportRow] = []
    for variant in cfg.variants:
        need_grid = "fusion_grid" in methods
        run = run_variant(cfg, variant, need_grid=need_grid)
        truth = run.ds.levels(cfg.eval_split)
        if not truth:
            raise EmptyTruthError(
                f"no labeled {cfg.eval_split} images in variant {variant!r}"
            )
        for method in methods:
            normalized = method_predictions(run, method)
            raw = {i: denormalize_prediction(v) for i, v in normalized.items()}
            rows.append(
                ReportRow.from_metrics(method, variant, cfg.eval_split, raw, truth)
            )
    return EvaluationReport(
        seed=cfg.seed,
        rows=tuple(rows),
        scale="raw",
        hyper_summary=cfg.hyper_summary(),
    )
