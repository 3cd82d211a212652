"""Late fusion of per-modality predictions: uniform averaging and grid search
over the weight simplex, selected by validation MSE on the raw label scale.

Weights file (UTF-8, LF):
    line 1: `#cohesion-weights v1 strategy=<average|grid_search> step=<s>`
    then one `<modality>\\t<weight>` line per modality.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .dataset import denormalize_prediction
from .errors import (
    BadStepError,
    DuplicateIdError,
    EmptyFileError,
    EmptyValidationSetError,
    HeaderMismatchError,
    InvariantViolationError,
    MalformedRecordError,
    MissingModalityError,
    ModalityMismatchError,
)
from .evaluation import mse
from .feature_store import format_float
from .svr import SvrModel, predict_batch

STRATEGIES = ("average", "grid_search")
DEFAULT_GRID_STEP = 0.05

_WEIGHTS_HEADER_RE = re.compile(
    r"^#cohesion-weights v1 strategy=(average|grid_search) step=(\S+)$"
)


@dataclass(frozen=True, eq=False)
class ModalityPredictions:
    """Per-modality normalized predictions with identical image coverage.

    Images a modality never saw (e.g. zero detected faces) carry that
    modality's imputation value: its mean training-split prediction.
    `imputed_counts` says how many slots were filled that way.
    """

    predictions: Mapping[str, Mapping[str, float]]
    imputation_values: Mapping[str, float]
    imputed_counts: Mapping[str, int]

    def __post_init__(self):
        preds = {m: dict(v) for m, v in self.predictions.items()}
        object.__setattr__(self, "predictions", preds)
        object.__setattr__(self, "imputation_values", dict(self.imputation_values))
        object.__setattr__(self, "imputed_counts", dict(self.imputed_counts))
        if not preds:
            raise MissingModalityError("at least one modality is required")
        key_sets = {m: set(v) for m, v in preds.items()}
        first = next(iter(key_sets.values()))
        for m, keys in key_sets.items():
            if keys != first:
                raise InvariantViolationError(
                    f"modality {m!r} covers a different image set"
                )
        if set(self.imputation_values) != set(preds):
            raise InvariantViolationError("imputation values must cover every modality")
        for m, values in preds.items():
            for image_id, v in values.items():
                if not math.isfinite(v):
                    raise InvariantViolationError(
                        f"non-finite prediction for {image_id!r} in modality {m!r}"
                    )

    def modalities(self) -> tuple[str, ...]:
        return tuple(sorted(self.predictions))

    def image_ids(self) -> list[str]:
        return sorted(next(iter(self.predictions.values())))

    @classmethod
    def from_maps(
        cls,
        raw: Mapping[str, Mapping[str, float]],
        train_ids: Iterable[str],
    ) -> "ModalityPredictions":
        """Impute union coverage from possibly-partial per-modality maps.

        Each modality's imputation value is its mean prediction over the
        training-split images it actually covers.
        """
        if not raw:
            raise MissingModalityError("at least one modality is required")
        train = set(train_ids)
        union: set[str] = set()
        for m, values in raw.items():
            if not values:
                raise MissingModalityError(f"modality {m!r} has no predictions")
            union.update(values)
        imputation: dict[str, float] = {}
        counts: dict[str, int] = {}
        filled: dict[str, dict[str, float]] = {}
        for m, values in raw.items():
            covered_train = [v for i, v in values.items() if i in train]
            if not covered_train:
                raise InvariantViolationError(
                    f"modality {m!r} has no training-split predictions to impute from"
                )
            imputation[m] = float(np.mean(covered_train))
            out = {}
            n_imputed = 0
            for image_id in union:
                if image_id in values:
                    out[image_id] = float(values[image_id])
                else:
                    out[image_id] = imputation[m]
                    n_imputed += 1
            counts[m] = n_imputed
            filled[m] = out
        return cls(filled, imputation, counts)


@dataclass(frozen=True, eq=False)
class FusionWeights:
    """Nonnegative per-modality weights summing to 1."""

    modalities: tuple[str, ...]
    weights: np.ndarray
    strategy: str
    step: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        weights = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", weights)
        if self.strategy not in STRATEGIES:
            raise InvariantViolationError(
                f"strategy must be one of {STRATEGIES}, got {self.strategy!r}"
            )
        if len(self.modalities) != len(weights) or len(weights) == 0:
            raise InvariantViolationError("one weight per modality required")
        if len(set(self.modalities)) != len(self.modalities):
            raise InvariantViolationError("modalities must be unique")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise InvariantViolationError("weights must be finite and non-negative")
        if abs(float(weights.sum()) - 1.0) > 1e-9:
            raise InvariantViolationError(
                f"weights must sum to 1 within 1e-9, got {weights.sum()!r}"
            )

    def as_map(self) -> dict[str, float]:
        return {m: float(w) for m, w in zip(self.modalities, self.weights)}


def build_predictions(
    models: Mapping[str, SvrModel],
    features: Mapping[str, Mapping[str, np.ndarray]],
    train_ids: Iterable[str],
) -> ModalityPredictions:
    """Predict every covered image per modality, then impute union coverage.

    `features` maps modality -> image_id -> raw per-image vector (faces
    already averaged).  Vectors are standardized by each model itself.
    """
    if not models:
        raise MissingModalityError("at least one model is required")
    raw: dict[str, dict[str, float]] = {}
    for m, model in models.items():
        vectors = features.get(m)
        if not vectors:
            raise MissingModalityError(f"no features for modality {m!r}")
        ids = sorted(vectors)
        X = np.stack([np.asarray(vectors[i], dtype=np.float64) for i in ids])
        preds = predict_batch(model, X)
        raw[m] = {i: float(p) for i, p in zip(ids, preds)}
    return ModalityPredictions.from_maps(raw, train_ids)


def fuse_weighted(p: ModalityPredictions, w: FusionWeights) -> dict[str, float]:
    """fused(img) = sum_m w_m * pred_m(img); modalities must match exactly."""
    if tuple(sorted(w.modalities)) != p.modalities():
        raise ModalityMismatchError(
            f"weights cover {sorted(w.modalities)}, predictions cover {list(p.modalities())}"
        )
    weight_of = w.as_map()
    fused: dict[str, float] = {}
    for image_id in p.image_ids():
        total = 0.0
        for m in p.modalities():
            total += weight_of[m] * p.predictions[m][image_id]
        fused[image_id] = total
    return fused


def uniform_weights(modalities: Sequence[str]) -> FusionWeights:
    count = len(modalities)
    return FusionWeights(
        modalities=tuple(modalities),
        weights=np.full(count, 1.0 / count),
        strategy="average",
    )


def fuse_average(p: ModalityPredictions) -> dict[str, float]:
    """Uniform-weight fusion (1/M per modality)."""
    return fuse_weighted(p, uniform_weights(p.modalities()))


def grid_candidates(m_count: int, step: float) -> list[np.ndarray]:
    """All simplex lattice points with coordinates that are multiples of
    `step`, in ascending lexicographic order, plus the exact uniform vector
    appended when it is not already on the lattice.

    Vertices e_i are always included, so grid search can never lose to a
    single modality; the uniform vector guarantees it never loses to plain
    averaging either.
    """
    if m_count < 1:
        raise InvariantViolationError(f"need at least one modality, got {m_count}")
    if not (isinstance(step, float) or isinstance(step, int)) or not (0 < step <= 1):
        raise BadStepError(f"step must be in (0, 1], got {step!r}")
    resolution = round(1.0 / step)
    if resolution < 1 or abs(resolution * step - 1.0) > 1e-9:
        raise BadStepError(f"step={step!r} does not divide 1 within 1e-9")

    candidates: list[np.ndarray] = []

    def build(prefix: list[int], remaining: int, slots: int) -> None:
        if slots == 1:
            counts = prefix + [remaining]
            candidates.append(np.array([c * step for c in counts], dtype=np.float64))
            return
        for c in range(remaining + 1):
            build(prefix + [c], remaining - c, slots - 1)

    build([], resolution, m_count)
    uniform = np.full(m_count, 1.0 / m_count)
    if not any(np.array_equal(uniform, c) for c in candidates):
        candidates.append(uniform)
    return candidates


def grid_search_weights(
    p: ModalityPredictions,
    truth_normalized: Mapping[str, float],
    step: float = DEFAULT_GRID_STEP,
) -> FusionWeights:
    """Pick the candidate with minimal raw-scale MSE over `truth_normalized`
    (selection set, usually the validation split; values are level/3).

    Ties keep the earliest candidate, so the result does not depend on
    evaluation order.
    """
    if not truth_normalized:
        raise EmptyValidationSetError("weight selection requires a non-empty truth map")
    modalities = p.modalities()
    truth_raw = {i: denormalize_prediction(v) for i, v in truth_normalized.items()}
    best: FusionWeights | None = None
    best_mse = math.inf
    for vec in grid_candidates(len(modalities), step):
        w = FusionWeights(modalities, vec, "grid_search", step=step)
        fused = fuse_weighted(p, w)
        raw = {i: denormalize_prediction(v) for i, v in fused.items()}
        score = mse(raw, truth_raw)
        if score < best_mse:
            best_mse = score
            best = w
    return best


def write_weights(stream: IO[str], w: FusionWeights) -> None:
    step = w.step if w.step is not None else 0.0
    stream.write(
        f"#cohesion-weights v1 strategy={w.strategy} step={format_float(step)}\n"
    )
    for m, weight in zip(w.modalities, w.weights):
        stream.write(f"{m}\t{format_float(weight)}\n")


def parse_weights(stream: Iterable[str]) -> FusionWeights:
    lines = iter(stream)
    first = next(lines, None)
    if first is None:
        raise EmptyFileError("weights file has no header line")
    match = _WEIGHTS_HEADER_RE.match(first.rstrip("\n"))
    if not match:
        raise HeaderMismatchError(f"bad weights header: {first.rstrip()!r}")
    strategy, step_text = match.groups()
    try:
        step = float(step_text)
    except ValueError as exc:
        raise HeaderMismatchError(f"bad weights header step: {exc}") from exc
    modalities: list[str] = []
    weights: list[float] = []
    for lineno, raw in enumerate(lines, start=2):
        line = raw.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise MalformedRecordError(
                f"line {lineno}: expected `<modality>\\t<weight>`, got {len(parts)} fields"
            )
        if parts[0] in modalities:
            raise DuplicateIdError(f"line {lineno}: duplicate modality {parts[0]!r}")
        try:
            value = float(parts[1])
        except ValueError as exc:
            raise MalformedRecordError(f"line {lineno}: {exc}") from exc
        modalities.append(parts[0])
        weights.append(value)
    if not modalities:
        raise MalformedRecordError("weights file has no modality lines")
    return FusionWeights(
        modalities=tuple(modalities),
        weights=np.array(weights, dtype=np.float64),
        strategy=strategy,
        step=step if step > 0 else None,
    )


def save_weights(path: str | Path, w: FusionWeights) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_weights(fh, w)


def load_weights(path: str | Path) -> FusionWeights:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_weights(fh)
