"""Labels, split assignments, label-scale conversion, training-split
downsampling, and a seeded synthetic multi-modal dataset generator.

File formats (UTF-8, LF; `#` lines after the header are comments):
    labels:      `#cohesion-labels v1`                       then `<image_id>\\t<level>`
    splits:      `#cohesion-splits v1`                       then `<image_id>\\t<train|val|test>`
    predictions: `#cohesion-predictions v1 scale=<normalized|raw>`
                                                             then `<image_id>\\t<value>`
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Mapping

import numpy as np

from .errors import (
    DuplicateIdError,
    EmptyFileError,
    HeaderMismatchError,
    InvariantViolationError,
    LevelOutOfRangeError,
    MalformedRecordError,
    NonFiniteInputError,
)
from .feature_store import FeatureRecord, ModalitySpec, format_float

LEVELS = (0, 1, 2, 3)
SPLITS = ("train", "val", "test")
PREDICTION_SCALES = ("normalized", "raw")

# Modalities in canonical generation order.
MODALITY_NAMES = ("face", "skeleton", "scene")

# Spread of the latent cohesion factor around level/3.
LATENT_SIGMA = 0.02

_LEVEL_RE = re.compile(r"^-?\d+$")
_PRED_HEADER_RE = re.compile(r"^#cohesion-predictions v1 scale=(normalized|raw)$")


@dataclass(frozen=True)
class CohesionLabel:
    """Group-cohesion level: one of 0 (weakest) .. 3 (strongest)."""

    level: int

    def __post_init__(self):
        if self.level not in LEVELS:
            raise LevelOutOfRangeError(
                f"cohesion level must be one of {LEVELS}, got {self.level}"
            )


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Image ids with labels and train/val/test assignment.

    Every labeled image has a split; train and val members must be labeled,
    test members may be unlabeled (hidden-label workflow).
    """

    entries: Mapping[str, CohesionLabel]
    split: Mapping[str, str]

    def __post_init__(self):
        object.__setattr__(self, "entries", dict(self.entries))
        object.__setattr__(self, "split", dict(self.split))
        for image_id, s in self.split.items():
            if s not in SPLITS:
                raise InvariantViolationError(
                    f"image {image_id!r}: split must be one of {SPLITS}, got {s!r}"
                )
        for image_id in self.entries:
            if image_id not in self.split:
                raise InvariantViolationError(
                    f"labeled image {image_id!r} has no split assignment"
                )
        for image_id, s in self.split.items():
            if s in ("train", "val") and image_id not in self.entries:
                raise InvariantViolationError(
                    f"{s} image {image_id!r} has no label"
                )

    @classmethod
    def from_levels(cls, levels: Mapping[str, int], split: Mapping[str, str]) -> "LabeledDataset":
        return cls({i: CohesionLabel(l) for i, l in levels.items()}, split)

    def ids(self, split: str | None = None) -> list[str]:
        """Sorted image ids, optionally restricted to one split."""
        if split is None:
            return sorted(self.split)
        if split not in SPLITS:
            raise InvariantViolationError(f"unknown split {split!r}")
        return sorted(i for i, s in self.split.items() if s == split)

    def levels(self, split: str | None = None) -> dict[str, int]:
        """image_id -> integer level for labeled members of `split` (or all)."""
        return {
            i: self.entries[i].level
            for i in self.ids(split)
            if i in self.entries
        }

    def count_by_level(self, split: str) -> dict[int, int]:
        counts = {l: 0 for l in LEVELS}
        for level in self.levels(split).values():
            counts[level] += 1
        return counts


def _read_header(stream: Iterable[str], expected: str, what: str):
    lines = iter(stream)
    first = next(lines, None)
    if first is None:
        raise EmptyFileError(f"{what} file has no header line")
    if first.rstrip("\n") != expected:
        raise HeaderMismatchError(
            f"bad {what} header: {first.rstrip()!r} (want {expected!r})"
        )
    return lines


def _records(lines: Iterable[str], nfields: int):
    """Yield (lineno, fields) for data lines, skipping blanks and comments."""
    for lineno, raw in enumerate(lines, start=2):
        line = raw.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != nfields:
            raise MalformedRecordError(
                f"line {lineno}: expected {nfields} tab-separated fields, got {len(parts)}"
            )
        yield lineno, parts


def parse_labels(stream: Iterable[str]) -> dict[str, int]:
    """Parse a labels file into an image_id -> level map."""
    lines = _read_header(stream, "#cohesion-labels v1", "labels")
    out: dict[str, int] = {}
    for lineno, (image_id, level_text) in _records(lines, 2):
        if not image_id:
            raise MalformedRecordError(f"line {lineno}: empty image_id")
        if not _LEVEL_RE.match(level_text):
            raise MalformedRecordError(
                f"line {lineno}: level must be an integer, got {level_text!r}"
            )
        level = int(level_text)
        if level not in LEVELS:
            raise LevelOutOfRangeError(
                f"line {lineno}: level must be one of {LEVELS}, got {level}"
            )
        if image_id in out:
            raise DuplicateIdError(f"line {lineno}: duplicate image_id {image_id!r}")
        out[image_id] = level
    return out


def write_labels(stream: IO[str], levels: Mapping[str, int]) -> None:
    stream.write("#cohesion-labels v1\n")
    for image_id in sorted(levels):
        level = levels[image_id]
        if level not in LEVELS:
            raise LevelOutOfRangeError(
                f"image {image_id!r}: level must be one of {LEVELS}, got {level}"
            )
        stream.write(f"{image_id}\t{level}\n")


def parse_splits(stream: Iterable[str]) -> dict[str, str]:
    """Parse a splits file into an image_id -> split map."""
    lines = _read_header(stream, "#cohesion-splits v1", "splits")
    out: dict[str, str] = {}
    for lineno, (image_id, split) in _records(lines, 2):
        if not image_id:
            raise MalformedRecordError(f"line {lineno}: empty image_id")
        if split not in SPLITS:
            raise MalformedRecordError(
                f"line {lineno}: split must be one of {SPLITS}, got {split!r}"
            )
        if image_id in out:
            raise DuplicateIdError(f"line {lineno}: duplicate image_id {image_id!r}")
        out[image_id] = split
    return out


def write_splits(stream: IO[str], split: Mapping[str, str]) -> None:
    stream.write("#cohesion-splits v1\n")
    for image_id in sorted(split):
        s = split[image_id]
        if s not in SPLITS:
            raise InvariantViolationError(
                f"image {image_id!r}: split must be one of {SPLITS}, got {s!r}"
            )
        stream.write(f"{image_id}\t{s}\n")


def parse_predictions(stream: Iterable[str]) -> tuple[str, dict[str, float]]:
    """Parse a predictions file; returns (scale, image_id -> value)."""
    lines = iter(stream)
    first = next(lines, None)
    if first is None:
        raise EmptyFileError("predictions file has no header line")
    m = _PRED_HEADER_RE.match(first.rstrip("\n"))
    if not m:
        raise HeaderMismatchError(f"bad predictions header: {first.rstrip()!r}")
    scale = m.group(1)
    out: dict[str, float] = {}
    for lineno, (image_id, value_text) in _records(lines, 2):
        if not image_id:
            raise MalformedRecordError(f"line {lineno}: empty image_id")
        try:
            value = float(value_text)
        except ValueError as exc:
            raise MalformedRecordError(f"line {lineno}: {exc}") from exc
        if not math.isfinite(value):
            raise MalformedRecordError(f"line {lineno}: non-finite prediction")
        if image_id in out:
            raise DuplicateIdError(f"line {lineno}: duplicate image_id {image_id!r}")
        out[image_id] = value
    return scale, out


def write_predictions(stream: IO[str], preds: Mapping[str, float], scale: str) -> None:
    if scale not in PREDICTION_SCALES:
        raise InvariantViolationError(
            f"scale must be one of {PREDICTION_SCALES}, got {scale!r}"
        )
    stream.write(f"#cohesion-predictions v1 scale={scale}\n")
    for image_id in sorted(preds):
        value = preds[image_id]
        if not math.isfinite(value):
            raise NonFiniteInputError(f"image {image_id!r}: non-finite prediction")
        stream.write(f"{image_id}\t{format_float(value)}\n")


def read_labels(path: str | Path) -> dict[str, int]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_labels(fh)


def save_labels(path: str | Path, levels: Mapping[str, int]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_labels(fh, levels)


def read_splits(path: str | Path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_splits(fh)


def save_splits(path: str | Path, split: Mapping[str, str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_splits(fh, split)


def read_predictions(path: str | Path) -> tuple[str, dict[str, float]]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_predictions(fh)


def save_predictions(path: str | Path, preds: Mapping[str, float], scale: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_predictions(fh, preds, scale)


def normalize_label(level: int) -> float:
    """Map a level in {0..3} onto [0,1] by dividing by 3."""
    if level not in LEVELS:
        raise LevelOutOfRangeError(f"level must be one of {LEVELS}, got {level}")
    return level / 3


def denormalize_prediction(y: float) -> float:
    """Inverse of normalize_label with clamping: clamp(y, 0, 1) * 3."""
    if not math.isfinite(y):
        raise NonFiniteInputError(f"prediction must be finite, got {y!r}")
    return min(max(y, 0.0), 1.0) * 3.0


def balance_downsample(ds: LabeledDataset, level: int, ratio: float, seed: int) -> LabeledDataset:
    """Remove floor(ratio * n_level) seeded-random train images of `level`.

    Val/test splits and other levels are untouched; same seed, same removal.
    """
    if level not in LEVELS:
        raise LevelOutOfRangeError(f"level must be one of {LEVELS}, got {level}")
    if not (0.0 <= ratio <= 1.0):
        raise InvariantViolationError(f"ratio must be in [0, 1], got {ratio}")
    candidates = sorted(
        image_id
        for image_id, s in ds.split.items()
        if s == "train" and ds.entries[image_id].level == level
    )
    # Compensate binary representation of decimal ratios so e.g.
    # floor(0.3 * 10) is 3, not 2; floor(0.3 * 4601) stays 1380.
    n_remove = min(len(candidates), math.floor(ratio * len(candidates) + 1e-9))
    if n_remove == 0:
        return LabeledDataset(ds.entries, ds.split)
    rng = np.random.default_rng(seed)
    removed = set(rng.choice(np.array(candidates, dtype=object), size=n_remove, replace=False))
    entries = {i: lab for i, lab in ds.entries.items() if i not in removed}
    split = {i: s for i, s in ds.split.items() if i not in removed}
    return LabeledDataset(entries, split)


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic generator.

    Defaults give 600/200/200 images with face the least-noisy modality and
    scene the noisiest, small dims, and a 5% chance of a zero-face image.
    """

    seed: int = 42
    n_train: int = 600
    n_val: int = 200
    n_test: int = 200
    face_dim: int = 24
    skeleton_dim: int = 12
    scene_dim: int = 16
    sigma_face: float = 0.05
    sigma_skeleton: float = 0.10
    sigma_scene: float = 0.15
    max_faces: int = 4
    p_zero_faces: float = 0.05

    def __post_init__(self):
        for field in ("n_train", "n_val", "n_test"):
            if getattr(self, field) < 1:
                raise InvariantViolationError(f"{field} must be >= 1")
        for field in ("face_dim", "skeleton_dim", "scene_dim"):
            if getattr(self, field) < 1:
                raise InvariantViolationError(f"{field} must be >= 1")
        for field in ("sigma_face", "sigma_skeleton", "sigma_scene"):
            if not getattr(self, field) > 0:
                raise InvariantViolationError(f"{field} must be > 0")
        if self.max_faces < 0:
            raise InvariantViolationError("max_faces must be >= 0")
        if not (0.0 <= self.p_zero_faces <= 1.0):
            raise InvariantViolationError("p_zero_faces must be in [0, 1]")

    def dims(self) -> dict[str, int]:
        return {"face": self.face_dim, "skeleton": self.skeleton_dim, "scene": self.scene_dim}

    def sigmas(self) -> dict[str, float]:
        return {"face": self.sigma_face, "skeleton": self.sigma_skeleton, "scene": self.sigma_scene}

    def specs(self) -> dict[str, ModalitySpec]:
        return {
            "face": ModalitySpec("face", self.face_dim, multi_instance=True),
            "skeleton": ModalitySpec("skeleton", self.skeleton_dim),
            "scene": ModalitySpec("scene", self.scene_dim),
        }


def synth_generate(cfg: SynthConfig) -> tuple[LabeledDataset, dict[str, list[FeatureRecord]]]:
    """One-factor linear synthetic data: every modality observes the latent
    cohesion factor z = level/3 + noise through its own direction plus
    modality noise, so fusing modalities provably helps downstream.

    Draw order is fixed (directions face/skeleton/scene, then per image:
    level, z, face count, face instances, skeleton, scene), so output is
    deterministic per seed.
    """
    rng = np.random.default_rng(cfg.seed)
    dims = cfg.dims()
    sigmas = cfg.sigmas()
    directions = {}
    for name in MODALITY_NAMES:
        v = rng.standard_normal(dims[name])
        directions[name] = v / np.linalg.norm(v)

    entries: dict[str, CohesionLabel] = {}
    split_map: dict[str, str] = {}
    features: dict[str, list[FeatureRecord]] = {name: [] for name in MODALITY_NAMES}
    index = 0
    for split_name, count in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        for _ in range(count):
            image_id = f"img{index:06d}"
            index += 1
            level = int(rng.integers(0, 4))
            z = level / 3 + rng.normal(0.0, LATENT_SIGMA)
            u = rng.random()
            if cfg.max_faces == 0 or u < cfg.p_zero_faces:
                n_faces = 0
            else:
                n_faces = int(rng.integers(1, cfg.max_faces + 1))
            for j in range(n_faces):
                vec = z * directions["face"] + sigmas["face"] * rng.standard_normal(cfg.face_dim)
                features["face"].append(FeatureRecord(image_id, j, vec))
            for name in ("skeleton", "scene"):
                vec = z * directions[name] + sigmas[name] * rng.standard_normal(dims[name])
                features[name].append(FeatureRecord(image_id, 0, vec))
            entries[image_id] = CohesionLabel(level)
            split_map[image_id] = split_name
    return LabeledDataset(entries, split_map), features
