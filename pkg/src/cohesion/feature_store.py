"""Canonical feature-file format, per-modality validation, face averaging,
and z-score standardization.

File format (UTF-8, LF):
    line 1:  #cohesion-features v1 modality=<scene|face|skeleton|custom:NAME> dim=<D>
    record:  <image_id>\\t<instance_index>\\t<v1> <v2> ... <vD>
Lines starting with '#' after the header are comments. Values are printed as
shortest exact decimals (repr), so a write/parse round trip is bit-identical.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Mapping

import numpy as np

from .errors import (
    DimMismatchError,
    EmptyFileError,
    EmptyInputError,
    HeaderMismatchError,
    InvariantViolationError,
    MalformedRecordError,
)

FORMAT_VERSION = "v1"

# Canonical dims of the three built-in modalities.
SCENE_DIM = 2208
FACE_DIM = 4096
SKELETON_DIM = 1536

_BUILTIN_MULTI = {"scene": False, "face": True, "skeleton": False}
_CUSTOM_NAME_RE = re.compile(r"^custom:[^\s=]+$")
_HEADER_RE = re.compile(
    r"^#cohesion-features v1 modality=([^\s=]+) dim=(\d+)$"
)
_INDEX_RE = re.compile(r"^\d+$")

SCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class ModalitySpec:
    """One feature source: name, expected vector length, instance arity.

    The canonical constants SCENE, FACE, SKELETON carry the fixed dims
    2208/4096/1536; specs with a built-in name but a different dim are legal
    (synthetic data uses small dims) but the multi-instance flag of a
    built-in name is pinned: only `face` may own several instances per image.
    """

    name: str
    dim: int
    multi_instance: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise InvariantViolationError(f"modality dim must be >= 1, got {self.dim}")
        if self.name in _BUILTIN_MULTI:
            if self.multi_instance != _BUILTIN_MULTI[self.name]:
                raise InvariantViolationError(
                    f"modality {self.name!r} must have multi_instance="
                    f"{_BUILTIN_MULTI[self.name]}"
                )
        elif not _CUSTOM_NAME_RE.match(self.name):
            raise InvariantViolationError(
                "modality name must be scene, face, skeleton, or custom:<name> "
                f"(got {self.name!r})"
            )


SCENE = ModalitySpec("scene", SCENE_DIM)
FACE = ModalitySpec("face", FACE_DIM, multi_instance=True)
SKELETON = ModalitySpec("skeleton", SKELETON_DIM)


@dataclass(frozen=True, eq=False)
class FeatureRecord:
    """One feature vector for one image instance.

    Single-instance modalities always use instance_index 0; face images may
    own several records with indices 0..k-1.
    """

    image_id: str
    instance_index: int
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if not self.image_id or re.search(r"\s", self.image_id):
            raise InvariantViolationError(
                f"image_id must be a nonempty whitespace-free token, got {self.image_id!r}"
            )
        if self.instance_index < 0:
            raise InvariantViolationError(
                f"instance_index must be >= 0, got {self.instance_index}"
            )
        if values.ndim != 1:
            raise InvariantViolationError("feature values must be a 1-D vector")
        if not np.all(np.isfinite(values)):
            raise InvariantViolationError(
                f"non-finite feature value for image {self.image_id!r}"
            )


@dataclass(frozen=True, eq=False)
class Standardizer:
    """Per-dimension mean/scale fitted on training vectors.

    Zero-variance dimensions carry scale 1.0 so standardization is a no-op
    there; every scale is >= 1e-12.
    """

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        scale = np.asarray(self.scale, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        if mean.ndim != 1 or scale.ndim != 1 or len(mean) != len(scale):
            raise InvariantViolationError("mean and scale must be 1-D vectors of equal length")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(scale))):
            raise InvariantViolationError("standardizer statistics must be finite")
        if np.any(scale < SCALE_FLOOR):
            raise InvariantViolationError(f"every scale must be >= {SCALE_FLOOR}")

    @property
    def dim(self) -> int:
        return len(self.mean)


def identity_standardizer(dim: int) -> Standardizer:
    """Standardizer that leaves vectors unchanged (mean 0, scale 1)."""
    return Standardizer(np.zeros(dim), np.ones(dim))


def format_float(x: float) -> str:
    """Shortest decimal that parses back to the exact same float."""
    return repr(float(x))


def _feature_header(spec: ModalitySpec) -> str:
    return f"#cohesion-features {FORMAT_VERSION} modality={spec.name} dim={spec.dim}"


def parse_header_line(line: str) -> tuple[str, int]:
    """Split a feature-file header into (modality name, dim)."""
    m = _HEADER_RE.match(line.rstrip("\n"))
    if not m:
        raise HeaderMismatchError(f"malformed feature header: {line.rstrip()!r}")
    return m.group(1), int(m.group(2))


def spec_from_header(line: str) -> ModalitySpec:
    """Build the ModalitySpec a feature file declares in its header.

    Built-in names get their canonical multi-instance flag; custom modalities
    are read permissively as multi-instance.
    """
    name, dim = parse_header_line(line)
    if name in _BUILTIN_MULTI:
        return ModalitySpec(name, dim, multi_instance=_BUILTIN_MULTI[name])
    return ModalitySpec(name, dim, multi_instance=True)


def parse_feature_file(stream: Iterable[str], expected: ModalitySpec) -> list[FeatureRecord]:
    """Parse a feature file, validating every record against `expected`.

    Returns records in file order. A header-only file yields an empty list;
    a file with no header at all raises EmptyFileError.
    """
    lines = iter(stream)
    first = next(lines, None)
    if first is None:
        raise EmptyFileError("feature file has no header line")
    name, dim = parse_header_line(first)
    if name != expected.name or dim != expected.dim:
        raise HeaderMismatchError(
            f"expected modality={expected.name} dim={expected.dim}, "
            f"file declares modality={name} dim={dim}"
        )

    records: list[FeatureRecord] = []
    seen: set[tuple[str, int]] = set()
    for lineno, raw in enumerate(lines, start=2):
        line = raw.rstrip("\n")
        if not line:
            continue
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise MalformedRecordError(
                f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}"
            )
        image_id, index_text, values_text = parts
        if not image_id:
            raise MalformedRecordError(f"line {lineno}: empty image_id")
        if not _INDEX_RE.match(index_text):
            raise MalformedRecordError(
                f"line {lineno}: instance_index must be a base-10 non-negative "
                f"integer, got {index_text!r}"
            )
        index = int(index_text)
        if not expected.multi_instance and index != 0:
            raise MalformedRecordError(
                f"line {lineno}: modality {expected.name!r} is single-instance "
                f"but instance_index={index}"
            )
        tokens = values_text.split()
        if len(tokens) != expected.dim:
            raise MalformedRecordError(
                f"line {lineno}: expected {expected.dim} values, got {len(tokens)}"
            )
        try:
            values = np.array([float(t) for t in tokens], dtype=np.float64)
        except ValueError as exc:
            raise MalformedRecordError(f"line {lineno}: {exc}") from exc
        if not np.all(np.isfinite(values)):
            raise MalformedRecordError(f"line {lineno}: non-finite feature value")
        key = (image_id, index)
        if key in seen:
            raise MalformedRecordError(
                f"line {lineno}: duplicate record for image {image_id!r} "
                f"instance {index}"
            )
        seen.add(key)
        records.append(FeatureRecord(image_id, index, values))
    return records


def write_feature_file(stream: IO[str], records: Iterable[FeatureRecord], spec: ModalitySpec) -> None:
    """Write records in the canonical format; validates them against `spec`."""
    stream.write(_feature_header(spec) + "\n")
    seen: set[tuple[str, int]] = set()
    for rec in records:
        if len(rec.values) != spec.dim:
            raise InvariantViolationError(
                f"record {rec.image_id!r} has dim {len(rec.values)}, spec wants {spec.dim}"
            )
        if not spec.multi_instance and rec.instance_index != 0:
            raise InvariantViolationError(
                f"record {rec.image_id!r}: single-instance modality {spec.name!r} "
                f"requires instance_index 0"
            )
        key = (rec.image_id, rec.instance_index)
        if key in seen:
            raise InvariantViolationError(
                f"duplicate record for image {rec.image_id!r} instance {rec.instance_index}"
            )
        seen.add(key)
        values = " ".join(format_float(v) for v in rec.values)
        stream.write(f"{rec.image_id}\t{rec.instance_index}\t{values}\n")


def read_feature_file(path: str | Path, expected: ModalitySpec) -> list[FeatureRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_feature_file(fh, expected)


def save_feature_file(path: str | Path, records: Iterable[FeatureRecord], spec: ModalitySpec) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_feature_file(fh, records, spec)


def read_spec_from_file(path: str | Path) -> ModalitySpec:
    """Peek at a feature file's header and return the declared spec."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    if not first:
        raise EmptyFileError(f"feature file {path} has no header line")
    return spec_from_header(first)


def average_face_vectors(records: Iterable[FeatureRecord]) -> dict[str, np.ndarray]:
    """Collapse multi-face images to one vector per image by averaging.

    Instances are ordered by instance_index before averaging so the result is
    independent of record order.
    """
    grouped: dict[str, list[FeatureRecord]] = {}
    dim = None
    for rec in records:
        if dim is None:
            dim = len(rec.values)
        elif len(rec.values) != dim:
            raise DimMismatchError(
                f"record {rec.image_id!r} has dim {len(rec.values)}, expected {dim}"
            )
        grouped.setdefault(rec.image_id, []).append(rec)
    out: dict[str, np.ndarray] = {}
    for image_id, recs in grouped.items():
        recs.sort(key=lambda r: r.instance_index)
        out[image_id] = np.stack([r.values for r in recs]).mean(axis=0)
    return out


def vectors_per_image(records: Iterable[FeatureRecord], spec: ModalitySpec) -> dict[str, np.ndarray]:
    """One raw vector per image: averaged for multi-instance modalities,
    taken as-is otherwise."""
    if spec.multi_instance:
        return average_face_vectors(records)
    out: dict[str, np.ndarray] = {}
    for rec in records:
        if rec.instance_index != 0:
            raise InvariantViolationError(
                f"single-instance modality {spec.name!r} got instance_index "
                f"{rec.instance_index} for image {rec.image_id!r}"
            )
        if rec.image_id in out:
            raise InvariantViolationError(f"duplicate image {rec.image_id!r}")
        out[rec.image_id] = rec.values
    return out


def fit_standardizer(vectors: Iterable[np.ndarray]) -> Standardizer:
    """Per-dimension mean and population standard deviation (floored).

    Dimensions whose sd falls below 1e-12 get scale 1.0 so constant features
    pass through unchanged.
    """
    rows = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not rows:
        raise EmptyInputError("cannot fit a standardizer on zero vectors")
    dim = len(rows[0])
    for v in rows:
        if v.ndim != 1 or len(v) != dim:
            raise DimMismatchError("all vectors must share one length")
    data = np.stack(rows)
    mean = data.mean(axis=0)
    sd = data.std(axis=0)
    scale = np.where(sd < SCALE_FLOOR, 1.0, sd)
    return Standardizer(mean, scale)


def apply_standardizer(s: Standardizer, v: np.ndarray) -> np.ndarray:
    """(v - mean) / scale, elementwise."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or len(v) != s.dim:
        raise DimMismatchError(f"vector has dim {v.shape}, standardizer wants {s.dim}")
    return (v - s.mean) / s.scale
