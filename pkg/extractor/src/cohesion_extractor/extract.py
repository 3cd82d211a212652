"""Turn decoded images into canonical feature files.

Output format is exactly the `#cohesion-features v1 modality=<m> dim=<d>`
TSV the regression toolkit reads: one `<id>\t<index>\t<values>` record per
line, floats written with repr so the files round-trip bit-exact. A
`# weights sha256=...` comment after the header records which backbone
weights produced the vectors (comments are transparent to the parser).

Images that fail to decode are skipped, logged, and listed in the sidecar;
everything else proceeds. Wrong-width embeddings abort the run instead.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Callable, Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import detect as detect_mod
from .backbones import INPUT_SIZE, Embedder
from .errors import UndecodableImageError
from .manifest import DIMS, ExtractionManifest, save_sidecar
from .skeleton import keypoints_for, render_skeleton

log = logging.getLogger("cohesion_extractor")

Detector = Callable[[np.ndarray], list[detect_mod.Box]]


@dataclass(frozen=True)
class Record:
    image_id: str
    instance_index: int
    values: np.ndarray


def load_image(path: str | Path) -> np.ndarray:
    """Decode to an RGB uint8 array or raise UndecodableImageError."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise UndecodableImageError(f"{path}: {exc}") from exc


def to_input(image: np.ndarray) -> np.ndarray:
    """Resize to the backbone input size (bilinear, like the originals)."""
    if image.shape[:2] == (INPUT_SIZE, INPUT_SIZE):
        return image
    pil = Image.fromarray(image)
    return np.asarray(pil.resize((INPUT_SIZE, INPUT_SIZE), Image.BILINEAR))


def extract_scene(
    images: Sequence[tuple[str, np.ndarray]],
    embedder: Embedder,
    batch_size: int = 8,
) -> list[Record]:
    """One index-0 record per image, in input order."""
    vecs = embedder.embed([to_input(img) for _, img in images], batch_size)
    return [Record(image_id, 0, vecs[i]) for i, (image_id, _) in enumerate(images)]


def extract_faces(
    images: Sequence[tuple[str, np.ndarray]],
    embedder: Embedder,
    batch_size: int = 8,
    detector: Detector | None = None,
) -> list[Record]:
    """One record per detected face, instance_index 0..k-1 per image.

    Images with no detections contribute no records (the regression side
    imputes for them); they still appear in scene/skeleton output.
    """
    detector = detector or detect_mod.detect_faces
    crops: list[np.ndarray] = []
    owners: list[tuple[str, int]] = []
    for image_id, img in images:
        for index, box in enumerate(detector(img)):
            crops.append(to_input(detect_mod.crop(img, box)))
            owners.append((image_id, index))
    vecs = embedder.embed(crops, batch_size)
    return [Record(i, idx, vecs[k]) for k, (i, idx) in enumerate(owners)]


def extract_skeleton(
    images: Sequence[tuple[str, np.ndarray]],
    embedder: Embedder,
    batch_size: int = 8,
    keypoints_dir: str | Path | None = None,
) -> list[Record]:
    """One index-0 record per image; missing keypoints render blank."""
    renders = []
    for image_id, img in images:
        people = keypoints_for(image_id, keypoints_dir)
        height, width = img.shape[:2]
        renders.append(to_input(render_skeleton((width, height), people)))
    vecs = embedder.embed(renders, batch_size)
    return [Record(image_id, 0, vecs[i]) for i, (image_id, _) in enumerate(images)]


def write_feature_file(
    stream: IO[str],
    modality: str,
    records: Iterable[Record],
    checksum: str | None = None,
) -> None:
    dim = DIMS[modality]
    stream.write(f"#cohesion-features v1 modality={modality} dim={dim}\n")
    if checksum:
        stream.write(f"# weights sha256={checksum}\n")
    for rec in records:
        if len(rec.values) != dim:
            raise ValueError(
                f"record {rec.image_id!r} has dim {len(rec.values)}, "
                f"{modality} requires {dim}"
            )
        values = " ".join(repr(float(v)) for v in rec.values)
        stream.write(f"{rec.image_id}\t{rec.instance_index}\t{values}\n")


def save_feature_file(
    path: str | Path,
    modality: str,
    records: Iterable[Record],
    checksum: str | None = None,
) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_feature_file(fh, modality, records, checksum)


_EXTRACTORS = {
    "scene": extract_scene,
    "face": extract_faces,
    "skeleton": extract_skeleton,
}


def run_manifest(
    manifest: ExtractionManifest,
    embedders: dict[str, Embedder],
    detector: Detector | None = None,
    keypoints_dir: str | Path | None = None,
) -> dict[str, int]:
    """Execute one extraction plan; returns record counts per modality."""
    decoded: list[tuple[str, np.ndarray]] = []
    skipped: list[tuple[str, str]] = []
    for image_id, path in manifest.images:
        try:
            decoded.append((image_id, load_image(path)))
        except UndecodableImageError as exc:
            log.warning("skipping %s: %s", image_id, exc)
            skipped.append((image_id, str(exc)))

    counts: dict[str, int] = {}
    for modality in ("scene", "face", "skeleton"):
        out_path = manifest.outputs.get(modality)
        if out_path is None:
            continue
        embedder = embedders[modality]
        kwargs = {}
        if modality == "face":
            kwargs["detector"] = detector
        if modality == "skeleton":
            kwargs["keypoints_dir"] = keypoints_dir
        records = _EXTRACTORS[modality](decoded, embedder, manifest.batch_size, **kwargs)
        save_feature_file(out_path, modality, records, embedder.checksum)
        counts[modality] = len(records)
        log.info("%s: %d records -> %s", modality, len(records), out_path)

    if manifest.sidecar is not None:
        save_sidecar(manifest.sidecar, skipped)
        if skipped:
            log.info("%d image(s) skipped, listed in %s", len(skipped), manifest.sidecar)
    counts["skipped"] = len(skipped)
    return counts
