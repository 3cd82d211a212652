"""Manifest files and the in-memory extraction plan.

A manifest is a TSV of `<image_id>\t<path>` lines; blank lines and
`#` comments are skipped. Paths are resolved relative to the manifest's
own directory so a manifest can travel with its images.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Mapping

from .errors import ManifestError

MODALITIES = ("scene", "face", "skeleton")

SCENE_DIM = 2208
FACE_DIM = 4096
SKELETON_DIM = 1536

DIMS = {"scene": SCENE_DIM, "face": FACE_DIM, "skeleton": SKELETON_DIM}


@dataclass(frozen=True)
class ExtractionManifest:
    """One extraction run: which images, which outputs, how to batch."""

    images: tuple[tuple[str, Path], ...]
    outputs: Mapping[str, Path]  # modality -> feature file path
    sidecar: Path | None = None  # skipped-image listing
    device: str = "cpu"
    batch_size: int = 8

    def __post_init__(self):
        object.__setattr__(self, "images", tuple((i, Path(p)) for i, p in self.images))
        object.__setattr__(self, "outputs", dict(self.outputs))
        if not self.outputs:
            raise ManifestError("at least one modality output is required")
        for name in self.outputs:
            if name not in MODALITIES:
                raise ManifestError(f"unknown modality {name!r}")
        if self.batch_size < 1:
            raise ManifestError("batch_size must be >= 1")
        seen = set()
        for image_id, _ in self.images:
            if image_id in seen:
                raise ManifestError(f"duplicate image id {image_id!r}")
            seen.add(image_id)


def parse_manifest(stream: Iterable[str], base: Path | None = None) -> list[tuple[str, Path]]:
    entries: list[tuple[str, Path]] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ManifestError(
                f"line {lineno}: expected 2 tab-separated fields, got {len(parts)}"
            )
        image_id, path_text = parts
        if not image_id or any(c.isspace() for c in image_id):
            raise ManifestError(f"line {lineno}: bad image id {image_id!r}")
        if not path_text:
            raise ManifestError(f"line {lineno}: empty path")
        if image_id in seen:
            raise ManifestError(f"line {lineno}: duplicate image id {image_id!r}")
        seen.add(image_id)
        path = Path(path_text)
        if base is not None and not path.is_absolute():
            path = base / path
        entries.append((image_id, path))
    return entries


def read_manifest(path: str | Path) -> list[tuple[str, Path]]:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        return parse_manifest(fh, base=path.parent)


def write_sidecar(stream: IO[str], skipped: Iterable[tuple[str, str]]) -> None:
    """`<id>\t<error>` per skipped image; errors are squashed to one line."""
    for image_id, message in skipped:
        flat = " ".join(str(message).split())
        stream.write(f"{image_id}\t{flat}\n")


def save_sidecar(path: str | Path, skipped: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_sidecar(fh, skipped)
