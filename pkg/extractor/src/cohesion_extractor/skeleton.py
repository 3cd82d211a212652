"""Keypoint sidecars and skeleton rendering.

Pose estimation itself is out of scope; keypoints arrive as per-image JSON
sidecars named `<image_id>.json`:

    {"people": [{"keypoints": [[x, y, confidence], ...]}, ...]}

A flat `[x, y, c, x, y, c, ...]` list is accepted too. The renderer draws
each person's confident keypoints as discs joined in sequence on a black
canvas the size of the source image; no sidecar (or no people) yields the
blank canvas, so every image still embeds to something deterministic.
"""

import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import KeypointFileError

CONFIDENCE_FLOOR = 0.1

# fixed per-person palette so renders are reproducible
_COLORS = (
    (255, 85, 0), (0, 255, 85), (85, 0, 255),
    (255, 255, 0), (0, 170, 255), (255, 0, 170),
)


def _person_array(entry, where: str) -> np.ndarray:
    if isinstance(entry, dict):
        entry = entry.get("keypoints", [])
    arr = np.asarray(entry, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 3))
    if arr.ndim == 1:
        if arr.size % 3 != 0:
            raise KeypointFileError(f"{where}: flat keypoint list length not a multiple of 3")
        arr = arr.reshape(-1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise KeypointFileError(f"{where}: keypoints must be (x, y, confidence) triples")
    return arr


def load_keypoints(path: str | Path) -> list[np.ndarray]:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise KeypointFileError(f"cannot read keypoints {path}: {exc}") from exc
    people = payload.get("people", []) if isinstance(payload, dict) else payload
    if not isinstance(people, list):
        raise KeypointFileError(f"{path}: expected a list of people")
    return [_person_array(p, str(path)) for p in people]


def keypoints_for(image_id: str, directory: str | Path | None) -> list[np.ndarray]:
    if directory is None:
        return []
    path = Path(directory) / f"{image_id}.json"
    if not path.exists():
        return []
    return load_keypoints(path)


def render_skeleton(size: tuple[int, int], people: list[np.ndarray]) -> np.ndarray:
    """Draw the pose rendering for one image; size is (width, height)."""
    width, height = size
    canvas = Image.new("RGB", (width, height), (0, 0, 0))
    draw = ImageDraw.Draw(canvas)
    radius = max(2, min(width, height) // 100)
    for idx, person in enumerate(people):
        color = _COLORS[idx % len(_COLORS)]
        visible = person[person[:, 2] >= CONFIDENCE_FLOOR]
        points = [(float(x), float(y)) for x, y, _ in visible]
        for a, b in zip(points, points[1:]):
            draw.line([a, b], fill=color, width=max(1, radius // 2))
        for x, y in points:
            draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=color)
    return np.asarray(canvas)
