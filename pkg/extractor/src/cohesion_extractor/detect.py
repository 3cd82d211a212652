"""Face localization.

The default detector is a deterministic skin-tone blob finder: threshold
the RGB image with a classic skin rule, label connected components, and
return the bounding boxes of components above a minimum area, top-to-
bottom then left-to-right. It is intentionally simple — callers that have
a real detector can pass any callable with the same signature to the
extraction functions.

Boxes are (x0, y0, x1, y1) pixel coordinates, exclusive on the right/bottom.
"""

import numpy as np
from scipy import ndimage

Box = tuple[int, int, int, int]

MIN_FACE_AREA = 400


def skin_mask(image: np.ndarray) -> np.ndarray:
    r = image[:, :, 0].astype(np.int16)
    g = image[:, :, 1].astype(np.int16)
    b = image[:, :, 2].astype(np.int16)
    spread = image.max(axis=2).astype(np.int16) - image.min(axis=2).astype(np.int16)
    return (
        (r > 95) & (g > 40) & (b > 20)
        & (spread > 15)
        & (np.abs(r - g) > 15)
        & (r > g) & (r > b)
    )


def detect_faces(image: np.ndarray, min_area: int = MIN_FACE_AREA) -> list[Box]:
    mask = skin_mask(image)
    labels, count = ndimage.label(mask)
    boxes: list[Box] = []
    for sl in ndimage.find_objects(labels):
        if sl is None:
            continue
        ys, xs = sl
        area = int(mask[ys, xs].sum())
        if area < min_area:
            continue
        boxes.append((xs.start, ys.start, xs.stop, ys.stop))
    boxes.sort(key=lambda b: (b[1], b[0]))
    return boxes


def crop(image: np.ndarray, box: Box) -> np.ndarray:
    x0, y0, x1, y1 = box
    return image[y0:y1, x0:x1]
