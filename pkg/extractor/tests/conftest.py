import json

import pytest

from cohesion_extractor import (
    ExtractionManifest,
    build_face_embedder,
    build_scene_embedder,
    build_skeleton_embedder,
    read_manifest,
    run_manifest,
)
from smoke_data import SMOKE_PLAN, draw_picture


@pytest.fixture(scope="session")
def smoke_set(tmp_path_factory):
    """10 synthetic photos, a manifest, and keypoint sidecars for two."""
    root = tmp_path_factory.mktemp("smoke")
    images = root / "images"
    images.mkdir()
    lines = []
    for image_id, (size, faces) in SMOKE_PLAN.items():
        ext = "jpg" if image_id == "img05" else "png"
        path = images / f"{image_id}.{ext}"
        draw_picture(path, size, faces)
        lines.append(f"{image_id}\t{path}")
    manifest = root / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")

    keypoints = root / "keypoints"
    keypoints.mkdir()
    (keypoints / "img00.json").write_text(json.dumps({
        "people": [
            {"keypoints": [[80, 60, 0.9], [80, 100, 0.8], [60, 140, 0.9], [100, 140, 0.7]]},
            {"keypoints": [[200, 80, 0.9], [200, 140, 0.9]]},
        ]
    }), encoding="utf-8")
    (keypoints / "img03.json").write_text(json.dumps({
        "people": [{"keypoints": [128, 80, 0.9, 128, 160, 0.8, 100, 200, 0.05]}]
    }), encoding="utf-8")
    return {"root": root, "images": images, "manifest": manifest, "keypoints": keypoints}


@pytest.fixture(scope="session")
def embedders():
    return {
        "scene": build_scene_embedder(),
        "face": build_face_embedder(),
        "skeleton": build_skeleton_embedder(),
    }


@pytest.fixture(scope="session")
def smoke_run(smoke_set, embedders, tmp_path_factory):
    """One full extraction over the smoke set, shared by the read-only tests."""
    out = tmp_path_factory.mktemp("smoke_out")
    manifest = ExtractionManifest(
        images=tuple(read_manifest(smoke_set["manifest"])),
        outputs={m: out / f"features_{m}.tsv" for m in ("scene", "face", "skeleton")},
        sidecar=out / "skipped.tsv",
        batch_size=4,
    )
    counts = run_manifest(
        manifest, embedders, keypoints_dir=smoke_set["keypoints"]
    )
    return {"out": out, "counts": counts, "manifest": manifest}
