"""Image-to-feature extraction for the cohesion regression toolkit."""

from .backbones import (
    Embedder,
    build_face_embedder,
    build_scene_embedder,
    build_skeleton_embedder,
    weights_checksum,
)
from .detect import detect_faces, skin_mask
from .errors import (
    EmbeddingDimError,
    ExtractorError,
    KeypointFileError,
    ManifestError,
    UndecodableImageError,
    WeightsError,
)
from .extract import (
    Record,
    extract_faces,
    extract_scene,
    extract_skeleton,
    load_image,
    run_manifest,
    save_feature_file,
    write_feature_file,
)
from .manifest import (
    DIMS,
    FACE_DIM,
    MODALITIES,
    SCENE_DIM,
    SKELETON_DIM,
    ExtractionManifest,
    parse_manifest,
    read_manifest,
)
from .skeleton import load_keypoints, render_skeleton

__version__ = "0.1.0"
