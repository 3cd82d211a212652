class ExtractorError(Exception):
    """Base class for everything this package raises on purpose."""


class ManifestError(ExtractorError):
    """Manifest file is malformed or inconsistent."""


class UndecodableImageError(ExtractorError):
    """Image file missing or not decodable; the image is skipped."""


class EmbeddingDimError(ExtractorError):
    """A backbone produced a vector of the wrong width; the run aborts."""


class WeightsError(ExtractorError):
    """A local weights file could not be loaded into the architecture."""


class KeypointFileError(ExtractorError):
    """A keypoint sidecar exists but cannot be parsed."""


class UsageError(ExtractorError):
    """Bad command line."""
