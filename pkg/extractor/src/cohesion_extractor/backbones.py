"""CNN backbones that turn 224x224 RGB crops into fixed-width vectors.

scene    -> densely connected network, 2208-d penultimate features
face     -> VGG-style network, 4096-d penultimate fully-connected layer
skeleton -> EfficientNet variant whose penultimate width is 1536

Architectures come from torchvision. When no local weights file is given
the network is initialized from a fixed seed so runs stay reproducible;
either way the sha256 of the weights actually used is exposed so output
files can record what produced them.
"""

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision import models

from .errors import EmbeddingDimError, WeightsError
from .manifest import FACE_DIM, SCENE_DIM, SKELETON_DIM

INPUT_SIZE = 224
INIT_SEED = 0

# standard ImageNet channel statistics
_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
_STD = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)


class _SceneNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.net = models.densenet161(weights=None)

    def forward(self, x):
        out = self.net.features(x)
        out = F.relu(out, inplace=True)
        out = F.adaptive_avg_pool2d(out, (1, 1))
        return torch.flatten(out, 1)


class _FaceNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.net = models.vgg16(weights=None)

    def forward(self, x):
        out = self.net.features(x)
        out = self.net.avgpool(out)
        out = torch.flatten(out, 1)
        # stop one layer short of the classification head
        return self.net.classifier[:-1](out)


class _SkeletonNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.net = models.efficientnet_b3(weights=None)

    def forward(self, x):
        out = self.net.features(x)
        out = self.net.avgpool(out)
        return torch.flatten(out, 1)


def weights_checksum(model: nn.Module) -> str:
    digest = hashlib.sha256()
    state = model.state_dict()
    for key in sorted(state):
        tensor = state[key].detach().cpu().contiguous()
        digest.update(key.encode("utf-8"))
        digest.update(str(tuple(tensor.shape)).encode("ascii"))
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


@dataclass(frozen=True)
class Embedder:
    modality: str
    dim: int
    model: nn.Module
    checksum: str
    device: str = "cpu"

    def embed(self, images: list[np.ndarray], batch_size: int = 8) -> np.ndarray:
        """images: HxWx3 uint8 arrays, all INPUT_SIZE x INPUT_SIZE."""
        if not images:
            return np.zeros((0, self.dim))
        out: list[np.ndarray] = []
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                chunk = images[start:start + batch_size]
                batch = torch.from_numpy(np.stack(chunk)).to(self.device)
                batch = batch.permute(0, 3, 1, 2).float().div_(255.0)
                batch = (batch - _MEAN.to(self.device)) / _STD.to(self.device)
                vecs = self.model(batch).cpu().double().numpy()
                if vecs.ndim != 2 or vecs.shape[1] != self.dim:
                    raise EmbeddingDimError(
                        f"{self.modality} backbone emitted shape {vecs.shape}, "
                        f"expected (*, {self.dim})"
                    )
                if not np.all(np.isfinite(vecs)):
                    raise EmbeddingDimError(
                        f"{self.modality} backbone emitted non-finite values"
                    )
                out.append(vecs)
        return np.concatenate(out, axis=0)


def _finish(modality: str, dim: int, module: nn.Module, weights: Path | None, device: str) -> Embedder:
    if weights is not None:
        try:
            state = torch.load(weights, map_location="cpu", weights_only=True)
            module.net.load_state_dict(state)
        except Exception as exc:
            raise WeightsError(f"cannot load {modality} weights from {weights}: {exc}") from exc
    module.eval()
    module.to(device)
    return Embedder(modality, dim, module, weights_checksum(module), device)


def build_scene_embedder(weights: Path | None = None, device: str = "cpu") -> Embedder:
    torch.manual_seed(INIT_SEED)
    return _finish("scene", SCENE_DIM, _SceneNet(), weights, device)


def build_face_embedder(weights: Path | None = None, device: str = "cpu") -> Embedder:
    torch.manual_seed(INIT_SEED)
    return _finish("face", FACE_DIM, _FaceNet(), weights, device)


def build_skeleton_embedder(weights: Path | None = None, device: str = "cpu") -> Embedder:
    torch.manual_seed(INIT_SEED)
    return _finish("skeleton", SKELETON_DIM, _SkeletonNet(), weights, device)


BUILDERS = {
    "scene": build_scene_embedder,
    "face": build_face_embedder,
    "skeleton": build_skeleton_embedder,
}
