"""Backbone registry: each entry maps a batch of RGB images to embeddings.

Entries:
  resnet18            torchvision resnet18, ImageNet weights (downloads on
                      first use), penultimate 512-d activations
  resnet50            torchvision resnet50, ImageNet weights, 2048-d
  resnet18-untrained  same architecture, seeded random init; deterministic
                      and fully offline (for plumbing tests / smoke runs)
  resnet50-untrained  offline 2048-d variant
  pixelstats          torch-free baseline: 8x8 RGB thumbnail, 192-d

Torch imports are deferred so pixelstats works without torch installed.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

IMAGE_SIZE = 224
_IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class Backbone:
    name: str
    dim: int

    def embed(self, images: list[Image.Image]) -> np.ndarray:
        raise NotImplementedError


class PixelStats(Backbone):
    """Resize to 8x8 RGB and flatten; deterministic and dependency-light."""

    name = "pixelstats"
    dim = 192

    def embed(self, images):
        rows = []
        for img in images:
            thumb = img.convert("RGB").resize((8, 8), Image.BILINEAR)
            rows.append(np.asarray(thumb, dtype=np.float32).reshape(-1) / 255.0)
        return np.stack(rows)


class TorchResnet(Backbone):
    def __init__(self, arch: str, pretrained: bool):
        import torch
        from torchvision import models

        self._torch = torch
        if arch == "resnet18":
            weights = models.ResNet18_Weights.IMAGENET1K_V1 if pretrained else None
            torch.manual_seed(0)
            net = models.resnet18(weights=weights)
            self.dim = 512
        elif arch == "resnet50":
            weights = models.ResNet50_Weights.IMAGENET1K_V1 if pretrained else None
            torch.manual_seed(0)
            net = models.resnet50(weights=weights)
            self.dim = 2048
        else:
            raise ValueError(arch)
        net.fc = torch.nn.Identity()  # penultimate activations
        net.eval()
        self._net = net
        self.name = arch if pretrained else f"{arch}-untrained"

    def _preprocess(self, images):
        batch = []
        for img in images:
            img = img.convert("RGB")
            w, h = img.size
            scale = 256 / min(w, h)
            img = img.resize((round(w * scale), round(h * scale)), Image.BILINEAR)
            w, h = img.size
            left = (w - IMAGE_SIZE) // 2
            top = (h - IMAGE_SIZE) // 2
            img = img.crop((left, top, left + IMAGE_SIZE, top + IMAGE_SIZE))
            arr = np.asarray(img, dtype=np.float32) / 255.0
            arr = (arr - _IMAGENET_MEAN) / _IMAGENET_STD
            batch.append(arr.transpose(2, 0, 1))
        return np.stack(batch)

    def embed(self, images):
        torch = self._torch
        batch = torch.from_numpy(self._preprocess(images))
        with torch.no_grad():
            feats = self._net(batch)
        return feats.numpy().astype(np.float32)


REGISTRY = {
    "resnet18": lambda: TorchResnet("resnet18", pretrained=True),
    "resnet50": lambda: TorchResnet("resnet50", pretrained=True),
    "resnet18-untrained": lambda: TorchResnet("resnet18", pretrained=False),
    "resnet50-untrained": lambda: TorchResnet("resnet50", pretrained=False),
    "pixelstats": PixelStats,
}


def build(name: str) -> Backbone:
    if name not in REGISTRY:
        raise KeyError(name)
    return REGISTRY[name]()
