"""Backbones producing C logits, and a thin handle that turns them into probabilities."""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn as nn


class TinyCNN(nn.Module):
    """Four conv blocks, global average pooling and a linear head."""

    def __init__(self, num_classes: int = 5, in_channels: int = 3, width: int = 16):
        super().__init__()
        chans = [in_channels, width, 2 * width, 4 * width, 4 * width]
        blocks = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            blocks += [
                nn.Conv2d(cin, cout, 3, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
        self.features = nn.Sequential(*blocks)
        self.head = nn.Linear(chans[-1], num_classes)

    def forward(self, x):
        x = self.features(x)
        return self.head(x.mean(dim=(2, 3)))


def resnet18(num_classes: int = 5, weights=None) -> nn.Module:
    """torchvision ResNet-18 with a fresh C-way head.

    ``weights`` is passed through to torchvision (e.g. a ``ResNet18_Weights``
    enum); nothing is bundled or downloaded by default.
    """
    from torchvision.models import resnet18 as tv_resnet18

    model = tv_resnet18(weights=weights)
    model.fc = nn.Linear(model.fc.in_features, num_classes)
    return model


def tiny_cnn_narrow(num_classes: int = 5, in_channels: int = 3) -> nn.Module:
    return TinyCNN(num_classes, in_channels, width=8)


BACKBONES = {
    "tiny_cnn": TinyCNN,
    "tiny_cnn_narrow": tiny_cnn_narrow,
    "resnet18": resnet18,
}


def build_backbone(name: str, num_classes: int = 5, **kwargs) -> nn.Module:
    try:
        factory = BACKBONES[name]
    except KeyError:
        raise ValueError(f"unknown backbone {name!r}; choose from {sorted(BACKBONES)}") from None
    return factory(num_classes=num_classes, **kwargs)


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class ModelHandle:
    """A trainable classifier viewed as ``images -> sigmoid probabilities``."""

    def __init__(self, module: nn.Module, backbone: str = "tiny_cnn", num_classes: int = 5):
        self.module = module
        self.backbone = backbone
        self.num_classes = num_classes

    @property
    def snapshot_id(self) -> str:
        return parameter_checksum(self.module)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.module(x)

    @torch.no_grad()
    def predict(self, images, batch_size: int = 256) -> np.ndarray:
        """Probabilities for a ``(N, H, W)`` or ``(N, 3, H, W)`` batch, in eval mode."""
        was_training = self.module.training
        self.module.eval()
        try:
            x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
            out = []
            for start in range(0, len(x), batch_size):
                out.append(torch.sigmoid(self.module(to_model_input(x[start : start + batch_size]))))
            if not out:
                return np.zeros((0, self.num_classes), dtype=np.float64)
            return torch.cat(out).double().numpy()
        finally:
            self.module.train(was_training)


def to_model_input(x: torch.Tensor) -> torch.Tensor:
    """``(N, H, W)`` grayscale -> ``(N, 3, H, W)`` by channel replication; NHWC is transposed."""
    if x.ndim == 3:
        return x.unsqueeze(1).expand(-1, 3, -1, -1)
    if x.ndim == 4 and x.shape[-1] == 3 and x.shape[1] != 3:
        return x.permute(0, 3, 1, 2)
    return x
