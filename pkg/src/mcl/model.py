"""Dual-branch network: two independent backbones, each with projection and classification heads."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, InvalidInputError

CHECKPOINT_FORMAT = "mcl-ckpt-v1"
MODALITIES = ("ffpe", "frozen")


class ProjectionHead(nn.Module):
    """Dimension-preserving two-layer MLP, ``W2 relu(W1 h + b1) + b2``."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, h):
        return self.fc2(torch.relu(self.fc1(h)))


def project(head: ProjectionHead, h) -> torch.Tensor:
    h = torch.as_tensor(h, dtype=head.fc1.weight.dtype)
    if h.ndim != 2 or h.shape[1] != head.dim:
        raise InvalidInputError(f"expected (N, {head.dim}) latents, got {tuple(h.shape)}")
    return head(h)


class SmallCNN(nn.Module):
    """Stride-2 3x3 conv blocks with ReLU, then global average pooling.

    Fully convolutional, so any input size works; the pooled dimension is the
    last channel count.
    """

    def __init__(self, channels=(16, 32, 64, 128), in_channels: int = 3):
        super().__init__()
        layers = []
        c = in_channels
        for out in channels:
            layers += [nn.Conv2d(c, out, kernel_size=3, stride=2, padding=1), nn.ReLU()]
            c = out
        self.features = nn.Sequential(*layers)
        self.out_dim = c

    def forward(self, x):
        maps = self.features(x)
        return maps.mean(dim=(2, 3)), maps


BACKBONES: dict[str, Callable[..., nn.Module]] = {"small-cnn": SmallCNN}


def build_backbone(name: str = "small-cnn", channels=(16, 32, 64, 128)) -> nn.Module:
    """Instantiate a registered feature extractor returning ``(pooled, feature_maps)``."""
    try:
        factory = BACKBONES[name]
    except KeyError:
        raise ConfigurationError(f"unknown backbone {name!r}; registered: {sorted(BACKBONES)}") from None
    return factory(channels=tuple(channels))


@dataclass
class ForwardOutputs:
    h: torch.Tensor
    z_nmc: torch.Tensor
    z_lr: torch.Tensor
    logits: torch.Tensor
    probs: torch.Tensor
    feature_maps: torch.Tensor | None


class BranchNetwork(nn.Module):
    """One modality branch.

    The classifier reads the pooled vector ``h`` directly; the two projection
    heads feed the contrastive and low-rank losses only.
    """

    def __init__(self, backbone: nn.Module, num_classes: int = 3, shared_head: bool = False):
        super().__init__()
        self.backbone = backbone
        d = backbone.out_dim
        self.nmc_head = ProjectionHead(d)
        self.lr_head = self.nmc_head if shared_head else ProjectionHead(d)
        self.classifier = nn.Linear(d, num_classes)
        self.num_classes = num_classes

    @property
    def dim(self) -> int:
        return self.backbone.out_dim

    def forward(self, x) -> ForwardOutputs:
        x = images_to_tensor(x, dtype=self.classifier.weight.dtype)
        h, maps = self.backbone(x)
        logits = self.classifier(h)
        return ForwardOutputs(
            h=h,
            z_nmc=self.nmc_head(h),
            z_lr=self.lr_head(h),
            logits=logits,
            probs=torch.softmax(logits, dim=1),
            feature_maps=maps,
        )


def images_to_tensor(x, dtype=torch.float32) -> torch.Tensor:
    """uint8 ``(N, H, W, 3)`` arrays become float ``(N, 3, H, W)`` in ``[-0.5, 0.5]``.

    Float tensors are assumed to be already in network layout and pass through.
    """
    if isinstance(x, torch.Tensor) and x.is_floating_point():
        if x.ndim != 4:
            raise InvalidInputError(f"expected a 4-D image batch, got shape {tuple(x.shape)}")
        return x.to(dtype)
    arr = np.asarray(x)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise InvalidInputError(f"expected (N, H, W, 3) images, got shape {arr.shape}")
    # read-only or strided inputs (memory-mapped patch stores) are copied first
    t = torch.as_tensor(np.array(arr, copy=not (arr.flags.writeable and arr.flags.c_contiguous))).permute(0, 3, 1, 2)
    return t.to(dtype) / 255.0 - 0.5


def init_weights(module: nn.Module, seed: int) -> None:
    """Seeded He-uniform (fan-in) weights and zero biases for every conv/linear layer."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen, dtype=m.weight.dtype) * 2 * bound - bound)
                if m.bias is not None:
                    m.bias.zero_()


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


def build_branch(
    seed: int,
    num_classes: int = 3,
    backbone: str = "small-cnn",
    channels=(16, 32, 64, 128),
    shared_head: bool = False,
) -> BranchNetwork:
    net = BranchNetwork(build_backbone(backbone, channels), num_classes=num_classes, shared_head=shared_head)
    init_weights(net, seed)
    return net


class DualBranch(nn.Module):
    """FFPE branch and frozen branch. No parameter is shared between them."""

    def __init__(self, ffpe: BranchNetwork, frozen: BranchNetwork):
        super().__init__()
        if ffpe is frozen:
            raise ConfigurationError("the two branches must be distinct networks")
        self.ffpe = ffpe
        self.frozen = frozen

    def branch(self, modality: str) -> BranchNetwork:
        return getattr(self, modality.lower())


def build_dual(seed: int, **kwargs) -> DualBranch:
    return DualBranch(build_branch(derive_seed(seed, 0), **kwargs), build_branch(derive_seed(seed, 1), **kwargs))


def forward_pair(model: DualBranch, xa, xb) -> tuple[ForwardOutputs, ForwardOutputs]:
    """FFPE images through branch one, frozen images through branch two."""
    if len(xa) != len(xb):
        raise InvalidInputError(f"paired batches differ in size: {len(xa)} vs {len(xb)}")
    return model.ffpe(xa), model.frozen(xb)


def save_checkpoint(path, payload: dict) -> None:
    """Write ``payload`` with the format header, atomically."""
    from .io import atomic_write_bytes

    buf = io.BytesIO()
    torch.save({"format": CHECKPOINT_FORMAT, **payload}, buf)
    atomic_write_bytes(Path(path), buf.getvalue())


def load_checkpoint(path) -> dict:
    data = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(data, dict) or data.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    return data
