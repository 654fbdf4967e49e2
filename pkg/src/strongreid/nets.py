"""Backbones with a configurable last stride and the BNNeck embedding head."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .exceptions import ConfigurationError

CHECKPOINT_VERSION = 1
ARCHS = ("tiny_cnn", "resnet50")


@dataclass(frozen=True)
class BackboneConfig:
    arch: str = "tiny_cnn"
    last_stride: int = 2
    feature_dim: int = 64
    pretrained: bool = False
    bnneck: bool = True

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigurationError(f"unknown arch {self.arch!r}; choose from {ARCHS}")
        if self.last_stride not in (1, 2):
            raise ConfigurationError(f"last_stride must be 1 or 2, got {self.last_stride}")
        if self.feature_dim <= 0:
            raise ConfigurationError(f"feature_dim must be > 0, got {self.feature_dim}")
        if self.arch == "resnet50" and self.feature_dim != 2048:
            raise ConfigurationError(f"resnet50 produces 2048-d features, got feature_dim={self.feature_dim}")


class EmbeddingBundle(NamedTuple):
    f_t: torch.Tensor
    f_i: torch.Tensor
    logits: torch.Tensor


def _conv_bn(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class TinyCNN(nn.Module):
    """Four stride-2 stages; the stride of the last one is configurable."""

    def __init__(self, feature_dim: int = 64, last_stride: int = 2, widths=(16, 32, 48)):
        super().__init__()
        chans = (3, *widths, feature_dim)
        strides = (2, 2, 2, last_stride)
        self.stages = nn.Sequential(*[
            nn.Sequential(_conv_bn(chans[i], chans[i + 1], strides[i]), _conv_bn(chans[i + 1], chans[i + 1], 1))
            for i in range(4)
        ])
        self.out_dim = feature_dim

    def forward(self, x):
        return self.stages(x)


class ResNet50Trunk(nn.Module):
    def __init__(self, last_stride: int = 2, pretrained: bool = False):
        super().__init__()
        from torchvision.models import ResNet50_Weights, resnet50

        try:
            net = resnet50(weights=ResNet50_Weights.IMAGENET1K_V1 if pretrained else None)
        except Exception as exc:  # no cached weights and no network
            raise ConfigurationError(f"could not load ImageNet weights for resnet50: {exc}") from exc
        block = net.layer4[0]
        block.conv2.stride = (last_stride, last_stride)
        block.downsample[0].stride = (last_stride, last_stride)
        self.body = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                  net.layer1, net.layer2, net.layer3, net.layer4)
        self.out_dim = 2048

    def forward(self, x):
        return self.body(x)


class ReIDNet(nn.Module):
    """backbone -> global average pooling -> (BN) -> classifier.

    With ``bnneck`` the pooled feature ``f_t`` goes through a BatchNorm1d to
    give ``f_i`` and a bias-free linear classifier reads ``f_i``. Without it
    one shared feature feeds a classifier with bias.
    """

    def __init__(self, cfg: BackboneConfig, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
        self.cfg = cfg
        self.num_classes = num_classes
        if cfg.arch == "tiny_cnn":
            self.backbone = TinyCNN(cfg.feature_dim, cfg.last_stride)
        else:
            self.backbone = ResNet50Trunk(cfg.last_stride, cfg.pretrained)
        self.pool = nn.AdaptiveAvgPool2d(1)
        d = cfg.feature_dim
        self.neck = nn.BatchNorm1d(d, eps=1e-5, momentum=0.1) if cfg.bnneck else nn.Identity()
        self.classifier = nn.Linear(d, num_classes, bias=not cfg.bnneck)
        # zero-mean normal, variance 2 / fan_in
        nn.init.kaiming_normal_(self.classifier.weight, mode="fan_in", nonlinearity="relu")
        if self.classifier.bias is not None:
            nn.init.zeros_(self.classifier.bias)

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor):
        f_t = self.pool(self.backbone(x)).flatten(1)
        f_i = self.neck(f_t)
        if not self.training:
            return f_i
        return EmbeddingBundle(f_t, f_i, self.classifier(f_i))


def build_model(cfg: BackboneConfig, num_classes: int) -> ReIDNet:
    return ReIDNet(cfg, num_classes)


def to_nchw(images) -> torch.Tensor:
    """``B x H x W x 3`` array or tensor -> float ``B x 3 x H x W`` tensor."""
    t = images if isinstance(images, torch.Tensor) else torch.from_numpy(np.ascontiguousarray(images))
    if t.ndim != 4 or t.shape[-1] != 3:
        raise ValueError(f"expected B x H x W x 3 images, got shape {tuple(t.shape)}")
    if not t.is_floating_point():
        t = t.float()
    return t.permute(0, 3, 1, 2).contiguous()


def forward_train(model: ReIDNet, images) -> EmbeddingBundle:
    if not model.training:
        raise RuntimeError("forward_train needs the model in training mode")
    x = to_nchw(images)
    if x.shape[0] < 2:
        raise ValueError("training-mode forward needs a batch of at least 2 (BN batch statistics)")
    return model(x)


@torch.no_grad()
def forward_infer(model: ReIDNet, images) -> torch.Tensor:
    """Retrieval features in eval mode: ``f_i`` with BNNeck, ``f`` otherwise."""
    if model.training:
        raise RuntimeError("forward_infer needs the model in eval mode")
    return model(to_nchw(images))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def describe(model: ReIDNet, input_size: tuple[int, int] | None = None) -> list[str]:
    """Human-readable parameter shapes, plus the final feature map size if given an input size."""
    lines = [f"{name}: {tuple(p.shape)}" for name, p in model.named_parameters()]
    lines.append(f"total parameters: {count_parameters(model)}")
    if input_size is not None:
        was = model.training
        model.eval()
        with torch.no_grad():
            fmap = model.feature_map(torch.zeros(1, 3, *input_size))
        model.train(was)
        lines.append(f"feature map for {input_size[0]}x{input_size[1]} input: {tuple(fmap.shape[1:])}")
    return lines


def save_checkpoint(path, model: ReIDNet, **extra) -> None:
    """Weights, BN running statistics and the backbone config, versioned."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "backbone": asdict(model.cfg),
        "num_classes": model.num_classes,
        "state_dict": model.state_dict(),
    }
    payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[ReIDNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {payload.get('version')!r}")
    cfg = BackboneConfig(**payload["backbone"])
    model = build_model(cfg, payload["num_classes"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
