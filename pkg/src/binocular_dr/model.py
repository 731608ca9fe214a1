"""Backbone registry, shared-weight two-stream forward, and checkpoints.

A backbone maps ``B x 3 x S x S`` images to ``(B x E embeddings, B x 5 logits)``.
The embedding is the globally pooled feature right before the classifier.
The two-stream network is one backbone applied twice, so left and right
streams share a single parameter store.

Third-party backbones (e.g. a bilinear-attention network) plug in with
:func:`register_backbone`; they must subclass :class:`Backbone`, implement
``embed`` and expose ``classifier`` plus a ``default_cam_layer`` naming a
convolutional submodule with spatial output.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import torch
from torch import nn

from .core import NUM_GRADES, ConfigError

CHECKPOINT_VERSION = 1


class UnknownBackboneError(ConfigError, KeyError):
    pass


class IncompatibleWeightsError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    name: str = "tiny-cnn"
    embedding_dim: int = 64
    num_classes: int = NUM_GRADES
    pretrained_weights: str | None = None

    def __post_init__(self):
        if self.embedding_dim <= 0:
            raise ConfigError(f"embedding_dim must be > 0, got {self.embedding_dim}")
        if self.num_classes != NUM_GRADES:
            raise ConfigError(f"num_classes must be {NUM_GRADES} for grading, got {self.num_classes}")


@dataclass
class BinocularOutput:
    logits_left: torch.Tensor
    logits_right: torch.Tensor
    embedding_left: torch.Tensor
    embedding_right: torch.Tensor


class Backbone(nn.Module):
    default_cam_layer = ""
    classifier: nn.Linear

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor):
        emb = self.embed(x)
        return emb, self.classifier(emb)


def _conv_block(c_in, c_out, kernel=3, stride=1):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=False),
    )


class TinyCNN(Backbone):
    """Three conv blocks, global average pooling and a linear classifier."""

    default_cam_layer = "block3"

    def __init__(self, embedding_dim=64, num_classes=NUM_GRADES, widths=(16, 32)):
        super().__init__()
        c1, c2 = widths
        self.block1 = _conv_block(3, c1, kernel=5, stride=2)
        self.pool1 = nn.MaxPool2d(2)
        self.block2 = _conv_block(c1, c2)
        self.pool2 = nn.MaxPool2d(2)
        self.block3 = _conv_block(c2, embedding_dim)
        self.gap = nn.AdaptiveAvgPool2d(1)
        self.classifier = nn.Linear(embedding_dim, num_classes)

    def embed(self, x):
        x = self.pool1(self.block1(x))
        x = self.pool2(self.block2(x))
        x = self.block3(x)
        return torch.flatten(self.gap(x), 1)


class ResNet50Backbone(Backbone):
    """torchvision ResNet-50 trunk with a 5-way head.

    Externally supplied ImageNet weights are loaded into the trunk; the
    1000-way ``fc`` entries of such a file are ignored.
    """

    default_cam_layer = "net.layer4"
    feature_dim = 2048

    def __init__(self, embedding_dim=2048, num_classes=NUM_GRADES):
        super().__init__()
        from torchvision.models import resnet50

        self.net = resnet50(weights=None)
        self.net.fc = nn.Identity()
        self.project = nn.Identity() if embedding_dim == self.feature_dim else nn.Linear(self.feature_dim, embedding_dim)
        self.classifier = nn.Linear(embedding_dim, num_classes)

    def embed(self, x):
        return self.project(self.net(x))

    def load_trunk_weights(self, state: dict):
        trunk = {k: v for k, v in state.items() if not k.startswith("fc.")}
        try:
            self.net.load_state_dict(trunk, strict=True)
        except RuntimeError as exc:
            raise IncompatibleWeightsError(f"weights do not fit ResNet-50: {exc}") from None


BACKBONES: dict[str, Callable[[BackboneSpec], Backbone]] = {}


def register_backbone(name: str):
    def deco(factory):
        BACKBONES[name] = factory
        return factory

    return deco


@register_backbone("tiny-cnn")
def _tiny(spec: BackboneSpec) -> Backbone:
    return TinyCNN(spec.embedding_dim, spec.num_classes)


@register_backbone("resnet50")
def _resnet50(spec: BackboneSpec) -> Backbone:
    return ResNet50Backbone(spec.embedding_dim, spec.num_classes)


def _read_state_dict(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"weights file not found: {path}")
    obj = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(obj, dict) and "state_dict" in obj and isinstance(obj["state_dict"], dict):
        obj = obj["state_dict"]
    if not isinstance(obj, dict):
        raise IncompatibleWeightsError(f"{path} does not hold a state dict")
    return obj


def build_backbone(spec: BackboneSpec) -> Backbone:
    try:
        factory = BACKBONES[spec.name]
    except KeyError:
        raise UnknownBackboneError(
            f"unknown backbone {spec.name!r}; registered: {', '.join(sorted(BACKBONES))}"
        ) from None
    model = factory(spec)
    if spec.pretrained_weights:
        state = _read_state_dict(spec.pretrained_weights)
        if isinstance(model, ResNet50Backbone):
            model.load_trunk_weights(state)
        else:
            try:
                model.load_state_dict(state, strict=True)
            except RuntimeError as exc:
                raise IncompatibleWeightsError(f"weights do not fit {spec.name}: {exc}") from None
    return model


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _as_input(backbone: nn.Module, x) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected B x 3 x S x S images, got shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError("input images contain non-finite values")
    dtype = next(backbone.parameters()).dtype
    return x.to(dtype)


def monocular_forward(backbone: nn.Module, images) -> tuple[torch.Tensor, torch.Tensor]:
    return backbone(_as_input(backbone, images))


def binocular_forward(backbone: nn.Module, batch) -> BinocularOutput:
    """Apply the same backbone to both eyes of a :class:`PairBatch` (or a ``(left, right)`` tuple)."""
    if isinstance(batch, tuple):
        left, right = batch
    else:
        left, right = batch.left_images, batch.right_images
    left, right = _as_input(backbone, left), _as_input(backbone, right)
    if left.shape != right.shape:
        raise ValueError(f"left/right shape mismatch: {tuple(left.shape)} vs {tuple(right.shape)}")
    emb_l, logits_l = backbone(left)
    emb_r, logits_r = backbone(right)
    return BinocularOutput(logits_l, logits_r, emb_l, emb_r)


class TwoStreamNetwork(nn.Module):
    """Module wrapper around :func:`binocular_forward`; owns no parameters of its own."""

    def __init__(self, backbone: Backbone):
        super().__init__()
        self.backbone = backbone

    def forward(self, left, right) -> BinocularOutput:
        return binocular_forward(self.backbone, (left, right))


@dataclass
class Checkpoint:
    backbone: Backbone
    spec: BackboneSpec
    trainer_state: dict
    preprocess: dict


def save_checkpoint(path, backbone: nn.Module, spec: BackboneSpec, trainer_state: dict | None = None,
                    preprocess: dict | None = None) -> Path:
    path = Path(path)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "backbone_spec": asdict(spec),
        "state_dict": {k: v.detach().clone() for k, v in backbone.state_dict().items()},
        "trainer_state": dict(trainer_state or {}),
        "preprocess": dict(preprocess or {}),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise IncompatibleWeightsError(f"unsupported checkpoint version {version!r}")
    spec_fields = dict(payload["backbone_spec"])
    spec_fields["pretrained_weights"] = None
    spec = BackboneSpec(**spec_fields)
    backbone = build_backbone(spec)
    state = payload["state_dict"]
    dtype = next((v.dtype for v in state.values() if v.is_floating_point()), torch.float32)
    backbone.to(dtype)
    try:
        backbone.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise IncompatibleWeightsError(f"checkpoint does not fit {spec.name}: {exc}") from None
    backbone.eval()
    return Checkpoint(backbone, spec, payload["trainer_state"], payload["preprocess"])
