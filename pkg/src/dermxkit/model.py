"""DermX / DermX+ networks, their losses and differentiable Grad-CAM.

The diagnosis head sees the image features (after a dense dimensionality
reduction block) concatenated with the characteristic logits, so the
characteristic predictions feed the diagnosis.
"""

import dataclasses
import io
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .bundle import atomic_write_bytes
from .constants import EPS_DICE, EPS_PROB
from .errors import ConfigError, GradCamError, ShapeError

CHECKPOINT_VERSION = 1
MODEL_KINDS = ("dx", "dermx", "dermx+")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class DermXConfig:
    backbone: str = "efficientnet-b2"
    pretrained: bool = True
    input_size: tuple = (260, 260)
    num_diseases: int = 6
    num_characteristics: int = 10
    dense_width: int = 64
    dropout: float = 0.2
    lambda_d: float = 1.0
    lambda_c: float = 1.0
    lambda_a: float = 0.0

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        if min(self.lambda_d, self.lambda_c, self.lambda_a) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.dense_width < 1:
            raise ConfigError("dense_width must be >= 1")
        if self.num_diseases < 2:
            raise ConfigError("num_diseases must be >= 2")
        if self.num_characteristics < 1:
            raise ConfigError("num_characteristics must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")

    def asdict(self):
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        return d


def config_for_kind(kind, **overrides):
    """Default loss weights per model kind (dx drops the characteristic terms)."""
    weights = {
        "dx": dict(lambda_d=1.0, lambda_c=0.0, lambda_a=0.0),
        "dermx": dict(lambda_d=1.0, lambda_c=1.0, lambda_a=0.0),
        "dermx+": dict(lambda_d=1.0, lambda_c=1.0, lambda_a=10.0),
    }
    if kind not in weights:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    return DermXConfig(**{**weights[kind], **overrides})


# -- backbones ----------------------------------------------------------------


def _weights_cache():
    cache = os.environ.get("DERMXKIT_CACHE")
    if cache:
        torch.hub.set_dir(cache)


def _efficientnet_b2(pretrained):
    from torchvision.models import EfficientNet_B2_Weights, efficientnet_b2

    _weights_cache()
    weights = EfficientNet_B2_Weights.IMAGENET1K_V1 if pretrained else None
    return efficientnet_b2(weights=weights).features


def _resnet50(pretrained):
    from torchvision.models import ResNet50_Weights, resnet50

    _weights_cache()
    net = resnet50(weights=ResNet50_Weights.IMAGENET1K_V2 if pretrained else None)
    return nn.Sequential(*list(net.children())[:-2])


def _tiny_cnn(pretrained):
    # Two 8-channel conv layers; stride 2 each, so a 32px input gives 8x8 maps.
    return nn.Sequential(
        nn.Conv2d(3, 8, 3, stride=2, padding=1),
        nn.ReLU(),
        nn.Conv2d(8, 8, 3, stride=2, padding=1),
        nn.ReLU(),
    )


BACKBONES = {
    "efficientnet-b2": _efficientnet_b2,
    "resnet50": _resnet50,
    "tiny-cnn": _tiny_cnn,
}


def build_backbone(name, pretrained=False):
    try:
        factory = BACKBONES[name]
    except KeyError:
        raise ConfigError(f"unknown backbone {name!r}; available: {sorted(BACKBONES)}") from None
    return factory(pretrained)


# -- network ------------------------------------------------------------------


class DenseBlock(nn.Sequential):
    def __init__(self, in_features, width, dropout):
        super().__init__(
            nn.Dropout(dropout),
            nn.Linear(in_features, width),
            nn.ReLU(),
            nn.Dropout(dropout),
        )


class ModelOutputs(NamedTuple):
    diagnosis_logits: torch.Tensor
    diagnosis_probs: torch.Tensor
    characteristic_logits: torch.Tensor | None
    characteristic_probs: torch.Tensor | None
    last_conv_features: torch.Tensor


class DermXNet(nn.Module):
    def __init__(self, config, kind="dermx"):
        super().__init__()
        if kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
        self.config = config
        self.kind = kind
        self.backbone = build_backbone(config.backbone, config.pretrained)

        was_training = self.backbone.training
        self.backbone.eval()
        with torch.no_grad():
            probe = self.backbone(torch.zeros(1, 3, *config.input_size))
        self.backbone.train(was_training)
        self.feature_shape = tuple(probe.shape[1:])  # (k, h, w)
        n_features = int(np.prod(self.feature_shape))

        self.flatten = nn.Flatten()
        self.with_characteristics = kind != "dx"
        extra = 0
        if self.with_characteristics:
            self.characteristic_block = DenseBlock(n_features, config.dense_width, config.dropout)
            self.characteristic_out = nn.Linear(config.dense_width, config.num_characteristics)
            extra = config.num_characteristics
        self.diagnosis_block = DenseBlock(n_features, config.dense_width, config.dropout)
        self.diagnosis_out = nn.Linear(config.dense_width + extra, config.num_diseases)

    @property
    def attention_size(self):
        return self.feature_shape[1:]

    def heads(self, features, characteristic_logits=None):
        """Run both heads on backbone features.

        ``characteristic_logits`` overrides what is fed into the diagnosis
        head (used to probe the concatenation pathway).
        """
        flat = self.flatten(features)
        char_logits = None
        if self.with_characteristics:
            char_logits = self.characteristic_out(self.characteristic_block(flat))
        dx_in = self.diagnosis_block(flat)
        if self.with_characteristics:
            feed = char_logits if characteristic_logits is None else characteristic_logits
            dx_in = torch.cat([dx_in, feed], dim=1)
        return char_logits, self.diagnosis_out(dx_in)

    def forward(self, x):
        features = self.backbone(x)
        char_logits, dx_logits = self.heads(features)
        return ModelOutputs(
            diagnosis_logits=dx_logits,
            diagnosis_probs=torch.softmax(dx_logits, dim=1),
            characteristic_logits=char_logits,
            characteristic_probs=None if char_logits is None else torch.sigmoid(char_logits),
            last_conv_features=features,
        )


def build_model(config, kind="dermx"):
    return DermXNet(config, kind)


def backbone_parameter_count(model):
    return sum(p.numel() for p in model.backbone.parameters())


# -- losses -------------------------------------------------------------------


def loss_diagnosis(probs, target, class_weights=None):
    """Categorical cross-entropy averaged over batch and classes."""
    n, d = probs.shape
    ll = target * torch.log(probs.clamp(min=EPS_PROB))
    if class_weights is not None:
        ll = ll * class_weights
    return -ll.sum() / (n * d)


def loss_characteristics(probs, target):
    n, c = probs.shape
    p = probs.clamp(EPS_PROB, 1 - EPS_PROB)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).sum() / (n * c)


def dice_terms(attention, reference, eps=EPS_DICE):
    """Per-(image, characteristic) soft Dice loss, shape (N, C)."""
    if attention.shape != reference.shape:
        raise ShapeError(
            f"attention maps {tuple(attention.shape)} and reference masks {tuple(reference.shape)} differ"
        )
    inter = (attention * reference).sum(dim=(-2, -1))
    denom = attention.sum(dim=(-2, -1)) + reference.sum(dim=(-2, -1)) + eps
    return 1 - 2 * inter / denom


def loss_attention(attention, reference, valid):
    """Dice attention loss over pairs flagged in ``valid`` (N, C); averaged over N*C."""
    terms = dice_terms(attention, reference)
    n, c = valid.shape
    return (terms * valid.to(terms.dtype)).sum() / (n * c)


def combine(losses, config):
    total = config.lambda_d * losses["diagnosis"]
    if "characteristics" in losses:
        total = total + config.lambda_c * losses["characteristics"]
    if "attention" in losses:
        total = total + config.lambda_a * losses["attention"]
    return total


# -- Grad-CAM -----------------------------------------------------------------


def normalize_maps(cams):
    """Min-max normalise each map over its last two dims; constant maps become zero."""
    lo = cams.amin(dim=(-2, -1), keepdim=True)
    hi = cams.amax(dim=(-2, -1), keepdim=True)
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (cams - lo) / safe, torch.zeros_like(cams))


def grad_cam_from_features(
    model, features, class_indices, head="characteristic", create_graph=False, logits=None
):
    """Grad-CAM maps for ``class_indices``; returns (N, len(class_indices), h, w).

    The class score is the pre-activation logit. With ``create_graph`` the
    maps stay differentiable with respect to the model parameters (second
    order through the channel weights). Pass ``logits`` (the head output
    already computed from ``features``) to reuse the same dropout masks.
    """
    if head not in ("characteristic", "diagnosis"):
        raise ValueError(f"head must be 'characteristic' or 'diagnosis', got {head!r}")
    if not torch.is_grad_enabled():
        raise GradCamError("Grad-CAM needs gradients; called under torch.no_grad()/inference mode")
    if not features.requires_grad:
        if features.grad_fn is not None:
            raise GradCamError("feature maps are detached from the graph")
        features.requires_grad_(True)

    if logits is None:
        char_logits, dx_logits = model.heads(features)
        logits = dx_logits if head == "diagnosis" else char_logits
    if logits is None:
        raise GradCamError(f"model kind {model.kind!r} has no {head} head")

    maps = []
    for idx in class_indices:
        (grads,) = torch.autograd.grad(
            logits[:, idx].sum(), features, create_graph=create_graph, retain_graph=True
        )
        weights = grads.mean(dim=(2, 3), keepdim=True)
        maps.append(F.relu((weights * features).sum(dim=1)))
    return normalize_maps(torch.stack(maps, dim=1))


def grad_cam(model, image, class_index, head="characteristic"):
    """Grad-CAM of one class for one preprocessed image tensor (3, H, W); returns (h, w) array."""
    if image.dim() == 3:
        image = image[None]
    features = model.backbone(image)
    cams = grad_cam_from_features(model, features, [class_index], head)
    return cams[0, 0].detach().cpu().numpy()


# -- preprocessing and checkpoints ---------------------------------------------


def to_input(pixels, size):
    """uint8 HxWx3 array -> normalised float tensor (3, *size)."""
    t = torch.as_tensor(np.ascontiguousarray(pixels)).permute(2, 0, 1).float() / 255.0
    if tuple(t.shape[1:]) != tuple(size):
        t = F.interpolate(t[None], size=tuple(size), mode="bilinear", align_corners=False, antialias=True)[0]
    return normalize_input(t.clamp(0, 1))


def normalize_input(t):
    mean = torch.tensor(IMAGENET_MEAN, dtype=t.dtype).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=t.dtype).view(3, 1, 1)
    return (t - mean) / std


def save_checkpoint(path, model, *, diseases, characteristics, extra=None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "config": model.config.asdict(),
        "diseases": list(diseases),
        "characteristics": list(characteristics),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version!r}")
    config = DermXConfig(**{**payload["config"], "pretrained": False})
    model = DermXNet(config, payload["kind"])
    model.load_state_dict(payload["state_dict"])
    model.config.pretrained = payload["config"]["pretrained"]
    model.eval()
    return model, payload
