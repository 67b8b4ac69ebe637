"""Backbone registry and binary crack classifiers built on pretrained backbones.

Pretrained checkpoints are read from a local weight store: a directory with
one ``<name>.pth`` file per backbone, each holding the state dict of the
unmodified architecture (original classification layers included). Nothing
is downloaded implicitly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError, UsageError, WeightStoreError

log = logging.getLogger(__name__)

FROZEN = "frozen_features"
FINE_TUNE = "fine_tune_all"
TRAIN_MODES = (FROZEN, FINE_TUNE)

WEIGHTS_ENV = "CRACKBENCH_WEIGHTS"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# preprocessing_id -> (mean, std) applied to v/255
PREPROCESSING = {
    "imagenet_meanstd": (IMAGENET_MEAN, IMAGENET_STD),
    "symmetric_unit": ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),  # maps [0, 1] onto [-1, 1]
    "unit_range": ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
}


def _vgg19():
    from torchvision.models import vgg19
    return vgg19(weights=None)


def _resnet50():
    from torchvision.models import resnet50
    return resnet50(weights=None)


def _inception_v3():
    from torchvision.models import inception_v3
    return inception_v3(weights=None, aux_logits=True, init_weights=True, transform_input=False)


def _efficientnetv2_b0():
    import timm
    return timm.create_model("tf_efficientnetv2_b0", pretrained=False)


def _strip_vgg(m):
    m.avgpool = nn.AdaptiveAvgPool2d(1)
    m.classifier = nn.Identity()
    return m, 512


def _strip_resnet(m):
    m.fc = nn.Identity()
    return m, 2048


def _strip_inception(m):
    m.AuxLogits = None
    m.aux_logits = False
    m.fc = nn.Identity()
    return m, 2048


def _strip_timm(m):
    m.reset_classifier(0)
    return m, 1280


@dataclass(frozen=True)
class BackboneDescriptor:
    name: str
    declared_layers: int
    declared_params_millions: float
    native_input_size: int
    preprocessing_id: str
    build: Callable[[], nn.Module]
    strip: Callable[[nn.Module], tuple]

    def summary(self) -> dict:
        return {
            "name": self.name,
            "declared_layers": self.declared_layers,
            "declared_params_millions": self.declared_params_millions,
            "native_input_size": self.native_input_size,
            "preprocessing_id": self.preprocessing_id,
        }


# Layer/parameter counts are the published descriptor values, not counts of
# the instantiated torch modules. EfficientNetV2 is pinned to the B0 variant.
_REGISTRY = {
    d.name: d
    for d in (
        BackboneDescriptor("VGG19", 19, 143, 224, "imagenet_meanstd", _vgg19, _strip_vgg),
        BackboneDescriptor("ResNet50", 50, 23, 224, "imagenet_meanstd", _resnet50, _strip_resnet),
        BackboneDescriptor("InceptionV3", 48, 21, 299, "symmetric_unit", _inception_v3, _strip_inception),
        BackboneDescriptor("EfficientNetV2", 237, 25, 192, "imagenet_meanstd", _efficientnetv2_b0, _strip_timm),
    )
}


def list_backbones() -> list[BackboneDescriptor]:
    return list(_REGISTRY.values())


def get_backbone(name: str) -> BackboneDescriptor:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UsageError(f"unknown backbone {name!r}; registered: {', '.join(_REGISTRY)}") from None


def register_backbone(desc: BackboneDescriptor) -> None:
    if desc.name in _REGISTRY:
        raise ValueError(f"backbone {desc.name!r} already registered")
    _REGISTRY[desc.name] = desc


# -- weight store -------------------------------------------------------------

def weight_store_path(store=None) -> Path:
    store = store or os.environ.get(WEIGHTS_ENV)
    if not store:
        raise WeightStoreError(f"no weight store configured; pass a directory or set {WEIGHTS_ENV}")
    return Path(store)


def checkpoint_path(name: str, store=None) -> Path:
    return weight_store_path(store) / f"{name}.pth"


def create_weight_store(store, names: Optional[Sequence[str]] = None, seed: int = 0,
                        source: str = "random") -> dict:
    """Populate ``store`` with one checkpoint per backbone.

    ``source="pretrained"`` copies ImageNet weights from the local
    torchvision/timm caches (never reaching out if they are absent);
    ``source="random"`` writes seeded random initializations, which are
    useful for plumbing and tests but are not pretrained.
    """
    store = Path(store)
    store.mkdir(parents=True, exist_ok=True)
    names = list(names or _REGISTRY)
    index_path = store / "store.json"
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    for name in names:
        desc = get_backbone(name)
        if source == "random":
            torch.manual_seed(seed)
            net = desc.build()
            origin = f"random-init seed={seed}"
        elif source == "pretrained":
            net = _load_cached_pretrained(name)
            origin = "imagenet-pretrained"
        else:
            raise UsageError(f"unknown weight source {source!r}")
        torch.save(net.state_dict(), store / f"{name}.pth")
        index[name] = {"origin": origin, "checksum": state_checksum(net.state_dict())}
        del net
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index


def _load_cached_pretrained(name: str) -> nn.Module:
    os.environ.setdefault("HF_HUB_OFFLINE", "1")
    try:
        if name == "EfficientNetV2":
            import timm
            return timm.create_model("tf_efficientnetv2_b0", pretrained=True)
        from torchvision import models
        ctor, weights = {
            "VGG19": (models.vgg19, models.VGG19_Weights.IMAGENET1K_V1),
            "ResNet50": (models.resnet50, models.ResNet50_Weights.IMAGENET1K_V1),
            "InceptionV3": (models.inception_v3, models.Inception_V3_Weights.IMAGENET1K_V1),
        }[name]
        return ctor(weights=weights)
    except Exception as e:  # network errors surface as many different types
        raise WeightStoreError(f"pretrained weights for {name} are not in the local cache: {e}") from e


def state_checksum(state: dict) -> str:
    h = hashlib.sha256()
    for key in sorted(state):
        t = state[key].detach().cpu().contiguous()
        h.update(key.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
    return h.hexdigest()


def _build_on_meta(desc: BackboneDescriptor) -> nn.Module:
    with torch.device("meta"):
        return desc.build()


# -- classifier ---------------------------------------------------------------

class ClassifierModel(nn.Module):
    """Pretrained backbone with pooled features feeding one sigmoid unit."""

    def __init__(self, descriptor: BackboneDescriptor, backbone: nn.Module, feature_dim: int,
                 mode: str = FINE_TUNE, seed: int = 0, decision_threshold: float = 0.5,
                 abstain_margin: float = 0.0):
        super().__init__()
        self.descriptor = descriptor
        self.backbone = backbone
        self.head = nn.Linear(feature_dim, 1)
        self.seed = seed
        self.decision_threshold = decision_threshold
        self.abstain_margin = abstain_margin
        self.pretrained_checksum: Optional[str] = None
        self._init_head(seed)
        self.set_mode(mode)

    @property
    def preprocessing_id(self) -> str:
        d = self.descriptor
        return f"{d.preprocessing_id}@{d.native_input_size}"

    @property
    def normalization(self) -> str:
        if self.descriptor.preprocessing_id == "unit_range":
            return "unit_range"
        return self.descriptor.name

    def _init_head(self, seed: int):
        if self.head.weight.is_meta:
            return
        g = torch.Generator().manual_seed(seed)
        bound = 1.0 / np.sqrt(self.head.in_features)
        with torch.no_grad():
            self.head.weight.uniform_(-bound, bound, generator=g)
            self.head.bias.uniform_(-bound, bound, generator=g)

    def set_mode(self, mode: str):
        if mode not in TRAIN_MODES:
            raise UsageError(f"unknown train mode {mode!r}; expected one of {TRAIN_MODES}")
        self.mode = mode
        for p in self.backbone.parameters():
            p.requires_grad_(mode == FINE_TUNE)
        for p in self.head.parameters():
            p.requires_grad_(True)
        self.train(self.training)

    def train(self, flag: bool = True):
        super().train(flag)
        if self.mode == FROZEN:
            # running statistics and dropout in a frozen backbone stay in inference form
            self.backbone.eval()
        return self

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)).squeeze(1)

    def parameter_counts(self) -> dict[str, int]:
        total = sum(p.numel() for p in self.parameters())
        trainable = sum(p.numel() for p in self.parameters() if p.requires_grad)
        head = sum(p.numel() for p in self.head.parameters())
        return {"total": total, "trainable": trainable, "frozen": total - trainable, "head": head}

    def backbone_checksum(self) -> str:
        return state_checksum(self.backbone.state_dict())

    def head_checksum(self) -> str:
        return state_checksum(self.head.state_dict())

    def to_input(self, batch) -> torch.Tensor:
        """Stack normalized HxWx3 arrays into an NCHW tensor at the native input size."""
        arrays = []
        for a in batch:
            a = np.asarray(a)
            if a.ndim != 3 or a.shape[2] != 3 or a.shape[0] != a.shape[1]:
                raise DataError(f"expected a square HxWx3 normalized patch, got shape {a.shape}")
            arrays.append(a)
        x = torch.from_numpy(np.stack(arrays).astype(np.float32)).permute(0, 3, 1, 2).contiguous()
        size = self.descriptor.native_input_size
        if x.shape[-1] != size:
            x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        return x

    @torch.no_grad()
    def predict(self, batch, batch_size: int = 32) -> list[float]:
        batch = list(batch)
        if not batch:
            return []
        was_training = self.training
        self.eval()
        try:
            out = []
            for i in range(0, len(batch), batch_size):
                logits = self(self.to_input(batch[i:i + batch_size]))
                out.extend(torch.sigmoid(logits.double()).tolist())
        finally:
            self.train(was_training)
        return out


def build_classifier(name: str, mode: str = FINE_TUNE, seed: int = 0, weight_store=None,
                     decision_threshold: float = 0.5, abstain_margin: float = 0.0) -> ClassifierModel:
    desc = get_backbone(name)
    ckpt = checkpoint_path(name, weight_store)
    if not ckpt.is_file():
        raise WeightStoreError(f"missing pretrained weights for {name}: {ckpt}")
    net = _build_on_meta(desc)
    state = torch.load(ckpt, map_location="cpu", weights_only=True)
    try:
        net.load_state_dict(state, assign=True)
    except RuntimeError as e:
        raise WeightStoreError(f"checkpoint {ckpt} does not match the {name} architecture: {e}") from e
    backbone, dim = desc.strip(net)
    model = ClassifierModel(desc, backbone, dim, mode, seed, decision_threshold, abstain_margin)
    model.pretrained_checksum = state_checksum(
        {k: v for k, v in state.items() if k in backbone.state_dict()})
    return model


def predict(model, batch, batch_size: int = 32) -> list[float]:
    return model.predict(batch, batch_size=batch_size)


def classify(probability: float, threshold: float = 0.5) -> int:
    """1 (positive, cracked) when probability >= threshold, else 0."""
    if not 0.0 <= probability <= 1.0:
        raise ValueError(f"probability must lie in [0, 1], got {probability}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return 1 if probability >= threshold else 0


def low_confidence(probability: float, threshold: float, margin: float) -> bool:
    """True when the score falls inside the abstain band of width ``margin`` around the threshold."""
    return margin > 0 and abs(probability - threshold) < margin / 2


# -- artifacts ----------------------------------------------------------------

def save_model(model: ClassifierModel, path, training_config_digest: str = "") -> Path:
    path = Path(path).with_suffix(".pt")
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar = {
        "backbone": model.descriptor.name,
        "mode": model.mode,
        "seed": model.seed,
        "decision_threshold": model.decision_threshold,
        "abstain_margin": model.abstain_margin,
        "preprocessing_id": model.preprocessing_id,
        "training_config_digest": training_config_digest,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_model(path) -> ClassifierModel:
    path = Path(path)
    ckpt, side = path.with_suffix(".pt"), path.with_suffix(".json")
    if not ckpt.is_file() or not side.is_file():
        raise DataError(f"model artifact needs both {ckpt.name} and {side.name} in {ckpt.parent}")
    meta = json.loads(side.read_text())
    desc = get_backbone(meta["backbone"])
    backbone, dim = desc.strip(_build_on_meta(desc))
    with torch.device("meta"):
        model = ClassifierModel(desc, backbone, dim, meta["mode"], 0,
                                meta["decision_threshold"], meta.get("abstain_margin", 0.0))
    model.load_state_dict(torch.load(ckpt, map_location="cpu", weights_only=True), assign=True)
    model.seed = meta["seed"]
    model.set_mode(meta["mode"])
    return model.eval()
