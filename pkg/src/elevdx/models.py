"""Backbone construction, elevation-vector fusion, and GradCAM.

Every supported backbone is reduced to the same shape: a convolutional trunk
whose output is the last spatial feature map, global average pooling, and a
single linear classifier. The fusion operator concatenates an elevation
vector (one-hot or probabilistic) to the pooled feature vector immediately
before that classifier, which adds exactly aux_dim * num_classes parameters.

VGG-16 keeps only its convolutional stack; the three fully-connected layers
are replaced by global average pooling plus the linear head. MobileNetV3-L is
the one family whose stock head has a hidden linear layer after pooling; that
layer is kept (it is part of the architecture) and fusion happens after it,
still directly before the final classifier.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError

ROLES = ("elevation", "diagnosis")
FUSION_MODES = ("none", "gt_onehot", "soft", "discrete_onehot")

ONE_HOT_TOL = 1e-6


def _tv():
    import torchvision.models as tvm
    return tvm


def _resnet_trunk(ctor, weights):
    m = ctor(weights=weights)
    return nn.Sequential(m.conv1, m.bn1, m.relu, m.maxpool,
                         m.layer1, m.layer2, m.layer3, m.layer4)


def _features_trunk(ctor, weights):
    return ctor(weights=weights).features


def _densenet_trunk(ctor, weights):
    return nn.Sequential(ctor(weights=weights).features, nn.ReLU(inplace=True))


# family -> (trunk builder, torchvision ctor name, feature_dim, has hidden head layer)
_FAMILIES: dict[str, tuple] = {
    "vgg16-gap": (_features_trunk, "vgg16", 512, False),
    "resnet18": (_resnet_trunk, "resnet18", 512, False),
    "resnet50": (_resnet_trunk, "resnet50", 2048, False),
    "mobilenetv2": (_features_trunk, "mobilenet_v2", 1280, False),
    "mobilenetv3l": (_features_trunk, "mobilenet_v3_large", 1280, True),
    "densenet121": (_densenet_trunk, "densenet121", 1024, False),
    "efficientnet-b0": (_features_trunk, "efficientnet_b0", 1280, False),
    "efficientnet-b1": (_features_trunk, "efficientnet_b1", 1280, False),
}

FAMILIES = tuple(_FAMILIES)


def family_feature_dim(family: str) -> int:
    if family not in _FAMILIES:
        raise ConfigError(f"unknown backbone family {family!r}; supported: {FAMILIES}")
    return _FAMILIES[family][2]


@dataclass(frozen=True)
class BackboneSpec:
    family: str
    num_classes: int
    pretrained: bool = False
    feature_dim: int = 0  # 0 = derive from the family

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ConfigError(f"unknown backbone family {self.family!r}; supported: {FAMILIES}")
        expected = family_feature_dim(self.family)
        if self.feature_dim == 0:
            object.__setattr__(self, "feature_dim", expected)
        elif self.feature_dim != expected:
            raise ConfigError(
                f"feature_dim {self.feature_dim} does not match {self.family} "
                f"penultimate width {expected}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")


@dataclass(frozen=True)
class FusionHead:
    feature_dim: int
    num_classes: int
    aux_dim: int = 0
    mode: str = "none"

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.mode!r}; choices: {FUSION_MODES}")
        if self.mode != "none" and self.aux_dim < 1:
            raise ConfigError(f"fusion mode {self.mode!r} requires aux_dim >= 1")
        if self.mode == "none" and self.aux_dim != 0:
            raise ConfigError("aux_dim must be 0 when fusion mode is 'none'")

    @property
    def classifier_in(self) -> int:
        return self.feature_dim + self.aux_dim


class ClassifierNet(nn.Module):
    """Trunk -> global average pooling -> (aux concat) -> linear classifier."""

    def __init__(self, trunk: nn.Module, classifier_in: int, num_classes: int,
                 aux_dim: int = 0, post_pool: nn.Module | None = None):
        super().__init__()
        self.trunk = trunk
        self.post_pool = post_pool if post_pool is not None else nn.Identity()
        self.aux_dim = aux_dim
        self.classifier = nn.Linear(classifier_in, num_classes)
        # New-head init: zero bias, symmetric uniform scaled by fan-in.
        bound = 1.0 / classifier_in ** 0.5
        nn.init.uniform_(self.classifier.weight, -bound, bound)
        nn.init.zeros_(self.classifier.bias)

    def pooled_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.post_pool(self.trunk(x).mean(dim=(2, 3)))

    def forward(self, x: torch.Tensor, aux: torch.Tensor | None = None) -> torch.Tensor:
        feats = self.pooled_features(x)
        if self.aux_dim:
            if aux is None:
                raise DataError("this model requires an aux elevation vector")
            feats = torch.cat([feats, aux], dim=1)
        elif aux is not None:
            raise DataError("aux provided to a model without fusion")
        return self.classifier(feats)


@dataclass
class ModelBundle:
    spec: BackboneSpec
    fusion: FusionHead
    net: ClassifierNet
    role: str
    class_names: tuple[str, ...] = ()
    modality: str | None = None
    weights_ref: str | None = None
    config_hash: str = ""

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"role must be one of {ROLES}")
        if self.class_names and len(self.class_names) != self.spec.num_classes:
            raise ConfigError("class_names length does not match num_classes")

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def identifier(self) -> str:
        """Stable checkpoint identifier: basename plus training-config hash.

        Deliberately path-free so artifacts derived from equal runs compare
        byte-identical regardless of where the checkpoints live.
        """
        if not self.weights_ref:
            return "in-memory"
        name = Path(self.weights_ref).name
        return f"{name}@{self.config_hash[:8]}" if self.config_hash else name

    def classifier_param_count(self) -> int:
        return sum(p.numel() for p in self.net.classifier.parameters())

    def total_param_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


def build_model(spec: BackboneSpec, fusion: FusionHead, role: str = "elevation",
                class_names: tuple[str, ...] = (), modality: str | None = None) -> ModelBundle:
    """Construct a bundle whose forward contract matches forward_elevation/_diagnosis."""
    if fusion.feature_dim != spec.feature_dim:
        raise ConfigError(
            f"fusion.feature_dim {fusion.feature_dim} != backbone feature_dim {spec.feature_dim}")
    if fusion.num_classes != spec.num_classes:
        raise ConfigError("fusion and backbone disagree on num_classes")
    builder, ctor_name, _, has_hidden = _FAMILIES[spec.family]
    tvm = _tv()
    ctor = getattr(tvm, ctor_name)
    weights = "DEFAULT" if spec.pretrained else None
    trunk = builder(ctor, weights)
    post_pool = None
    if has_hidden:  # mobilenetv3l: keep the stock 960 -> 1280 hidden layer
        stock = ctor(weights=weights).classifier
        post_pool = nn.Sequential(stock[0], nn.Hardswish())
    net = ClassifierNet(trunk, fusion.classifier_in, spec.num_classes,
                        aux_dim=fusion.aux_dim, post_pool=post_pool)
    net.eval()
    return ModelBundle(spec=spec, fusion=fusion, net=net, role=role,
                       class_names=tuple(class_names), modality=modality)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _to_batch(image) -> tuple[torch.Tensor, bool]:
    """H x W x 3 or N x H x W x 3 float array -> N x 3 x H x W tensor."""
    if isinstance(image, torch.Tensor):
        arr = image.detach().cpu().numpy()
    else:
        arr = np.asarray(image, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise DataError(f"expected H x W x 3 or N x H x W x 3 image array, got shape {arr.shape}")
    tensor = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(0, 3, 1, 2)
    return tensor.contiguous(memory_format=torch.channels_last), single


def _validate_aux(fusion: FusionHead, aux, batch: int) -> torch.Tensor | None:
    if fusion.mode == "none":
        if aux is not None:
            raise DataError("aux provided to a fusion-free model")
        return None
    if aux is None:
        raise DataError(f"fusion mode {fusion.mode!r} requires an aux vector")
    arr = np.asarray(aux, dtype=np.float32)
    if arr.ndim == 1:
        arr = np.tile(arr, (batch, 1))
    if arr.shape != (batch, fusion.aux_dim):
        raise DataError(f"aux shape {arr.shape} does not match (batch, {fusion.aux_dim})")
    if arr.min() < -ONE_HOT_TOL or arr.max() > 1 + ONE_HOT_TOL:
        raise DataError("aux entries must lie in [0, 1]")
    if fusion.mode in ("gt_onehot", "discrete_onehot"):
        ones = np.isclose(arr, 1.0, atol=ONE_HOT_TOL).sum(axis=1)
        zeros = np.isclose(arr, 0.0, atol=ONE_HOT_TOL).sum(axis=1)
        if not np.all((ones == 1) & (zeros == fusion.aux_dim - 1)):
            raise DataError(f"aux must be one-hot for fusion mode {fusion.mode!r}")
    return torch.from_numpy(arr)


def _forward_probs(bundle: ModelBundle, image, aux) -> np.ndarray:
    x, single = _to_batch(image)
    aux_t = _validate_aux(bundle.fusion, aux, x.shape[0])
    bundle.net.eval()
    with torch.inference_mode():
        probs = torch.softmax(bundle.net(x, aux_t), dim=1).numpy()
    return probs[0] if single else probs


def forward_elevation(bundle: ModelBundle, image) -> np.ndarray:
    """Probability vector over elevation classes for one image (or a batch)."""
    if bundle.role != "elevation":
        raise DataError(f"forward_elevation needs an elevation bundle, got role {bundle.role!r}")
    return _forward_probs(bundle, image, None)


def forward_diagnosis(bundle: ModelBundle, image, aux=None) -> np.ndarray:
    """Probability vector over diagnosis classes; aux required iff the bundle fuses."""
    if bundle.role != "diagnosis":
        raise DataError(f"forward_diagnosis needs a diagnosis bundle, got role {bundle.role!r}")
    return _forward_probs(bundle, image, aux)


def one_hot(index: int, length: int) -> np.ndarray:
    out = np.zeros(length, dtype=np.float32)
    out[int(index)] = 1.0
    return out


def discretize(probs) -> np.ndarray:
    """One-hot of the argmax, lowest index on ties."""
    probs = np.asarray(probs)
    return one_hot(int(np.argmax(probs)), probs.shape[-1])


# ---------------------------------------------------------------------------
# GradCAM
# ---------------------------------------------------------------------------

def gradcam(bundle: ModelBundle, image, target_class: int, aux=None) -> np.ndarray:
    """Gradient-weighted class activation map, upsampled to the input size.

    Per-channel weights are the spatial mean of d(score)/d(feature map); the
    weighted channel sum is rectified, bilinearly upsampled, and divided by
    its maximum (an all-zero map stays all-zero). Output values lie in [0, 1].
    """
    if not 0 <= int(target_class) < bundle.num_classes:
        raise ConfigError(f"target_class {target_class} out of range "
                          f"[0, {bundle.num_classes})")
    x, single = _to_batch(image)
    if not single:
        raise DataError("gradcam expects a single H x W x 3 image")
    aux_t = _validate_aux(bundle.fusion, aux, 1)
    net = bundle.net
    net.eval()
    with torch.enable_grad():
        feats = net.trunk(x)
        if feats.ndim != 4:
            raise DataError("backbone does not expose spatial feature maps")
        pooled = net.post_pool(feats.mean(dim=(2, 3)))
        if net.aux_dim:
            pooled = torch.cat([pooled, aux_t], dim=1)
        score = net.classifier(pooled)[0, int(target_class)]
        grads = torch.autograd.grad(score, feats, allow_unused=False)[0]
    channel_weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((channel_weights * feats).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)
    cam = cam[0, 0].detach()
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam.numpy()


# ---------------------------------------------------------------------------
# Checkpoints: native weights file plus a flat key-value sidecar
# ---------------------------------------------------------------------------

def _sidecar_path(path) -> Path:
    return Path(str(path) + ".meta")


def save_checkpoint(bundle: ModelBundle, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(bundle.net.state_dict(), path)
    lines = {
        "family": bundle.spec.family,
        "num_classes": bundle.spec.num_classes,
        "pretrained": bundle.spec.pretrained,
        "feature_dim": bundle.spec.feature_dim,
        "fusion_mode": bundle.fusion.mode,
        "aux_dim": bundle.fusion.aux_dim,
        "role": bundle.role,
        "class_names": ",".join(bundle.class_names),
        "modality": bundle.modality or "",
        "config_hash": bundle.config_hash,
    }
    if extra:
        lines.update(extra)
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        for key, value in lines.items():
            fh.write(f"{key}: {value}\n")
    bundle.weights_ref = str(path)
    return path


def read_sidecar(path) -> dict[str, str]:
    sidecar = _sidecar_path(path)
    if not sidecar.is_file():
        raise DataError(f"checkpoint sidecar not found: {sidecar}")
    meta = {}
    with open(sidecar, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition(":")
            meta[key.strip()] = value.strip()
    return meta


def load_checkpoint(path) -> ModelBundle:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    meta = read_sidecar(path)
    spec = BackboneSpec(family=meta["family"], num_classes=int(meta["num_classes"]),
                        pretrained=False)
    fusion = FusionHead(feature_dim=spec.feature_dim, num_classes=spec.num_classes,
                        aux_dim=int(meta.get("aux_dim", 0)),
                        mode=meta.get("fusion_mode", "none"))
    class_names = tuple(c for c in meta.get("class_names", "").split(",") if c)
    bundle = build_model(spec, fusion, role=meta["role"], class_names=class_names,
                         modality=meta.get("modality") or None)
    state = torch.load(path, map_location="cpu", weights_only=True)
    bundle.net.load_state_dict(state)
    bundle.net.eval()
    bundle.weights_ref = str(path)
    bundle.config_hash = meta.get("config_hash", "")
    return bundle


def config_fingerprint(mapping: dict) -> str:
    """Stable short hash of a flat config mapping, stored in checkpoint sidecars."""
    payload = "\n".join(f"{k}={mapping[k]}" for k in sorted(mapping))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]
