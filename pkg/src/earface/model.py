"""Backbones, classification heads and the multimodal multitask network.

Two backbone families are available at any width:

* ``vgg_like``: conv blocks (13 convolutions at the default layout) followed
  by the first fully-connected layer, so a stream emits an embedding vector
  (4096-d at ``width_scale=1``). The rest of the classifier (one hidden FC
  layer plus the task output layers) lives in :class:`ClassifierHead`.
* ``residual_like``: bottleneck residual stages ending in global average
  pooling; the head holds only the task output layers.

``width_scale``, ``input_size`` and ``stage_layout`` shrink the network for
CPU tests; the defaults give the full 224 x 224 layouts.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import NUM_AGE_GROUPS, ModalPair
from .errors import ConfigError, DimensionError
from .fusion import fuse
from .imageops import standardize, to_chw_batch

logger = logging.getLogger(__name__)

FAMILIES = ("vgg_like", "residual_like")
TASKS = ("age", "gender")
NUM_CLASSES = {"age": NUM_AGE_GROUPS, "gender": 2}
FUSION_MODES = ("none", "intensity", "spatial", "channel", "feature")
MODALITIES = ("profile", "ear")

VGG_WIDTHS = (64, 128, 256, 512, 512)
VGG_LAYOUT = (2, 2, 3, 3, 3)
VGG_FC_WIDTH = 4096
RES_WIDTHS = (64, 128, 256, 512)
RES_LAYOUT = (3, 4, 6, 3)
RES_EXPANSION = 4


def _scaled(width: int, scale: float) -> int:
    return max(1, int(round(width * scale)))


@dataclass(frozen=True)
class BackboneSpec:
    family: str = "vgg_like"
    width_scale: float = 1.0
    input_channels: int = 3
    embedding_dim: Optional[int] = None
    dropout_rate: float = 0.75
    pretrained_weights_ref: Optional[str] = None
    input_size: tuple[int, int] = (224, 224)
    stage_layout: Optional[tuple[int, ...]] = None
    # residual_like only: "imagenet" = 7x7/2 conv + max-pool, "compact" = 3x3/1 conv.
    stem: str = "imagenet"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.stage_layout is not None:
            object.__setattr__(self, "stage_layout", tuple(int(v) for v in self.stage_layout))
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown backbone family {self.family!r}; expected one of {FAMILIES}")
        if not 0.0 < self.width_scale <= 1.0:
            raise ConfigError(f"width_scale must be in (0, 1], got {self.width_scale}")
        if self.input_channels not in (3, 6):
            raise ConfigError(f"input_channels must be 3 or 6, got {self.input_channels}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.stem not in ("imagenet", "compact"):
            raise ConfigError(f"unknown stem {self.stem!r}")
        max_stages = len(VGG_WIDTHS) if self.family == "vgg_like" else len(RES_WIDTHS)
        if not 1 <= len(self.layout) <= max_stages or min(self.layout) < 1:
            raise ConfigError(f"stage_layout {self.layout} invalid for {self.family}")
        h, w = self.feature_map_size
        if h < 1 or w < 1:
            raise ConfigError(f"input_size {self.input_size} too small for {len(self.layout)} stages")
        if self.family == "residual_like" and self.embedding_dim not in (None, self.map_channels):
            raise ConfigError(
                f"residual_like embedding is the pooled map width {self.map_channels}, got {self.embedding_dim}"
            )
        if self.embedding_dim is not None and self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be positive")

    @property
    def layout(self) -> tuple[int, ...]:
        if self.stage_layout is not None:
            return self.stage_layout
        return VGG_LAYOUT if self.family == "vgg_like" else RES_LAYOUT

    def stage_widths(self) -> list[int]:
        base = VGG_WIDTHS if self.family == "vgg_like" else RES_WIDTHS
        return [_scaled(w, self.width_scale) for w in base[: len(self.layout)]]

    @property
    def map_channels(self) -> int:
        widths = self.stage_widths()
        return widths[-1] if self.family == "vgg_like" else widths[-1] * RES_EXPANSION

    @property
    def feature_map_size(self) -> tuple[int, int]:
        h, w = self.input_size
        if self.family == "vgg_like":
            factor = 2 ** len(self.layout)
            return h // factor, w // factor
        if self.stem == "imagenet":
            h, w = _conv_out(h, 7, 2, 3), _conv_out(w, 7, 2, 3)
            h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
        for _ in range(len(self.layout) - 1):
            h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
        return h, w

    @property
    def resolved_embedding_dim(self) -> int:
        if self.family == "residual_like":
            return self.map_channels
        return self.embedding_dim or _scaled(VGG_FC_WIDTH, self.width_scale)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["stage_layout"] = None if self.stage_layout is None else list(self.stage_layout)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        d = dict(d)
        d["input_size"] = tuple(d.get("input_size", (224, 224)))
        if d.get("stage_layout") is not None:
            d["stage_layout"] = tuple(d["stage_layout"])
        return cls(**d)


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


class Bottleneck(nn.Module):
    def __init__(self, in_ch: int, width: int, stride: int = 1):
        super().__init__()
        out_ch = width * RES_EXPANSION
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity)


class Backbone(nn.Module):
    """Feature extractor: image batch (N, C, H, W) -> embedding (N, D)."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.input_channels = spec.input_channels
        widths = spec.stage_widths()
        if spec.family == "vgg_like":
            layers: list[nn.Module] = []
            in_ch = spec.input_channels
            for width, n_conv in zip(widths, spec.layout):
                for _ in range(n_conv):
                    layers += [nn.Conv2d(in_ch, width, 3, padding=1), nn.ReLU(inplace=True)]
                    in_ch = width
                layers.append(nn.MaxPool2d(2))
            self.features = nn.Sequential(*layers)
            h, w = spec.feature_map_size
            self.fc = nn.Linear(in_ch * h * w, spec.resolved_embedding_dim)
        else:
            if spec.stem == "imagenet":
                stem = [
                    nn.Conv2d(spec.input_channels, widths[0], 7, stride=2, padding=3, bias=False),
                    nn.BatchNorm2d(widths[0]),
                    nn.ReLU(inplace=True),
                    nn.MaxPool2d(3, stride=2, padding=1),
                ]
            else:
                stem = [
                    nn.Conv2d(spec.input_channels, widths[0], 3, padding=1, bias=False),
                    nn.BatchNorm2d(widths[0]),
                    nn.ReLU(inplace=True),
                ]
            blocks: list[nn.Module] = []
            in_ch = widths[0]
            for i, (width, n_blocks) in enumerate(zip(widths, spec.layout)):
                for b in range(n_blocks):
                    stride = 2 if (i > 0 and b == 0) else 1
                    blocks.append(Bottleneck(in_ch, width, stride))
                    in_ch = width * RES_EXPANSION
            self.features = nn.Sequential(*stem, *blocks)
            self.fc = None
        self.embedding_dim = spec.resolved_embedding_dim

    @property
    def first_conv(self) -> nn.Conv2d:
        return self.features[0]

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)

    def embed_map(self, fmap: torch.Tensor) -> torch.Tensor:
        if self.fc is None:
            return fmap.mean(dim=(2, 3))
        return F.relu(self.fc(torch.flatten(fmap, 1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.embed_map(self.feature_map(x))


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_backbone(spec: BackboneSpec, seed: int = 0) -> Backbone:
    """Seeded backbone; loads ``spec.pretrained_weights_ref`` when set.

    A 3-channel weight file loaded into a 6-channel spec is widened with
    :func:`adapt_input_channels`.
    """
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if spec.pretrained_weights_ref is None:
            backbone = Backbone(spec)
            _init_weights(backbone)
            return backbone
    from .checkpoint import load_backbone_weights

    return load_backbone_weights(spec.pretrained_weights_ref, spec)


def adapt_input_channels(backbone: Backbone, new_channels: int = 6) -> Backbone:
    """Widen the first convolution from 3 to 6 input channels in place.

    The RGB filters are copied onto channels 3-5 and the whole first-layer
    weight is halved, so an input whose two halves are the same image gives
    the same first-layer response as the original network on that image.
    """
    if new_channels != 6:
        raise ConfigError(f"only 3 -> 6 channel adaptation is supported, got {new_channels}")
    conv = backbone.first_conv
    if conv.in_channels == 6:
        logger.warning("backbone already takes 6 input channels; adapt_input_channels is a no-op")
        return backbone
    if conv.in_channels != 3:
        raise DimensionError(f"first conv has {conv.in_channels} input channels, expected 3")
    wide = nn.Conv2d(
        6,
        conv.out_channels,
        conv.kernel_size,
        stride=conv.stride,
        padding=conv.padding,
        bias=conv.bias is not None,
    ).to(dtype=conv.weight.dtype)
    with torch.no_grad():
        w = conv.weight.detach()
        wide.weight.copy_(torch.cat([w, w], dim=1) * 0.5)
        if conv.bias is not None:
            wide.bias.copy_(conv.bias.detach())
    backbone.features[0] = wide
    backbone.input_channels = 6
    backbone.spec = replace(backbone.spec, input_channels=6, pretrained_weights_ref=None)
    return backbone


@dataclass
class HeadOutputs:
    """Per-task logits and the embeddings their center banks consume (batched rows)."""

    age_logits: Optional[torch.Tensor] = None
    gender_logits: Optional[torch.Tensor] = None
    age_embedding: Optional[torch.Tensor] = None
    gender_embedding: Optional[torch.Tensor] = None
    head_input: Optional[torch.Tensor] = field(default=None, repr=False)

    def logits(self, task: str) -> torch.Tensor:
        out = self.age_logits if task == "age" else self.gender_logits
        if out is None:
            raise ConfigError(f"no {task} head in this model")
        return out

    def embedding(self, task: str) -> torch.Tensor:
        out = self.age_embedding if task == "age" else self.gender_embedding
        if out is None:
            raise ConfigError(f"no {task} head in this model")
        return out

    def __len__(self) -> int:
        ref = self.age_logits if self.age_logits is not None else self.gender_logits
        return 0 if ref is None else ref.shape[0]


def _check_tasks(tasks: Sequence[str]) -> tuple[str, ...]:
    tasks = tuple(t for t in TASKS if t in set(tasks))
    unknown = set(tasks) - set(TASKS)
    if unknown or not tasks:
        raise ConfigError(f"tasks must be a non-empty subset of {TASKS}, got {tasks}")
    return tasks


class ClassifierHead(nn.Module):
    """Shared classifier part followed by one output layer per task.

    With ``hidden_dim`` set (vgg_like) the shared part is
    dropout -> linear -> ReLU; its output is the embedding used by the
    center loss and fed to the output layers. Without it (residual_like) the
    pooled input is the embedding directly.
    """

    def __init__(self, in_dim: int, tasks: Sequence[str], hidden_dim: Optional[int] = None, dropout: float = 0.0):
        super().__init__()
        self.tasks = _check_tasks(tasks)
        self.in_dim = in_dim
        if hidden_dim:
            self.shared = nn.Sequential(nn.Dropout(dropout), nn.Linear(in_dim, hidden_dim), nn.ReLU(inplace=True))
            self.embedding_dim = hidden_dim
        else:
            self.shared = nn.Identity()
            self.embedding_dim = in_dim
        self.age = nn.Linear(self.embedding_dim, NUM_CLASSES["age"]) if "age" in self.tasks else None
        self.gender = nn.Linear(self.embedding_dim, NUM_CLASSES["gender"]) if "gender" in self.tasks else None

    def task_layer(self, task: str) -> nn.Linear:
        layer = self.age if task == "age" else self.gender
        if layer is None:
            raise ConfigError(f"no {task} head in this model")
        return layer

    def forward(self, z: torch.Tensor) -> HeadOutputs:
        if z.shape[1] != self.in_dim:
            raise DimensionError(f"head expects {self.in_dim}-d input, got {z.shape[1]}")
        emb = self.shared(z)
        out = HeadOutputs(head_input=z)
        if self.age is not None:
            out.age_logits, out.age_embedding = self.age(emb), emb
        if self.gender is not None:
            out.gender_logits, out.gender_embedding = self.gender(emb), emb
        return out


def build_head(spec: BackboneSpec, tasks: Sequence[str], num_streams: int = 1) -> ClassifierHead:
    in_dim = spec.resolved_embedding_dim * num_streams
    if spec.family == "vgg_like":
        return ClassifierHead(in_dim, tasks, spec.resolved_embedding_dim, spec.dropout_rate)
    return ClassifierHead(in_dim, tasks)


def _pair_tensors(pair) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(pair, ModalPair):
        return to_chw_batch([pair.profile]), to_chw_batch([pair.ear])
    if isinstance(pair, (list, tuple)) and pair and isinstance(pair[0], ModalPair):
        return to_chw_batch([p.profile for p in pair]), to_chw_batch([p.ear for p in pair])
    profile, ear = pair
    return profile, ear


def forward_feature_fusion(profile_stream: Backbone, ear_stream: Backbone, head: ClassifierHead, pair) -> HeadOutputs:
    """Run both streams and classify their concatenated representation.

    ``pair`` is a :class:`ModalPair`, a list of them, or a ``(profile, ear)``
    tuple of N x C x H x W tensors. vgg_like streams concatenate their
    embedding vectors (profile first); residual_like streams concatenate their
    final feature maps along channels and then pool.
    """
    if profile_stream.embedding_dim != ear_stream.embedding_dim:
        raise DimensionError(
            f"stream embedding widths differ: {profile_stream.embedding_dim} vs {ear_stream.embedding_dim}"
        )
    profile, ear = _pair_tensors(pair)
    if profile_stream.spec.family == "residual_like":
        fmap = torch.cat([profile_stream.feature_map(profile), ear_stream.feature_map(ear)], dim=1)
        z = fmap.mean(dim=(2, 3))
    else:
        z = torch.cat([profile_stream(profile), ear_stream(ear)], dim=1)
    return head(z)


class AgeGenderNet(nn.Module):
    """Unimodal, data-fused or feature-fused multitask network.

    ``fusion_mode`` is one of ``none`` (single modality, chosen by
    ``modality``), ``intensity``, ``spatial``, ``channel`` or ``feature``.
    """

    def __init__(
        self,
        spec: BackboneSpec,
        tasks: Sequence[str] = TASKS,
        fusion_mode: str = "none",
        modality: str = "profile",
        seed: int = 0,
    ):
        super().__init__()
        if fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {fusion_mode!r}; expected one of {FUSION_MODES}")
        if modality not in MODALITIES:
            raise ConfigError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
        self.tasks = _check_tasks(tasks)
        self.fusion_mode = fusion_mode
        self.modality = modality if fusion_mode == "none" else "both"
        self.metadata: dict = {}
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            if fusion_mode == "feature":
                if spec.input_channels != 3:
                    raise ConfigError("feature fusion streams take 3-channel images")
                self.streams = nn.ModuleDict(
                    {"profile": build_backbone(spec, seed), "ear": build_backbone(spec, seed + 1)}
                )
            elif fusion_mode == "channel":
                stream = build_backbone(spec, seed)
                if stream.input_channels == 3:
                    adapt_input_channels(stream, 6)
                self.streams = nn.ModuleDict({"main": stream})
            else:
                if spec.input_channels != 3:
                    raise ConfigError(f"{fusion_mode!r} inputs have 3 channels; spec says {spec.input_channels}")
                self.streams = nn.ModuleDict({"main": build_backbone(spec, seed)})
            torch.manual_seed(seed + 2)
            self.head = build_head(spec, self.tasks, num_streams=len(self.streams))
            _init_weights(self.head)
        self.spec = next(iter(self.streams.values())).spec

    @property
    def input_size(self) -> tuple[int, int]:
        return self.spec.input_size

    def prepare_inputs(self, pairs: Sequence[ModalPair]):
        """Standardised network input for a list of pairs.

        One tensor, or a ``(profile, ear)`` tuple for feature fusion.
        """
        if self.fusion_mode == "feature":
            profile, ear = _pair_tensors(list(pairs))
            return standardize(profile), standardize(ear)
        if self.fusion_mode == "none":
            return standardize(to_chw_batch([getattr(p, self.modality) for p in pairs]))
        return standardize(to_chw_batch([fuse(self.fusion_mode, p.profile, p.ear) for p in pairs]))

    def forward(self, x) -> HeadOutputs:
        if self.fusion_mode == "feature":
            return forward_feature_fusion(self.streams["profile"], self.streams["ear"], self.head, x)
        return self.head(self.streams["main"](x))

    def embedding_dims(self) -> dict[str, int]:
        return {t: self.head.embedding_dim for t in self.tasks}


def forward_multitask(model: AgeGenderNet, inputs, tasks: Optional[Sequence[str]] = None) -> HeadOutputs:
    """Forward pass; ``tasks`` (if given) must all have heads in ``model``."""
    if tasks is not None:
        missing = [t for t in tasks if t not in model.tasks]
        if missing:
            raise ConfigError(f"requested task(s) {missing} but the model only has heads for {model.tasks}")
    if isinstance(inputs, (list, tuple)) and inputs and isinstance(inputs[0], ModalPair):
        inputs = model.prepare_inputs(inputs)
    elif isinstance(inputs, ModalPair):
        inputs = model.prepare_inputs([inputs])
    return model(inputs)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
