"""V-Net backbone with per-layer skip-connection switches.

Decoder layers are indexed 1..4 from the deepest (lowest resolution) to the
shallowest. Decoder layer ``j`` upsamples the previous decoder output and, when
its skip is enabled, concatenates encoder output ``a[5 - j]`` before the
convolution block. A disabled skip drops the concatenation entirely, so the
block sees half the input channels and never reads the corresponding encoder
feature.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Literal, Sequence

import torch
import torch.nn.functional as F
from torch import nn

NUM_LEVELS = 5
ENCODER_CONVS = (1, 2, 3, 3, 3)
DECODER_CONVS = (3, 3, 2, 1)

Role = Literal["main", "aux1", "aux2"]
NormType = Literal["batchnorm", "groupnorm", "instancenorm", "none"]


class ConfigurationError(ValueError):
    """Invalid model or training configuration."""


class ShapeError(ValueError):
    """Input or feature shapes incompatible with the network."""


@dataclass(frozen=True)
class SkipConfig:
    use_skip: tuple[bool, bool, bool, bool] = (True, True, True, True)

    def __post_init__(self):
        if len(self.use_skip) != 4:
            raise ConfigurationError(
                f"use_skip needs exactly 4 entries, got {len(self.use_skip)}")
        object.__setattr__(self, "use_skip", tuple(bool(s) for s in self.use_skip))

    @classmethod
    def for_role(cls, role: Role) -> "SkipConfig":
        try:
            return cls(ROLE_SKIPS[role])
        except KeyError:
            raise ConfigurationError(f"unknown model role {role!r}") from None

    def encoder_sources(self) -> tuple[int, ...]:
        """Encoder output indices (1-based) consumed by the decoder, bottleneck included."""
        skips = [5 - j for j in range(1, 5) if self.use_skip[j - 1]]
        return tuple(sorted(skips)) + (5,)


ROLE_SKIPS = {
    "main": (True, True, True, True),
    # aux1 drops skips at decoder layers 2 and 4, aux2 at layers 1 and 3
    "aux1": (True, False, True, False),
    "aux2": (False, True, False, True),
}


def check_complementary(a: SkipConfig, b: SkipConfig) -> None:
    """Raise unless the disabled-skip layers of ``a`` and ``b`` partition {1, 2, 3, 4}."""
    off_a = {j for j in range(1, 5) if not a.use_skip[j - 1]}
    off_b = {j for j in range(1, 5) if not b.use_skip[j - 1]}
    if off_a & off_b or off_a | off_b != {1, 2, 3, 4}:
        raise ConfigurationError(
            f"skip configs are not complementary: {a.use_skip} vs {b.use_skip}")


@dataclass(frozen=True)
class ModelSpec:
    role: Role = "main"
    skip_config: SkipConfig | None = None
    base_channels: int = 16
    num_levels: int = NUM_LEVELS
    out_classes: int = 2
    in_channels: int = 1
    shared_encoder: bool = False
    norm: NormType = "batchnorm"
    encoder_convs: tuple[int, ...] = ENCODER_CONVS
    decoder_convs: tuple[int, ...] = DECODER_CONVS

    def __post_init__(self):
        if self.skip_config is None:
            object.__setattr__(self, "skip_config", SkipConfig.for_role(self.role))
        elif not isinstance(self.skip_config, SkipConfig):
            object.__setattr__(self, "skip_config", SkipConfig(tuple(self.skip_config)))
        if self.role not in ROLE_SKIPS:
            raise ConfigurationError(f"unknown model role {self.role!r}")
        if self.num_levels != NUM_LEVELS:
            raise ConfigurationError(
                f"num_levels must be {NUM_LEVELS} (4 downsamplings), got {self.num_levels}")
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be positive")
        if self.out_classes < 2:
            raise ConfigurationError("out_classes must be at least 2")
        if self.norm not in ("batchnorm", "groupnorm", "instancenorm", "none"):
            raise ConfigurationError(f"unknown normalization {self.norm!r}")
        object.__setattr__(self, "encoder_convs", tuple(int(n) for n in self.encoder_convs))
        object.__setattr__(self, "decoder_convs", tuple(int(n) for n in self.decoder_convs))
        if len(self.encoder_convs) != NUM_LEVELS or len(self.decoder_convs) != NUM_LEVELS - 1:
            raise ConfigurationError("encoder_convs needs 5 entries and decoder_convs 4")
        if min(self.encoder_convs + self.decoder_convs) < 1:
            raise ConfigurationError("every block needs at least one convolution")

    @property
    def divisor(self) -> int:
        return 2 ** (self.num_levels - 1)

    def channels(self, level: int) -> int:
        """Channel count of encoder output ``a[level]`` (1-based)."""
        return self.base_channels * 2 ** (level - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skip_config"] = list(self.skip_config.use_skip)
        d["encoder_convs"] = list(self.encoder_convs)
        d["decoder_convs"] = list(self.decoder_convs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if d.get("skip_config") is not None:
            d["skip_config"] = SkipConfig(tuple(d["skip_config"]))
        for key in ("encoder_convs", "decoder_convs"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def check_patch_shape(shape: Sequence[int], divisor: int = 16) -> None:
    bad = [s for s in shape if s % divisor or s < divisor]
    if bad:
        raise ShapeError(
            f"spatial dims {tuple(shape)} must be positive multiples of {divisor}")


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "batchnorm":
        return nn.BatchNorm3d(channels)
    if kind == "groupnorm":
        groups = min(16, channels)
        while channels % groups:
            groups -= 1
        return nn.GroupNorm(groups, channels)
    if kind == "instancenorm":
        return nn.InstanceNorm3d(channels, affine=True)
    return nn.Identity()


class ResidualBlock(nn.Module):
    """``n_convs`` 3x3x3 conv/norm/ReLU stages with an additive shortcut."""

    def __init__(self, n_convs: int, in_ch: int, out_ch: int, norm: str):
        super().__init__()
        layers = []
        for i in range(n_convs):
            layers.append(nn.Conv3d(in_ch if i == 0 else out_ch, out_ch, 3, padding=1))
            layers.append(_norm(norm, out_ch))
            if i != n_convs - 1:
                layers.append(nn.ReLU(inplace=True))
        self.convs = nn.Sequential(*layers)
        self.shortcut = nn.Identity() if in_ch == out_ch else nn.Conv3d(in_ch, out_ch, 1)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.convs(x) + self.shortcut(x))


class _Resample(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, norm: str, up: bool):
        conv = nn.ConvTranspose3d if up else nn.Conv3d
        super().__init__(conv(in_ch, out_ch, 2, stride=2), _norm(norm, out_ch), nn.ReLU(inplace=True))


class Encoder(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for level in range(1, NUM_LEVELS + 1):
            ch = spec.channels(level)
            in_ch = spec.in_channels if level == 1 else ch
            self.blocks.append(ResidualBlock(spec.encoder_convs[level - 1], in_ch, ch, spec.norm))
            if level < NUM_LEVELS:
                self.downs.append(_Resample(ch, spec.channels(level + 1), spec.norm, up=False))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for level, block in enumerate(self.blocks):
            x = block(x if level == 0 else self.downs[level - 1](feats[-1]))
            feats.append(x)
        return feats


class Decoder(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.use_skip = spec.skip_config.use_skip
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for j in range(1, 5):
            level = NUM_LEVELS - j
            ch = spec.channels(level)
            self.ups.append(_Resample(spec.channels(level + 1), ch, spec.norm, up=True))
            in_ch = 2 * ch if self.use_skip[j - 1] else ch
            self.blocks.append(ResidualBlock(spec.decoder_convs[j - 1], in_ch, ch, spec.norm))
        self.head = nn.Conv3d(spec.channels(1), spec.out_classes, 1)

    def forward(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(feats) != NUM_LEVELS:
            raise ShapeError(f"expected {NUM_LEVELS} encoder features, got {len(feats)}")
        x = feats[NUM_LEVELS - 1]
        for j in range(1, 5):
            x = self.ups[j - 1](x)
            if self.use_skip[j - 1]:
                skip = feats[NUM_LEVELS - j - 1]
                if skip.shape[2:] != x.shape[2:] or skip.shape[0] != x.shape[0]:
                    raise ShapeError(
                        f"decoder layer {j}: skip {tuple(skip.shape)} vs upsampled {tuple(x.shape)}")
                x = torch.cat([x, skip], dim=1)
            x = self.blocks[j - 1](x)
        return self.head(x)


class VNet(nn.Module):
    """One CC-Net branch. ``forward`` returns softmax class probabilities."""

    def __init__(self, spec: ModelSpec, encoder: Encoder | None = None):
        super().__init__()
        self.spec = spec
        self.encoder = encoder if encoder is not None else Encoder(spec)
        self.decoder = Decoder(spec)

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() != 5:
            raise ShapeError(f"expected (batch, channel, H, W, D) input, got {tuple(x.shape)}")
        check_patch_shape(x.shape[2:], self.spec.divisor)
        return self.encoder(x)

    def logits(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.decoder(feats)

    def decode(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        return torch.softmax(self.decoder(feats), dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


def build_model(spec: ModelSpec, encoder: Encoder | None = None) -> VNet:
    return VNet(spec, encoder=encoder)


class CCNet(nn.Module):
    """Main V-Net plus the two complementary auxiliary models."""

    roles = ("main", "aux1", "aux2")

    def __init__(self, base_channels: int = 16, shared_encoder: bool = False,
                 norm: NormType = "batchnorm", init_aux_from_main: bool = False,
                 encoder_convs: Sequence[int] = ENCODER_CONVS,
                 decoder_convs: Sequence[int] = DECODER_CONVS, in_channels: int = 1,
                 out_classes: int = 2):
        super().__init__()
        specs = {
            role: ModelSpec(role=role, base_channels=base_channels, shared_encoder=shared_encoder,
                            norm=norm, encoder_convs=tuple(encoder_convs),
                            decoder_convs=tuple(decoder_convs), in_channels=in_channels,
                            out_classes=out_classes)
            for role in self.roles
        }
        check_complementary(specs["aux1"].skip_config, specs["aux2"].skip_config)
        self.main = build_model(specs["main"])
        shared = self.main.encoder if shared_encoder else None
        self.aux1 = build_model(specs["aux1"], encoder=shared)
        self.aux2 = build_model(specs["aux2"], encoder=shared)
        if init_aux_from_main:
            copy_matching_parameters(self.main, self.aux1)
            copy_matching_parameters(self.main, self.aux2)

    @property
    def shared_encoder(self) -> bool:
        return self.main.spec.shared_encoder

    def models(self) -> dict[str, VNet]:
        return {"main": self.main, "aux1": self.aux1, "aux2": self.aux2}

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.main(x), self.aux1(x), self.aux2(x)


def copy_matching_parameters(src: nn.Module, dst: nn.Module) -> int:
    """Copy every tensor whose name and shape match; returns the number copied."""
    src_state = src.state_dict()
    copied = 0
    with torch.no_grad():
        for name, tensor in dst.state_dict().items():
            other = src_state.get(name)
            if other is not None and other.shape == tensor.shape:
                tensor.copy_(other)
                copied += 1
    return copied


def unique_parameters(modules: Iterable[nn.Module]) -> list[nn.Parameter]:
    seen: set[int] = set()
    params = []
    for module in modules:
        for p in module.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                params.append(p)
    return params


def param_count(*modules: nn.Module, trainable_only: bool = True) -> int:
    """Exact number of distinct parameters across ``modules`` (shared tensors counted once)."""
    return sum(p.numel() for p in unique_parameters(modules)
               if p.requires_grad or not trainable_only)


def encode(model: VNet, patch: torch.Tensor) -> list[torch.Tensor]:
    return model.encode(_as_batch(patch))


def decode(model: VNet, feats: Sequence[torch.Tensor]) -> torch.Tensor:
    return model.decode(feats)


def forward(model: VNet, patch: torch.Tensor) -> torch.Tensor:
    return model(_as_batch(patch))


def _as_batch(x) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.dim() == 3:
        x = x[None, None]
    elif x.dim() == 4:
        x = x[None]
    return x.float() if not x.is_floating_point() else x
