"""Hierarchical state-space classifier over spectrograms."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, replace

import torch
from torch import nn
import torch.nn.functional as F

from ..ss2d import SS2D


class Pooling(str, enum.Enum):
    First = "first"
    Mid = "mid"
    Last = "last"
    Mean = "mean"
    Sum = "sum"


@dataclass(frozen=True)
class ModelConfig:
    group_depths: tuple = (2, 2, 8, 2)
    channel_dims: tuple = (96, 192, 384, 768)
    state_size: int = 16
    num_classes: int = 527
    pooling: str = "mean"
    patch_size: int = 4
    ffn_ratio: float = 4.0
    expand: int = 2
    dt_rank: int | None = None
    drop_path: float = 0.1
    tie_directions: bool = False
    in_chans: int = 1

    def __post_init__(self):
        if len(self.group_depths) != 4 or len(self.channel_dims) != 4:
            raise ValueError("group_depths and channel_dims need four entries")
        if any(d < 0 for d in self.group_depths) or any(c < 1 for c in self.channel_dims):
            raise ValueError("depths must be >= 0 and channel dims >= 1")
        if self.state_size < 1 or self.num_classes < 1 or self.patch_size < 1:
            raise ValueError("state_size, num_classes and patch_size must be positive")
        Pooling(self.pooling)
        object.__setattr__(self, "group_depths", tuple(int(d) for d in self.group_depths))
        object.__setattr__(self, "channel_dims", tuple(int(c) for c in self.channel_dims))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["group_depths"] = list(self.group_depths)
        d["channel_dims"] = list(self.channel_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


PRESETS = {
    # ffn_ratio 2.75 puts both presets inside 10% of the published sizes (32.4M / 45.5M)
    "small": ModelConfig(group_depths=(2, 2, 8, 2), ffn_ratio=2.75),
    "medium": ModelConfig(group_depths=(2, 2, 15, 2), ffn_ratio=2.75),
    "tiny": ModelConfig(group_depths=(1, 1, 1, 1), channel_dims=(8, 16, 32, 64), state_size=4,
                        num_classes=8, drop_path=0.0),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = x.new_empty((x.shape[0],) + (1,) * (x.dim() - 1)).bernoulli_(1.0 - self.p)
        return x * keep / (1.0 - self.p)


class PatchEmbed(nn.Module):
    """Non-overlapping ``p x p`` patches projected to ``C1`` channels.

    Inputs whose time/frequency sizes are not multiples of ``p`` are
    zero-padded at the end; the pad amounts of the last call are kept in
    ``last_padding``.
    """

    def __init__(self, patch_size: int, channels: int, in_chans: int = 1):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_chans, channels, kernel_size=patch_size, stride=patch_size)
        self.last_padding = (0, 0)

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        if spec.dim() == 3:
            spec = spec.unsqueeze(1)
        if spec.shape[-2] == 0 or spec.shape[-1] == 0:
            raise ValueError("empty spectrogram")
        p = self.patch_size
        pad_t = (-spec.shape[-2]) % p
        pad_f = (-spec.shape[-1]) % p
        self.last_padding = (pad_t, pad_f)
        if pad_t or pad_f:
            spec = F.pad(spec, (0, pad_f, 0, pad_t))
        return self.proj(spec).permute(0, 2, 3, 1)


class PatchMerge(nn.Module):
    """2x2 neighbourhood concat (4C) followed by LN and a projection to 2C."""

    def __init__(self, channels: int, out_channels: int | None = None):
        super().__init__()
        self.norm = nn.LayerNorm(4 * channels)
        self.reduction = nn.Linear(4 * channels, out_channels or 2 * channels, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        H, W = x.shape[1:3]
        if H % 2 or W % 2:
            x = F.pad(x, (0, 0, 0, W % 2, 0, H % 2))
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduction(self.norm(x))


class SSMBlock(nn.Module):
    """Residual SS2D branch followed by a residual feed-forward branch."""

    def __init__(self, channels: int, state_size: int = 16, expand: int = 2,
                 ffn_ratio: float = 4.0, dt_rank: int | None = None, drop_path: float = 0.0,
                 tie_directions: bool = False):
        super().__init__()
        inner = expand * channels
        self.norm1 = nn.LayerNorm(channels)
        self.in_proj = nn.Linear(channels, inner)
        self.dwconv = nn.Conv2d(inner, inner, kernel_size=3, padding=1, groups=inner)
        self.ss2d = SS2D(inner, state_size, dt_rank, tie_directions)
        self.out_norm = nn.LayerNorm(inner)
        self.out_proj = nn.Linear(inner, channels)
        self.norm2 = nn.LayerNorm(channels)
        hidden = int(round(ffn_ratio * channels))
        self.ffn = nn.Sequential(nn.Linear(channels, hidden), nn.GELU(), nn.Linear(hidden, channels))
        self.drop_path = DropPath(drop_path)

    def zero_init_outputs(self):
        for lin in (self.out_proj, self.ffn[2]):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def ssm_branch(self, x: torch.Tensor) -> torch.Tensor:
        z = self.in_proj(self.norm1(x))
        z = self.dwconv(z.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        z = self.ss2d(F.silu(z))
        return self.out_proj(self.out_norm(z))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop_path(self.ssm_branch(x))
        return x + self.drop_path(self.ffn(self.norm2(x)))


def pool(fmap: torch.Tensor, mode) -> torch.Tensor:
    """Reduce ``(B, H, W, C)`` to ``(B, C)``."""
    mode = Pooling(mode)
    H, W = fmap.shape[1:3]
    if mode is Pooling.Mean:
        return fmap.mean(dim=(1, 2))
    if mode is Pooling.Sum:
        return fmap.sum(dim=(1, 2))
    if mode is Pooling.First:
        return fmap[:, 0, 0]
    if mode is Pooling.Last:
        return fmap[:, H - 1, W - 1]
    return fmap[:, H // 2, W // 2]


class DASS(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dims = config.channel_dims
        total = sum(config.group_depths)
        rates = torch.linspace(0, config.drop_path, total).tolist() if total else []
        self.patch_embed = PatchEmbed(config.patch_size, dims[0], config.in_chans)
        self.merges = nn.ModuleList()
        self.groups = nn.ModuleList()
        k = 0
        for i, depth in enumerate(config.group_depths):
            if i > 0:
                self.merges.append(PatchMerge(dims[i - 1], dims[i]))
            blocks = []
            for _ in range(depth):
                blocks.append(SSMBlock(dims[i], config.state_size, config.expand, config.ffn_ratio,
                                       config.dt_rank, rates[k], config.tie_directions))
                k += 1
            self.groups.append(nn.Sequential(*blocks))
        self.norm = nn.LayerNorm(dims[-1])
        self.head = nn.Linear(dims[-1], config.num_classes)
        self.apply(_init_weights)

    def features(self, spec: torch.Tensor) -> torch.Tensor:
        x = self.groups[0](self.patch_embed(spec))
        for merge, group in zip(self.merges, self.groups[1:]):
            x = group(merge(x))
        return self.norm(x)

    def embed(self, spec: torch.Tensor) -> torch.Tensor:
        return pool(self.features(spec), self.config.pooling)

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(spec))


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
