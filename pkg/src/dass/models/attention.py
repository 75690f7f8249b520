"""Attention spectrogram classifier with sinusoidal positions (quadratic-cost baseline)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


class CapacityExceeded(RuntimeError):
    """Raised when an input would not fit the configured resource budget."""


@dataclass(frozen=True)
class AttnConfig:
    patch: int = 16
    stride: int = 10
    depth: int = 12
    heads: int = 12
    width: int = 768
    num_classes: int = 527
    pooling: str = "mean"
    mlp_ratio: float = 4.0
    max_attention_bytes: int = 2 * 1024 ** 3
    in_chans: int = 1

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.width % 2:
            raise ValueError("width must be even for sinusoidal embeddings")
        if self.pooling not in ("mean", "cls"):
            raise ValueError("pooling must be 'mean' or 'cls'")
        if self.stride < 1 or self.patch < 1:
            raise ValueError("patch and stride must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttnConfig":
        return cls(**d)

    def replace(self, **changes) -> "AttnConfig":
        return replace(self, **changes)


ATTN_PRESETS = {
    "base": AttnConfig(),
    "tiny": AttnConfig(patch=4, stride=4, depth=2, heads=2, width=32, num_classes=8),
}


def attn_preset(name: str, **overrides) -> AttnConfig:
    try:
        cfg = ATTN_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(ATTN_PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg


def sinusoidal_pe(position, width: int) -> np.ndarray:
    """Interleaved embedding: ``[sin(p w_0), cos(p w_0), sin(p w_1), ...]``."""
    if width % 2:
        raise ValueError("width must be even")
    pos = np.asarray(position, dtype=np.float64)
    freqs = np.exp(-math.log(10000.0) * np.arange(0, width, 2) / width)
    angles = pos[..., None] * freqs
    out = np.empty(pos.shape + (width,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def sinusoidal_table(length: int, width: int, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(sinusoidal_pe(np.arange(length), width), dtype=dtype)


def num_patches(frames: int, mels: int, cfg: AttnConfig) -> tuple[int, int]:
    def count(n):
        n = max(n, cfg.patch)
        return 1 + (n - cfg.patch) // cfg.stride
    return count(frames), count(mels)


def attention_flops(tokens: int, cfg: AttnConfig) -> int:
    """Multiply-adds x2 of the score and value products across all layers."""
    return cfg.depth * 4 * tokens * tokens * cfg.width


def model_flops(tokens: int, cfg: AttnConfig) -> dict:
    linear = cfg.depth * 2 * tokens * cfg.width * cfg.width * (4 + 2 * cfg.mlp_ratio)
    attn = attention_flops(tokens, cfg)
    return {"attention": attn, "linear": int(linear), "total": int(attn + linear)}


class EncoderLayer(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        hidden = int(round(width * mlp_ratio))
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        q, k, _ = self._qkv(self.norm1(x))
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)

    def _qkv(self, x):
        B, L, C = x.shape
        qkv = self.qkv(x).reshape(B, L, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        return qkv[0], qkv[1], qkv[2]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, L, C = x.shape
        q, k, v = self._qkv(self.norm1(x))
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
        x = x + self.proj((att @ v).transpose(1, 2).reshape(B, L, C))
        return x + self.mlp(self.norm2(x))


class AttentionClassifier(nn.Module):
    """Patchify, add sinusoidal positions, encode, pool over tokens, classify."""

    def __init__(self, config: AttnConfig):
        super().__init__()
        self.config = config
        self.patch = nn.Conv2d(config.in_chans, config.width, config.patch, stride=config.stride)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.width)) if config.pooling == "cls" else None
        self.layers = nn.ModuleList(
            EncoderLayer(config.width, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.norm = nn.LayerNorm(config.width)
        self.head = nn.Linear(config.width, config.num_classes)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    def tokens(self, spec: torch.Tensor) -> torch.Tensor:
        if spec.dim() == 3:
            spec = spec.unsqueeze(1)
        p = self.config.patch
        pad_t, pad_f = max(0, p - spec.shape[-2]), max(0, p - spec.shape[-1])
        if pad_t or pad_f:
            spec = F.pad(spec, (0, pad_f, 0, pad_t))
        x = self.patch(spec).flatten(2).transpose(1, 2)       # (B, L, C), time-major order
        x = x + sinusoidal_table(x.shape[1], self.config.width, x.dtype)
        if self.cls_token is not None:
            x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        return x

    def check_capacity(self, batch: int, tokens: int, dtype=torch.float32) -> None:
        itemsize = torch.finfo(dtype).bits // 8
        need = batch * self.config.heads * tokens * tokens * itemsize
        if need > self.config.max_attention_bytes:
            raise CapacityExceeded(
                f"attention over {tokens} tokens needs {need} bytes per layer "
                f"(limit {self.config.max_attention_bytes})")

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        x = self.tokens(spec)
        self.check_capacity(x.shape[0], x.shape[1], x.dtype)
        try:
            for layer in self.layers:
                x = layer(x)
        except (RuntimeError, MemoryError) as err:
            if isinstance(err, MemoryError) or "memory" in str(err).lower():
                raise CapacityExceeded(str(err)) from err
            raise
        x = self.norm(x)
        pooled = x[:, 0] if self.cls_token is not None else x.mean(dim=1)
        return self.head(pooled)
