"""Four-direction selective scan over a (time, frequency, channel) map.

Rows are time patches and columns are frequency patches, so a left-to-right
scan walks along frequency inside one time row.
"""
from __future__ import annotations

import enum
import math

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .ssm import kernels
from .ssm.torch_scan import selective_scan


class ScanDirection(enum.IntEnum):
    LeftToRight = 0
    RightToLeft = 1
    TopToBottom = 2
    BottomToTop = 3


DIRECTIONS = tuple(ScanDirection)


def check_feature_map(fmap) -> np.ndarray:
    fmap = np.asarray(fmap)
    if fmap.ndim != 3 or min(fmap.shape) < 1:
        raise ValueError(f"feature map must be (H, W, C) with positive sizes, got {fmap.shape}")
    if not np.all(np.isfinite(fmap)):
        raise ValueError("feature map has non-finite entries")
    return fmap


def directional_unfold(fmap, direction: ScanDirection) -> np.ndarray:
    """Flatten ``(H, W, C)`` into an ``(H*W, C)`` sequence in scan order."""
    fmap = check_feature_map(fmap)
    H, W, C = fmap.shape
    direction = ScanDirection(direction)
    if direction in (ScanDirection.LeftToRight, ScanDirection.RightToLeft):
        seq = fmap.reshape(H * W, C)
    else:
        seq = fmap.transpose(1, 0, 2).reshape(H * W, C)
    if direction in (ScanDirection.RightToLeft, ScanDirection.BottomToTop):
        seq = seq[::-1]
    return seq


def directional_refold(seq, direction: ScanDirection, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`directional_unfold`."""
    seq = np.asarray(seq)
    if seq.ndim != 2 or seq.shape[0] != height * width:
        raise ValueError(f"sequence shape {seq.shape} does not fit a {height}x{width} map")
    direction = ScanDirection(direction)
    if direction in (ScanDirection.RightToLeft, ScanDirection.BottomToTop):
        seq = seq[::-1]
    if direction in (ScanDirection.LeftToRight, ScanDirection.RightToLeft):
        return seq.reshape(height, width, -1)
    return seq.reshape(width, height, -1).transpose(1, 0, 2)


def _softplus(v):
    return np.logaddexp(0.0, v)


def direction_scan(seq, x_proj, dt_proj, dt_bias, a_log, skip, dt_rank: int):
    """Selective scan of one unfolded sequence with input-dependent projections.

    ``x_proj (R+2N, C)`` maps each step to ``(dt_low, B_t, C_t)``;
    ``delta_t = softplus(dt_proj @ dt_low + dt_bias)``.
    """
    seq = np.asarray(seq, dtype=np.float64)
    n = np.asarray(a_log).shape[-1]
    proj = seq @ np.asarray(x_proj, dtype=np.float64).T
    dt_low, b, c = proj[:, :dt_rank], proj[:, dt_rank:dt_rank + n], proj[:, dt_rank + n:]
    delta = _softplus(dt_low @ np.asarray(dt_proj, dtype=np.float64).T + dt_bias)
    y = kernels.selective_scan(seq, a_log, delta, b, c)
    return y + seq * np.asarray(skip, dtype=np.float64)


def ss2d_apply(fmap, params: dict) -> np.ndarray:
    """Numpy SS2D: unfold, scan and refold per direction, then sum.

    ``params`` holds arrays with a leading direction axis of length 4 (or 1
    when tied): ``x_proj, dt_proj, dt_bias, a_log, skip``.
    """
    fmap = check_feature_map(fmap).astype(np.float64)
    H, W, C = fmap.shape
    n_sets = np.asarray(params["a_log"]).shape[0]
    if np.asarray(params["a_log"]).shape[1] != C:
        raise ValueError(f"parameters are for {np.asarray(params['a_log']).shape[1]} channels, map has {C}")
    dt_rank = np.asarray(params["dt_proj"]).shape[-1]
    out = np.zeros_like(fmap)
    for k, direction in enumerate(DIRECTIONS):
        j = k if n_sets == len(DIRECTIONS) else 0
        seq = directional_unfold(fmap, direction)
        y = direction_scan(seq, params["x_proj"][j], params["dt_proj"][j],
                           params["dt_bias"][j], params["a_log"][j], params["skip"][j], dt_rank)
        out = out + directional_refold(y, direction, H, W)
    return out


def _unfold_all(x: torch.Tensor) -> torch.Tensor:
    # (B, H, W, C) -> (B, 4, H*W, C)
    B, H, W, C = x.shape
    row = x.reshape(B, H * W, C)
    col = x.transpose(1, 2).reshape(B, H * W, C)
    return torch.stack([row, row.flip(1), col, col.flip(1)], dim=1)


def _refold_sum(ys: torch.Tensor, H: int, W: int) -> torch.Tensor:
    B, _, L, C = ys.shape
    row = ys[:, 0] + ys[:, 1].flip(1)
    col = ys[:, 2] + ys[:, 3].flip(1)
    return row.reshape(B, H, W, C) + col.reshape(B, W, H, C).transpose(1, 2)


class SS2D(nn.Module):
    """Torch SS2D core (no input/output projections).

    Parameters use the same layout as :func:`ss2d_apply`, so the numpy
    reference can be fed ``module.numpy_params()``.
    """

    def __init__(self, channels: int, state_size: int = 16, dt_rank: int | None = None,
                 tie_directions: bool = False, dt_min: float = 1e-3, dt_max: float = 0.1):
        super().__init__()
        self.channels = channels
        self.state_size = state_size
        self.dt_rank = dt_rank or math.ceil(channels / 16)
        self.tie_directions = tie_directions
        k = 1 if tie_directions else len(DIRECTIONS)
        R, N, C = self.dt_rank, state_size, channels

        bound = C ** -0.5
        self.x_proj = nn.Parameter(torch.empty(k, R + 2 * N, C).uniform_(-bound, bound))
        self.dt_proj = nn.Parameter(torch.empty(k, C, R).uniform_(-R ** -0.5, R ** -0.5))
        dt = torch.exp(torch.rand(k, C) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        self.dt_bias = nn.Parameter(dt + torch.log(-torch.expm1(-dt)))  # inverse softplus
        a_log = torch.log(torch.arange(1, N + 1, dtype=torch.float32))
        self.a_log = nn.Parameter(a_log.expand(k, C, N).clone())
        self.skip = nn.Parameter(torch.ones(k, C))

    def _expand(self, p: torch.Tensor) -> torch.Tensor:
        return p.expand(len(DIRECTIONS), *p.shape[1:]) if self.tie_directions else p

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        if C != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {C}")
        R, N = self.dt_rank, self.state_size
        xs = _unfold_all(x)
        proj = torch.einsum("bkld,kcd->bklc", xs, self._expand(self.x_proj))
        dt_low, b, c = proj.split([R, N, N], dim=-1)
        dt = torch.einsum("bklr,kdr->bkld", dt_low, self._expand(self.dt_proj))
        delta = F.softplus(dt + self._expand(self.dt_bias)[None, :, None])
        ys = selective_scan(xs.contiguous(), delta, self._expand(self.a_log).contiguous(),
                            b.contiguous(), c.contiguous())
        ys = ys + xs * self._expand(self.skip)[None, :, None]
        return _refold_sum(ys, H, W)

    def numpy_params(self) -> dict:
        return {name: getattr(self, name).detach().double().numpy()
                for name in ("x_proj", "dt_proj", "dt_bias", "a_log", "skip")}
