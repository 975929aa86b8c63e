"""Cross-scale fusion along a stacked scale axis, and the three-branch level fusion."""
from __future__ import annotations

from typing import Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .layers import Conv

LEVELS = (2, 3, 4, 5)


def stack_scales(aligned: Mapping[int, torch.Tensor]) -> torch.Tensor:
    """Resample channel-aligned taps to the level-2 size and stack them.

    Returns ``[N, C, S, H2, W2]`` with the scale axis in ascending level order.
    """
    missing = [k for k in LEVELS if k not in aligned]
    if missing:
        raise ValueError(f"taps are missing levels {missing}")
    size = aligned[2].shape[-2:]
    for k in LEVELS[1:]:
        expect = (size[0] >> (k - 2), size[1] >> (k - 2))
        if tuple(aligned[k].shape[-2:]) != expect:
            raise ValueError(f"tap {k} has size {tuple(aligned[k].shape[-2:])}, expected {expect}")
    maps = [aligned[2]] + [F.interpolate(aligned[k], size=size, mode="nearest") for k in LEVELS[1:]]
    return torch.stack(maps, dim=2)


class ScaleSequence(nn.Module):
    """1x1 channel alignment of each backbone tap followed by :func:`stack_scales`."""

    def __init__(self, tap_channels: Mapping[int, int], channels: int):
        super().__init__()
        self.channels = channels
        self.align = nn.ModuleDict({str(k): nn.Conv2d(tap_channels[k], channels, 1) for k in LEVELS})

    def forward(self, taps: Mapping[int, torch.Tensor]) -> torch.Tensor:
        missing = [k for k in LEVELS if k not in taps]
        if missing:
            raise ValueError(f"taps are missing levels {missing}")
        return stack_scales({k: self.align[str(k)](taps[k]) for k in LEVELS})


class CSF(nn.Module):
    """3D conv -> BatchNorm3d -> SiLU -> max pool over the whole scale axis.

    The collapsed map is squeezed back to ``[N, C, H, W]`` and, when a target
    size is given, resized with nearest-neighbor interpolation.
    """

    def __init__(self, channels: int, scales: int = len(LEVELS)):
        super().__init__()
        self.scales = scales
        self.conv = nn.Conv3d(channels, channels, 3, 1, 1, bias=False)
        self.bn = nn.BatchNorm3d(channels)
        self.act = nn.SiLU()
        self.pool = nn.MaxPool3d((scales, 1, 1))

    def forward(self, cs: torch.Tensor, size: tuple[int, int] | None = None) -> torch.Tensor:
        if cs.dim() != 5 or cs.shape[2] != self.scales:
            raise ValueError(f"expected [N, C, {self.scales}, H, W], got {tuple(cs.shape)}")
        y = self.pool(self.act(self.bn(self.conv(cs)))).squeeze(2)
        if size is not None and tuple(y.shape[-2:]) != tuple(size):
            y = F.interpolate(y, size=size, mode="nearest")
        return y


class PooledDown(nn.Module):
    """Conv, then parallel stride-2 max and average pooling, concatenated and fused by a 1x1 conv."""

    def __init__(self, c1: int, c2: int):
        super().__init__()
        self.pre = Conv(c1, c1, 3)
        self.fuse = Conv(2 * c1, c2, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.pre(x)
        return self.fuse(torch.cat((F.max_pool2d(y, 2, 2), F.avg_pool2d(y, 2, 2)), 1))


class TFF(nn.Module):
    """Three-branch fusion at one level.

    Level 2 has no previous-level branch; level 5 has no position branch.
    ``use_pig=False`` drops the position branch at every level.
    """

    def __init__(self, level: int, c_prev: int | None, c_neck: int, c_pig: int | None, use_pig: bool = True):
        super().__init__()
        self.level = level
        self.has_prev = level > 2
        self.has_pig = use_pig and level < 5
        if self.has_prev and c_prev is None:
            raise ValueError(f"level {level} needs the previous-level width")
        self.prev = PooledDown(c_prev, c_prev) if self.has_prev else None
        self.neck = Conv(c_neck, c_neck, 3)
        self.pig = Conv(c_pig if c_pig is not None else c_neck, c_neck, 3) if self.has_pig else None
        self.out_channels = (c_prev if self.has_prev else 0) + c_neck + (c_neck if self.has_pig else 0)

    def forward(self, n: torch.Tensor, p_prev: torch.Tensor | None = None, pig: torch.Tensor | None = None) -> torch.Tensor:
        if self.has_prev != (p_prev is not None):
            raise ValueError(f"level {self.level}: previous-level branch {'required' if self.has_prev else 'not allowed'}")
        if self.has_pig != (pig is not None):
            raise ValueError(f"level {self.level}: position branch {'required' if self.has_pig else 'not allowed'}")
        parts = []
        if self.has_prev:
            parts.append(self.prev(p_prev))
        parts.append(self.neck(n))
        if self.has_pig:
            parts.append(self.pig(pig))
        shapes = {tuple(t.shape[-2:]) for t in parts}
        if len(shapes) != 1:
            raise ValueError(f"level {self.level}: branch sizes disagree {shapes}")
        return torch.cat(parts, 1)
