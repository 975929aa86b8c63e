"""Adaptive per-pixel weight fusion of adjacent pyramid levels."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .layers import Conv

LEVELS = (2, 3, 4, 5)
_LOGIT_CLAMP = 30.0  # keeps exp() finite in float32


@dataclass
class FusionWeights:
    level: int
    source: int
    omega: torch.Tensor  # [N, 1, H, W]
    logits: torch.Tensor  # [N, 1, H, W]


def contributors(level: int, levels: Sequence[int] = LEVELS) -> list[int]:
    return [k for k in (level - 1, level, level + 1) if k in levels]


def normalize_weights(scores: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Divide non-negative per-pixel scores by their sum across contributors."""
    if len(scores) < 2:
        raise ValueError("fusion needs at least two contributors")
    stacked = torch.stack(list(scores), 0)
    total = stacked.sum(0, keepdim=True).clamp_min(torch.finfo(stacked.dtype).tiny)
    return list((stacked / total).unbind(0))


def combine(maps: Sequence[torch.Tensor], weights: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum of ``weight * map`` with ``[N,1,H,W]`` weights broadcast over channels."""
    if len(maps) != len(weights):
        raise ValueError("one weight map per contributor")
    return sum(w * m for w, m in zip(weights, maps))


class WeightHead(nn.Module):
    """Per-contributor score: ``|a * exp(lambda) + b| + eps`` with ``lambda = Conv1x1(x)``."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.logit = nn.Conv2d(channels, 1, 1)
        self.scale = nn.Conv2d(1, 1, 1)
        nn.init.ones_(self.scale.weight)
        nn.init.zeros_(self.scale.bias)
        self.eps = eps

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        lam = self.logit(x).clamp(-_LOGIT_CLAMP, _LOGIT_CLAMP)
        return self.scale(torch.exp(lam)).abs() + self.eps, lam


def fusion_weights(level: int, neighbors: Mapping[int, torch.Tensor], heads: Mapping[int, WeightHead]) -> list[FusionWeights]:
    """Normalized fusion weights for the contributors already resampled to ``level``."""
    if len(neighbors) < 2:
        raise ValueError("fusion needs at least two contributors")
    sources = sorted(neighbors)
    shapes = {tuple(neighbors[k].shape[-2:]) for k in sources}
    if len(shapes) != 1:
        raise ValueError(f"contributors must share a spatial size, got {shapes}")
    scores, logits = zip(*(heads[k](neighbors[k]) for k in sources))
    omegas = normalize_weights(scores)
    return [FusionWeights(level, k, w, lam) for k, w, lam in zip(sources, omegas, logits)]


class AWF(nn.Module):
    """Adaptive weight fusion over a P2-P5 pyramid.

    Each output level is a per-pixel convex combination of itself and its
    adjacent levels. Neighbors are channel-aligned with a 1x1 conv, then
    brought to the target size by nearest upsampling (coarser level) or
    stride-2 max pooling (finer level).
    """

    def __init__(self, channels: Mapping[int, int]):
        super().__init__()
        self.channels = dict(channels)
        self.align = nn.ModuleDict()
        self.heads = nn.ModuleDict()
        for k in LEVELS:
            for j in contributors(k):
                key = f"{j}to{k}"
                if j != k:
                    self.align[key] = Conv(self.channels[j], self.channels[k], 1)
                self.heads[key] = WeightHead(self.channels[k])

    def resample(self, pyramid: Mapping[int, torch.Tensor], source: int, level: int) -> torch.Tensor:
        x = pyramid[source]
        if source == level:
            return x
        x = self.align[f"{source}to{level}"](x)
        if source > level:
            return F.interpolate(x, size=pyramid[level].shape[-2:], mode="nearest")
        return F.max_pool2d(x, 2, 2)

    def level_weights(self, pyramid: Mapping[int, torch.Tensor], level: int) -> tuple[dict[int, torch.Tensor], list[FusionWeights]]:
        neighbors = {j: self.resample(pyramid, j, level) for j in contributors(level)}
        heads = {j: self.heads[f"{j}to{level}"] for j in neighbors}
        return neighbors, fusion_weights(level, neighbors, heads)

    def forward(self, pyramid: Mapping[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        missing = [k for k in LEVELS if k not in pyramid]
        if missing:
            raise ValueError(f"pyramid is missing levels {missing}")
        for k in LEVELS[1:]:
            prev, cur = pyramid[k - 1].shape[-2:], pyramid[k].shape[-2:]
            if (prev[0], prev[1]) != (2 * cur[0], 2 * cur[1]):
                raise ValueError(f"level {k} size {tuple(cur)} is not half of level {k - 1} size {tuple(prev)}")
        out = {}
        for k in LEVELS:
            neighbors, weights = self.level_weights(pyramid, k)
            out[k] = combine([neighbors[w.source] for w in weights], [w.omega for w in weights])
        return out
