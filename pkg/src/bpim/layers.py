"""Shared convolution blocks (CSP-style backbone pieces and the GSConv stand-in)."""
from __future__ import annotations

import math

import torch
from torch import nn


def autopad(k: int, p: int | None = None) -> int:
    return k // 2 if p is None else p


def group_count(channels: int, preferred: int = 16) -> int:
    """Largest group count <= ``preferred`` that divides ``channels``."""
    for g in range(min(preferred, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class Conv(nn.Module):
    """Conv2d -> BatchNorm2d -> SiLU."""

    def __init__(self, c1: int, c2: int, k: int = 1, s: int = 1, p: int | None = None, g: int = 1, act: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(c1, c2, k, s, autopad(k, p), groups=g, bias=False)
        self.bn = nn.BatchNorm2d(c2)
        self.act = nn.SiLU() if act else nn.Identity()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Bottleneck(nn.Module):
    def __init__(self, c1: int, c2: int, shortcut: bool = True, e: float = 0.5):
        super().__init__()
        c_ = int(c2 * e)
        self.cv1 = Conv(c1, c_, 1)
        self.cv2 = Conv(c_, c2, 3)
        self.add = shortcut and c1 == c2

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class C3(nn.Module):
    """CSP bottleneck with three convolutions."""

    def __init__(self, c1: int, c2: int, n: int = 1, shortcut: bool = True, e: float = 0.5):
        super().__init__()
        c_ = max(int(c2 * e), 1)
        self.cv1 = Conv(c1, c_, 1)
        self.cv2 = Conv(c1, c_, 1)
        self.cv3 = Conv(2 * c_, c2, 1)
        self.m = nn.Sequential(*(Bottleneck(c_, c_, shortcut, e=1.0) for _ in range(n)))

    def forward(self, x):
        return self.cv3(torch.cat((self.m(self.cv1(x)), self.cv2(x)), 1))


class SPPF(nn.Module):
    def __init__(self, c1: int, c2: int, k: int = 5):
        super().__init__()
        c_ = c1 // 2
        self.cv1 = Conv(c1, c_, 1)
        self.cv2 = Conv(c_ * 4, c2, 1)
        self.m = nn.MaxPool2d(k, 1, k // 2)

    def forward(self, x):
        x = self.cv1(x)
        y1 = self.m(x)
        y2 = self.m(y1)
        return self.cv2(torch.cat((x, y1, y2, self.m(y2)), 1))


def channel_shuffle(x: torch.Tensor, groups: int = 2) -> torch.Tensor:
    b, c, h, w = x.shape
    return x.view(b, groups, c // groups, h, w).transpose(1, 2).reshape(b, c, h, w)


class GSConv(nn.Module):
    """Stand-in for GSConv: dense conv to half the channels, a 5x5 depthwise
    conv on that half, concatenation, then a two-group channel shuffle.

    Odd output widths fall back to a plain :class:`Conv`.
    """

    def __init__(self, c1: int, c2: int, k: int = 1, s: int = 1):
        super().__init__()
        self.split = c2 % 2 == 0
        if self.split:
            c_ = c2 // 2
            self.cv1 = Conv(c1, c_, k, s)
            self.cv2 = Conv(c_, c_, 5, 1, g=c_)
        else:
            self.cv1 = Conv(c1, c2, k, s)

    def forward(self, x):
        x1 = self.cv1(x)
        if not self.split:
            return x1
        return channel_shuffle(torch.cat((x1, self.cv2(x1)), 1))


def make_gsconv(kind: str, c1: int, c2: int, k: int = 1, s: int = 1) -> nn.Module:
    if kind == "gsconv":
        return GSConv(c1, c2, k, s)
    if kind == "plain":
        return Conv(c1, c2, k, s)
    raise ValueError(f"unknown gsconv kind {kind!r}; expected 'gsconv' or 'plain'")


def scaled_channels(base: int, width_multiple: float, divisor: int = 8) -> int:
    return max(divisor, int(math.ceil(base * width_multiple / divisor) * divisor))


def scaled_depth(n: int, depth_multiple: float) -> int:
    return max(round(n * depth_multiple), 1)
