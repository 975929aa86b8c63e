"""Directional running-max boundary maps and the boundary guidance block."""
from __future__ import annotations

import torch
from torch import nn

from .layers import make_gsconv, group_count

DIRECTIONS = ("left", "right", "top", "bottom")

# direction -> (spatial dim of a [..., H, W] tensor, scan runs toward the high index?)
_SCAN = {
    "left": (-1, False),  # prefix max along a row: out[j] = max(x[0..j])
    "right": (-1, True),  # suffix max along a row: out[j] = max(x[j..W-1])
    "top": (-2, False),
    "bottom": (-2, True),
}


def directional_boundary(x: torch.Tensor, direction: str) -> torch.Tensor:
    """Running max of ``x`` along one spatial axis.

    Works on any tensor whose last two dims are ``(H, W)``. ``right`` and
    ``bottom`` take the max from each position to the far border; ``left``
    and ``top`` from the near border up to the position. Gradients route to
    the arg-max source.
    """
    try:
        dim, suffix = _SCAN[direction]
    except KeyError:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}") from None
    if x.numel() == 0:
        raise ValueError("empty feature map")
    if suffix:
        return torch.cummax(x.flip(dim), dim)[0].flip(dim)
    return torch.cummax(x, dim)[0]


def boundary(x: torch.Tensor) -> torch.Tensor:
    """Concatenate the four directional maps on the channel axis (left, right, top, bottom).

    Input ``[..., C, H, W]`` gives ``[..., 4C, H, W]``; channels ``kC:(k+1)C`` hold
    direction ``DIRECTIONS[k]``.
    """
    return torch.cat([directional_boundary(x, d) for d in DIRECTIONS], dim=-3)


class BoundaryGuide(nn.Module):
    """``G(b) + reduce(boundary(b))`` where ``G`` is a GSConv block and ``reduce``
    a learned 1x1 conv from 4C to the output width."""

    def __init__(self, c_in: int, c_out: int, gsconv: str = "gsconv"):
        super().__init__()
        self.global_conv = make_gsconv(gsconv, c_in, c_out, k=3)
        self.reduce = nn.Conv2d(4 * c_in, c_out, 1)

    def forward(self, b: torch.Tensor) -> torch.Tensor:
        return self.global_conv(b) + self.reduce(boundary(b))


class BIG(nn.Module):
    """Boundary information guidance for one pyramid level.

    ``out = BG(b) + SiLU(GN(fuse(cat(BG(b), GSConv1x1(n)))))``; the output has the
    neck feature's shape.
    """

    def __init__(self, c_neck: int, c_backbone: int, gsconv: str = "gsconv", groups: int = 16):
        super().__init__()
        self.bg = BoundaryGuide(c_backbone, c_neck, gsconv)
        self.neck_conv = make_gsconv(gsconv, c_neck, c_neck, k=1)
        self.fuse = nn.Conv2d(2 * c_neck, c_neck, 1)
        self.norm = nn.GroupNorm(group_count(c_neck, groups), c_neck)
        self.act = nn.SiLU()

    def forward(self, n: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if n.shape[-2:] != b.shape[-2:]:
            raise ValueError(f"BIG level mismatch: neck {tuple(n.shape)} vs backbone {tuple(b.shape)}")
        bg = self.bg(b)
        return bg + self.act(self.norm(self.fuse(torch.cat((bg, self.neck_conv(n)), 1))))
