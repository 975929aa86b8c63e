"""Self-attention over the deepest backbone tap and the position guidance block."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .layers import Conv, group_count


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 8
    model_dim: int = 256
    ff_dim: int = 1024
    positional: bool = False

    def __post_init__(self):
        if self.heads < 1 or self.model_dim < 1:
            raise ValueError("heads and model_dim must be positive")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


def flatten_tokens(x: torch.Tensor) -> torch.Tensor:
    """``[N, C, H, W] -> [N, H*W, C]``."""
    return x.flatten(2).transpose(1, 2)


def unflatten_tokens(tokens: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Inverse of :func:`flatten_tokens`."""
    n, hw, c = tokens.shape
    if hw != height * width:
        raise ValueError(f"{hw} tokens cannot fill a {height}x{width} map")
    return tokens.transpose(1, 2).reshape(n, c, height, width)


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    d_k = q.shape[-1]
    if d_k == 0:
        raise ValueError("head dimension must be positive")
    return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d_k), dim=-1)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d_k)) v``."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"incompatible q/k/v shapes {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    return attention_weights(q, k) @ v


class MultiHeadAttention(nn.Module):
    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.model_dim
        self.w_q = nn.Linear(c, c, bias=False)
        self.w_k = nn.Linear(c, c, bias=False)
        self.w_v = nn.Linear(c, c, bias=False)
        self.w_o = nn.Linear(c, c, bias=False)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        n, t, _ = x.shape
        return x.view(n, t, self.cfg.heads, self.cfg.head_dim).transpose(1, 2)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, return_weights: bool = False):
        if q.shape[-1] != self.cfg.model_dim:
            raise ValueError(f"token dim {q.shape[-1]} != model_dim {self.cfg.model_dim}")
        qh, kh, vh = self._split(self.w_q(q)), self._split(self.w_k(k)), self._split(self.w_v(v))
        weights = attention_weights(qh, kh)
        heads = weights @ vh  # [N, h, T, d_k]
        n, _, t, _ = heads.shape
        out = self.w_o(heads.transpose(1, 2).reshape(n, t, self.cfg.model_dim))
        return (out, weights) if return_weights else out


def multi_head(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mha: MultiHeadAttention) -> torch.Tensor:
    """Functional entry point; accepts unbatched ``[T, C]`` or batched ``[N, T, C]`` tokens."""
    if q.dim() == 2:
        return mha(q[None], k[None], v[None])[0]
    return mha(q, k, v)


class EncoderLayer(nn.Module):
    """Single post-norm transformer encoder layer (self-attention + GELU MLP)."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg)
        self.norm1 = nn.LayerNorm(cfg.model_dim)
        self.ff = nn.Sequential(nn.Linear(cfg.model_dim, cfg.ff_dim), nn.GELU(), nn.Linear(cfg.ff_dim, cfg.model_dim))
        self.norm2 = nn.LayerNorm(cfg.model_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = self.norm1(tokens + self.attn(tokens, tokens, tokens))
        return self.norm2(x + self.ff(x))


class PIG(nn.Module):
    """Position information guidance.

    Encodes the flattened deepest tap with one encoder layer, refines it with
    ``PI + SiLU(GN(fuse(cat(PI, Conv1x1(b5)))))`` and then produces one map per
    level: nearest upsampling by ``2**(5-i)`` then a 3x3 conv to that level's
    width (level 5 keeps its size).
    """

    def __init__(self, c5: int, out_channels: Mapping[int, int], cfg: AttentionConfig, groups: int = 16, max_tokens: int = 1024):
        super().__init__()
        if cfg.model_dim != c5:
            raise ValueError("attention model_dim must equal the deepest tap's channels")
        self.cfg = cfg
        self.encoder = EncoderLayer(cfg)
        self.pos_embed = nn.Parameter(torch.zeros(1, max_tokens, c5)) if cfg.positional else None
        self.b5_conv = nn.Conv2d(c5, c5, 1)
        self.fuse = nn.Conv2d(2 * c5, c5, 1)
        self.norm = nn.GroupNorm(group_count(c5, groups), c5)
        self.act = nn.SiLU()
        self.levels = sorted(out_channels)
        self.scale = nn.ModuleDict({str(i): Conv(c5, out_channels[i], 3) for i in self.levels})

    def encode(self, b5: torch.Tensor) -> torch.Tensor:
        """The reshaped attention output ``PI`` (same shape as ``b5``)."""
        h, w = b5.shape[-2:]
        tokens = flatten_tokens(b5)
        if self.pos_embed is not None:
            tokens = tokens + self.pos_embed[:, : h * w]
        return unflatten_tokens(self.encoder(tokens), h, w)

    def refine(self, pi: torch.Tensor, b5: torch.Tensor) -> torch.Tensor:
        return pi + self.act(self.norm(self.fuse(torch.cat((pi, self.b5_conv(b5)), 1))))

    def forward(self, b5: torch.Tensor) -> dict[int, torch.Tensor]:
        feat = self.refine(self.encode(b5), b5)
        out = {}
        for i in self.levels:
            x = feat if i == 5 else F.interpolate(feat, scale_factor=2 ** (5 - i), mode="nearest")
            out[i] = self.scale[str(i)](x)
        return out
