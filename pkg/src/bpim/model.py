"""Detector assembly: CSP backbone, PANet neck with a stride-4 head, and the
optional boundary / position / cross-scale / adaptive-weight modules."""
from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .boundary import BIG
from .cross_scale import CSF, TFF, ScaleSequence
from .fusion import AWF
from .layers import C3, SPPF, Conv, scaled_channels, scaled_depth
from .position import PIG, AttentionConfig

LEVELS = (2, 3, 4, 5)
FLAGS = ("big", "awf", "pig", "csf_tff")
STRIDES = {k: 2**k for k in LEVELS}
# anchor shapes in units of the level stride
_ANCHOR_UNITS = ((1.25, 1.625), (2.0, 3.75), (4.125, 2.875))


def default_anchors() -> dict[int, list[tuple[float, float]]]:
    return {k: [(w * STRIDES[k], h * STRIDES[k]) for w, h in _ANCHOR_UNITS] for k in LEVELS}


@dataclass
class ModelConfig:
    width_multiple: float = 0.25
    depth_multiple: float = 0.33
    num_classes: int = 2
    big: bool = True
    awf: bool = True
    pig: bool = True
    csf_tff: bool = True
    heads: int = 8
    ff_dim: int = 1024
    input_size: int = 640
    gsconv: str = "gsconv"
    positional: bool = False
    anchors: dict[int, list[tuple[float, float]]] = field(default_factory=default_anchors)

    def __post_init__(self):
        self.anchors = {int(k): [tuple(map(float, a)) for a in v] for k, v in self.anchors.items()}
        self.validate()

    def validate(self) -> "ModelConfig":
        if not self.width_multiple > 0 or not self.depth_multiple > 0:
            raise ValueError("width_multiple and depth_multiple must be positive")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.input_size % 32:
            raise ValueError(f"input_size {self.input_size} is not divisible by 32")
        if sorted(self.anchors) != list(LEVELS) or any(len(v) != 3 for v in self.anchors.values()):
            raise ValueError("anchors need three (w, h) pairs for each of levels 2..5")
        if self.gsconv not in ("gsconv", "plain"):
            raise ValueError("gsconv must be 'gsconv' or 'plain'")
        c5 = self.channels[5]
        if c5 % self.heads:
            raise ValueError(f"deepest width {c5} is not divisible by {self.heads} heads")
        return self

    @property
    def channels(self) -> dict[int, int]:
        return {k: scaled_channels(64 * 2 ** (k - 1), self.width_multiple) for k in LEVELS}

    @property
    def flags(self) -> dict[str, bool]:
        return {f: getattr(self, f) for f in FLAGS}

    def with_flags(self, **flags: bool) -> "ModelConfig":
        unknown = set(flags) - set(FLAGS)
        if unknown:
            raise ValueError(f"unknown module flags {sorted(unknown)}")
        return dataclasses.replace(self, **flags)

    def baseline(self) -> "ModelConfig":
        return self.with_flags(**{f: False for f in FLAGS})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["anchors"] = {str(k): [list(a) for a in v] for k, v in self.anchors.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        if "anchors" in d:
            d["anchors"] = {int(k): [tuple(a) for a in v] for k, v in d["anchors"].items()}
        return cls(**d)


class Backbone(nn.Module):
    """CSP stage stack with taps at strides 4, 8, 16 and 32."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.channels
        c1 = scaled_channels(64, cfg.width_multiple)
        d = lambda n: scaled_depth(n, cfg.depth_multiple)  # noqa: E731
        self.stem = Conv(3, c1, 6, 2, 2)
        self.stage2 = nn.Sequential(Conv(c1, ch[2], 3, 2), C3(ch[2], ch[2], d(3)))
        self.stage3 = nn.Sequential(Conv(ch[2], ch[3], 3, 2), C3(ch[3], ch[3], d(6)))
        self.stage4 = nn.Sequential(Conv(ch[3], ch[4], 3, 2), C3(ch[4], ch[4], d(9)))
        self.stage5 = nn.Sequential(Conv(ch[4], ch[5], 3, 2), C3(ch[5], ch[5], d(3)), SPPF(ch[5], ch[5]))

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        b2 = self.stage2(self.stem(x))
        b3 = self.stage3(b2)
        b4 = self.stage4(b3)
        return {2: b2, 3: b3, 4: b4, 5: self.stage5(b4)}


class Detect(nn.Module):
    """One 1x1 conv per level producing ``A * (5 + nc)`` channels."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.nc = cfg.num_classes
        self.no = 5 + cfg.num_classes
        self.na = 3
        self.register_buffer("anchors", torch.tensor([cfg.anchors[k] for k in LEVELS], dtype=torch.float32))
        self.m = nn.ModuleDict({str(k): nn.Conv2d(cfg.channels[k], self.na * self.no, 1) for k in LEVELS})
        self._init_biases(cfg.input_size)

    def _init_biases(self, input_size: int):
        import math

        for k in LEVELS:
            b = self.m[str(k)].bias.data.view(self.na, self.no)
            b[:, 4] += math.log(8 / (input_size / STRIDES[k]) ** 2)
            b[:, 5:] += math.log(0.6 / (self.nc - 0.99999))

    def forward(self, feats: Mapping[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        return {k: self.m[str(k)](feats[k]) for k in LEVELS}


class BPIMNet(nn.Module):
    """The full detector; with every flag off it is the plain P2-P5 PANet baseline."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.channels
        d = scaled_depth(3, cfg.depth_multiple)
        self.backbone = Backbone(cfg)

        # top-down path: T5 <- B5, T_k <- C3(cat(up(lat_k(T_{k+1})), B_k))
        self.lat5 = Conv(ch[5], ch[5], 1)
        self.lat = nn.ModuleDict({str(k): Conv(ch[k + 1], ch[k], 1) for k in (2, 3, 4)})
        self.td = nn.ModuleDict({str(k): C3(2 * ch[k], ch[k], d, shortcut=False) for k in (2, 3, 4)})

        if cfg.big:
            self.big = nn.ModuleDict({str(k): BIG(ch[k], ch[k], cfg.gsconv) for k in LEVELS})
        if cfg.pig:
            att = AttentionConfig(cfg.heads, ch[5], cfg.ff_dim, cfg.positional)
            # the three-branch fusion has no position input at level 5
            pig_levels = (2, 3, 4) if cfg.csf_tff else LEVELS
            self.pig = PIG(ch[5], {k: ch[k] for k in pig_levels}, att)

        # bottom-up path: P_k <- C3(cat(down(P_{k-1}), T_k)) or C3(TFF_k(...))
        if cfg.csf_tff:
            self.scale_seq = ScaleSequence(ch, ch[2])
            self.csf = CSF(ch[2])
            self.csf_align = Conv(ch[2], ch[2], 1)
            self.tff = nn.ModuleDict(
                {str(k): TFF(k, ch.get(k - 1), ch[k], ch[k], use_pig=cfg.pig) for k in LEVELS}
            )
            self.p2_fuse = Conv(self.tff["2"].out_channels, ch[2], 1)
            self.bu = nn.ModuleDict({str(k): C3(self.tff[str(k)].out_channels, ch[k], d, shortcut=False) for k in (3, 4, 5)})
        else:
            self.down = nn.ModuleDict({str(k): Conv(ch[k - 1], ch[k - 1], 3, 2) for k in (3, 4, 5)})
            self.bu = nn.ModuleDict({str(k): C3(ch[k - 1] + ch[k], ch[k], d, shortcut=False) for k in (3, 4, 5)})

        if cfg.awf:
            self.awf = AWF(ch)
        self.detect = Detect(cfg)

    def features(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        """Pyramid fed to the heads (after AWF when enabled)."""
        cfg = self.cfg
        taps = self.backbone(x)

        neck = {5: self.lat5(taps[5])}
        if cfg.big:
            neck[5] = self.big["5"](neck[5], taps[5])
        for k in (4, 3, 2):
            up = F.interpolate(self.lat[str(k)](neck[k + 1]), scale_factor=2.0, mode="nearest")
            neck[k] = self.td[str(k)](torch.cat((up, taps[k]), 1))
            if cfg.big:
                neck[k] = self.big[str(k)](neck[k], taps[k])

        pig = self.pig(taps[5]) if cfg.pig else None

        pyramid: dict[int, torch.Tensor] = {}
        if cfg.csf_tff:
            csf = self.csf(self.scale_seq(taps), size=tuple(neck[2].shape[-2:]))
            pig2 = pig[2] if cfg.pig else None
            pyramid[2] = self.p2_fuse(self.tff["2"](neck[2], None, pig2)) + self.csf_align(csf)
            for k in (3, 4, 5):
                pig_k = pig[k] if (cfg.pig and k < 5) else None
                pyramid[k] = self.bu[str(k)](self.tff[str(k)](neck[k], pyramid[k - 1], pig_k))
        else:
            mid = {k: neck[k] + pig[k] for k in LEVELS} if cfg.pig else neck
            pyramid[2] = mid[2]
            for k in (3, 4, 5):
                pyramid[k] = self.bu[str(k)](torch.cat((self.down[str(k)](pyramid[k - 1]), mid[k]), 1))

        if cfg.awf:
            pyramid = self.awf(pyramid)
        return pyramid

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        size = self.cfg.input_size
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected images [N, 3, H, W], got {tuple(x.shape)}")
        if x.shape[-2] % 32 or x.shape[-1] % 32:
            raise ValueError(f"image size {tuple(x.shape[-2:])} is not divisible by 32")
        if self.training and tuple(x.shape[-2:]) != (size, size):
            raise ValueError(f"training expects {size}x{size} letterboxed images, got {tuple(x.shape[-2:])}")
        return self.detect(self.features(x))


def build(config: ModelConfig, seed: int | None = None) -> BPIMNet:
    if seed is not None:
        torch.manual_seed(seed)
    return BPIMNet(config)


def build_baseline(config: ModelConfig, seed: int | None = None) -> BPIMNet:
    """The P2-P5 baseline: same backbone, neck and heads, every module flag off."""
    return build(config.baseline(), seed)


def decode(preds: Mapping[int, torch.Tensor], anchors: torch.Tensor, input_size: int | tuple[int, int]) -> torch.Tensor:
    """Raw head maps to ``[N, total_anchors, 5 + nc]`` rows of
    normalized ``(cx, cy, w, h)``, objectness and class probabilities."""
    if isinstance(input_size, int):
        input_size = (input_size, input_size)
    ih, iw = input_size
    rows = []
    for li, k in enumerate(LEVELS):
        p = preds[k]
        n, _, h, w = p.shape
        na = anchors.shape[1]
        p = p.view(n, na, -1, h, w).permute(0, 1, 3, 4, 2).sigmoid()
        gy, gx = torch.meshgrid(torch.arange(h, dtype=p.dtype), torch.arange(w, dtype=p.dtype), indexing="ij")
        stride = STRIDES[k]
        cx = (p[..., 0] * 2 - 0.5 + gx) * stride / iw
        cy = (p[..., 1] * 2 - 0.5 + gy) * stride / ih
        aw = anchors[li, :, 0].to(p.dtype).view(1, na, 1, 1)
        ah = anchors[li, :, 1].to(p.dtype).view(1, na, 1, 1)
        bw = (p[..., 2] * 2) ** 2 * aw / iw
        bh = (p[..., 3] * 2) ** 2 * ah / ih
        rows.append(torch.cat((torch.stack((cx, cy, bw, bh), -1), p[..., 4:]), -1).reshape(n, -1, p.shape[-1]))
    return torch.cat(rows, 1)


# ---------------------------------------------------------------------------
# accounting


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def count_flops(model: nn.Module, input_size: int | None = None) -> float:
    """Multiply-accumulates of conv, linear and attention matmuls, times two."""
    from .position import MultiHeadAttention

    if input_size is None:
        input_size = model.cfg.input_size
    macs = 0

    def conv_hook(m, inp, out):
        nonlocal macs
        k = int(np.prod(m.kernel_size))
        macs += out.numel() * (m.in_channels // m.groups) * k

    def linear_hook(m, inp, out):
        nonlocal macs
        macs += out.numel() * m.in_features

    def attn_hook(m, inp, out):
        nonlocal macs
        q = inp[0]
        n, t, c = q.shape
        macs += 2 * n * t * t * c  # q k^T and weights @ v, summed over heads

    hooks = []
    for mod in model.modules():
        if isinstance(mod, (nn.Conv2d, nn.Conv3d)):
            hooks.append(mod.register_forward_hook(conv_hook))
        elif isinstance(mod, nn.Linear):
            hooks.append(mod.register_forward_hook(linear_hook))
        elif isinstance(mod, MultiHeadAttention):
            hooks.append(mod.register_forward_hook(attn_hook))
    was_training = model.training
    model.eval()
    try:
        param = next(model.parameters())
        with torch.no_grad():
            model(torch.zeros(1, 3, input_size, input_size, dtype=param.dtype))
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    return 2.0 * macs


# ---------------------------------------------------------------------------
# checkpoints: a zip archive holding config.json, tensors.npz and an optional meta.json


def save_checkpoint(model: BPIMNet, path: str | Path, meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(buf, **state)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        # fixed timestamps keep archives byte-identical across runs
        for name, data in (
            ("config.json", json.dumps(model.cfg.to_dict(), indent=2, sort_keys=True).encode()),
            ("tensors.npz", buf.getvalue()),
            ("meta.json", json.dumps(dict(meta or {}), indent=2, sort_keys=True).encode()),
        ):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)
    return path


def load_checkpoint(path: str | Path) -> tuple[BPIMNet, dict]:
    with zipfile.ZipFile(path) as zf:
        cfg = ModelConfig.from_dict(json.loads(zf.read("config.json")))
        with np.load(io.BytesIO(zf.read("tensors.npz"))) as npz:
            state = {k: torch.from_numpy(npz[k].copy()) for k in npz.files}
        meta = json.loads(zf.read("meta.json")) if "meta.json" in zf.namelist() else {}
    model = BPIMNet(cfg)
    model.load_state_dict(state)
    model.eval()
    return model, meta
