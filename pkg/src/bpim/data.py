"""Dataset ingestion, letterboxing and the synthetic small-object generator.

On-disk layout::

    root/
      images/<id>.png
      labels/<id>.txt      # one "class cx cy w h" line per box, normalized
      dataset.json         # {"names": [...], "num_images": n, "counts": {...}}
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .geometry import Box

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
SYNTH_CLASSES = ("disc", "square")


class DatasetError(Exception):
    pass


@dataclass
class AnnotatedImage:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    boxes: list[tuple[int, Box]] = field(default_factory=list)
    source_id: str = ""

    @property
    def labels(self) -> np.ndarray:
        """``[n, 5]`` array of ``class, cx, cy, w, h`` rows."""
        if not self.boxes:
            return np.zeros((0, 5), dtype=np.float32)
        return np.array([(c, b.cx, b.cy, b.w, b.h) for c, b in self.boxes], dtype=np.float32)


# ---------------------------------------------------------------------------
# label text format


def parse_label_line(line: str, num_classes: int | None = None, extra: int = 0) -> tuple[int, Box, list[float]]:
    """Parse ``class cx cy w h [extra...]``; raises ``ValueError`` with the reason."""
    parts = line.split()
    if len(parts) != 5 + extra:
        raise ValueError(f"expected {5 + extra} fields, got {len(parts)}")
    try:
        cls_f = float(parts[0])
        cx, cy, w, h, *rest = (float(p) for p in parts[1:])
    except ValueError:
        raise ValueError("non-numeric field") from None
    if cls_f != int(cls_f) or cls_f < 0:
        raise ValueError(f"class index {parts[0]!r} is not a non-negative integer")
    cls = int(cls_f)
    if num_classes is not None and cls >= num_classes:
        raise ValueError(f"class index {cls} >= num_classes {num_classes}")
    if not (w > 0 and h > 0):
        raise ValueError("width and height must be positive")
    tol = 1e-6
    if min(cx - w / 2, cy - h / 2) < -tol or max(cx + w / 2, cy + h / 2) > 1 + tol:
        raise ValueError("box extends outside the unit square")
    return cls, Box(cx, cy, w, h), rest


def format_label_line(cls: int, box: Box, conf: float | None = None) -> str:
    line = f"{cls} {box.cx:.6f} {box.cy:.6f} {box.w:.6f} {box.h:.6f}"
    return line if conf is None else f"{line} {conf:.6f}"


def read_labels(path: Path, num_classes: int | None = None, extra: int = 0) -> list[tuple[int, Box, list[float]]]:
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append(parse_label_line(line, num_classes, extra))
        except ValueError as e:
            log.warning("%s:%d: rejected line %r: %s", path, lineno, line, e)
    return rows


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / "dataset.json"
    return json.loads(path.read_text()) if path.exists() else {}


def load_dataset(root: str | Path, num_classes: int | None = None) -> list[AnnotatedImage]:
    """Load every image under ``root/images`` with its label file, sorted by id."""
    root = Path(root)
    img_dir, lbl_dir = root / "images", root / "labels"
    if not img_dir.is_dir():
        raise DatasetError(f"{img_dir} does not exist")
    if num_classes is None:
        names = read_manifest(root).get("names")
        num_classes = len(names) if names else None
    items = []
    for img_path in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        lbl_path = lbl_dir / f"{img_path.stem}.txt"
        if lbl_path.exists():
            boxes = [(c, b) for c, b, _ in read_labels(lbl_path, num_classes)]
        else:
            log.warning("%s: no label file, treating as background", lbl_path)
            boxes = []
        items.append(AnnotatedImage(read_image(img_path), boxes, img_path.stem))
    return items


def write_dataset(root: str | Path, items: Iterable[AnnotatedImage], names: Sequence[str]) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    counts = {n: 0 for n in names}
    num_images = 0
    for item in items:
        write_image(root / "images" / f"{item.source_id}.png", item.image)
        lines = [format_label_line(c, b) for c, b in item.boxes]
        (root / "labels" / f"{item.source_id}.txt").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
        for c, _ in item.boxes:
            counts[names[c]] += 1
        num_images += 1
    manifest = {"names": list(names), "num_images": num_images, "counts": counts}
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return root


# ---------------------------------------------------------------------------
# letterbox


@dataclass(frozen=True)
class LetterboxTransform:
    """Affine map between normalized boxes in the source frame and in the padded square."""

    src_w: int
    src_h: int
    target: int
    new_w: int
    new_h: int
    pad_left: int
    pad_top: int

    @property
    def is_identity(self) -> bool:
        return self.new_w == self.src_w == self.target and self.new_h == self.src_h == self.target

    def forward(self, box: Box) -> Box:
        t = self.target
        return Box(
            (box.cx * self.new_w + self.pad_left) / t,
            (box.cy * self.new_h + self.pad_top) / t,
            box.w * self.new_w / t,
            box.h * self.new_h / t,
        )

    def inverse(self, box: Box) -> Box:
        t = self.target
        return Box(
            (box.cx * t - self.pad_left) / self.new_w,
            (box.cy * t - self.pad_top) / self.new_h,
            box.w * t / self.new_w,
            box.h * t / self.new_h,
        )


def letterbox(image: np.ndarray, target: int, fill: float = 114 / 255) -> tuple[np.ndarray, LetterboxTransform]:
    """Aspect-preserving resize of a ``[3, H, W]`` image into a ``target`` square."""
    if target % 32:
        raise ValueError(f"target {target} is not divisible by 32")
    _, h, w = image.shape
    r = target / max(h, w)
    new_w, new_h = max(1, round(w * r)), max(1, round(h * r))
    pad_left, pad_top = (target - new_w) // 2, (target - new_h) // 2
    tf = LetterboxTransform(w, h, target, new_w, new_h, pad_left, pad_top)
    if tf.is_identity:
        return image.astype(np.float32, copy=True), tf
    resized = image
    if (new_h, new_w) != (h, w):
        t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
        resized = F.interpolate(t, size=(new_h, new_w), mode="bilinear", align_corners=False)[0].numpy()
    out = np.full((3, target, target), fill, dtype=np.float32)
    out[:, pad_top : pad_top + new_h, pad_left : pad_left + new_w] = resized
    return out, tf


def letterbox_item(item: AnnotatedImage, target: int) -> tuple[AnnotatedImage, LetterboxTransform]:
    img, tf = letterbox(item.image, target)
    return AnnotatedImage(img, [(c, tf.forward(b)) for c, b in item.boxes], item.source_id), tf


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    num_images: int = 16
    image_size: int = 128
    objects_per_image: tuple[int, int] = (1, 4)
    object_size_px: tuple[int, int] = (6, 24)

    def validate(self) -> "SyntheticSpec":
        if self.image_size <= 0 or self.image_size % 32:
            raise ValueError(f"image_size {self.image_size} must be a positive multiple of 32")
        if self.num_images < 1:
            raise ValueError("num_images must be >= 1")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError("objects_per_image must be an ordered non-negative range")
        smin, smax = self.object_size_px
        if not 1 <= smin <= smax < self.image_size:
            raise ValueError("object_size_px must be an ordered range inside the image")
        return self


@dataclass
class SyntheticScene:
    image: np.ndarray
    boxes: list[tuple[int, Box]]  # normalized
    masks: list[np.ndarray]  # boolean [H, W] per object


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.15, 0.6, size=3)
    coarse = rng.normal(0.0, 0.06, size=(3, size // 8, size // 8))
    texture = np.kron(coarse, np.ones((8, 8)))
    fine = rng.normal(0.0, 0.02, size=(3, size, size))
    yy = np.linspace(-1, 1, size)[None, :, None]
    grad = rng.uniform(-0.08, 0.08, size=(3, 1, 1)) * yy
    return np.clip(base[:, None, None] + texture + fine + grad, 0, 1)


def render_scene(spec: SyntheticSpec, index: int) -> SyntheticScene:
    """Deterministically render image ``index`` of ``spec``."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    img = _background(rng, size)
    lo, hi = spec.objects_per_image
    smin, smax = spec.object_size_px
    n = int(rng.integers(lo, hi + 1))
    centers = np.arange(size) + 0.5
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    placed: list[tuple[float, float, float, float]] = []
    boxes, masks = [], []
    for _ in range(n):
        for _attempt in range(100):
            s = float(rng.integers(smin, smax + 1))
            cx, cy = rng.uniform(s / 2 + 1, size - s / 2 - 1, size=2)
            x1, y1, x2, y2 = cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2
            if all(x1 > bx2 + 2 or x2 < bx1 - 2 or y1 > by2 + 2 or y2 < by1 - 2 for bx1, by1, bx2, by2 in placed):
                break
        else:
            continue
        cls = int(rng.integers(0, len(SYNTH_CLASSES)))
        if cls == 0:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= (s / 2) ** 2
        else:
            mask = (np.abs(xx - cx) <= s / 2) & (np.abs(yy - cy) <= s / 2)
        if not mask.any():
            continue
        color = rng.uniform(0.0, 1.0, size=3)
        bg_mean = img[:, mask].mean(1)
        if np.abs(color - bg_mean).max() < 0.35:
            color = np.where(bg_mean > 0.5, 0.0, 1.0) * 0.9 + 0.05
        img[:, mask] = color[:, None]
        placed.append((x1, y1, x2, y2))
        boxes.append((cls, Box(cx / size, cy / size, s / size, s / size)))
        masks.append(mask)
    # quantize the way the PNG round trip will
    img = np.round(img * 255.0) / 255.0
    return SyntheticScene(img.astype(np.float32), boxes, masks)


def generate_synthetic(spec: SyntheticSpec, root: str | Path) -> Path:
    """Write ``spec.num_images`` rendered scenes under ``root`` in the loader's format."""
    spec.validate()
    width = len(str(spec.num_images - 1))
    items = (
        AnnotatedImage(scene.image, scene.boxes, f"synth_{i:0{width}d}")
        for i, scene in ((i, render_scene(spec, i)) for i in range(spec.num_images))
    )
    return write_dataset(root, items, SYNTH_CLASSES)


def hflip(item: AnnotatedImage) -> AnnotatedImage:
    return AnnotatedImage(
        np.ascontiguousarray(item.image[:, :, ::-1]),
        [(c, Box(1.0 - b.cx, b.cy, b.w, b.h)) for c, b in item.boxes],
        item.source_id,
    )


def collate(items: Sequence[AnnotatedImage]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack images and build a ``[n, 6]`` target table of ``image, class, cx, cy, w, h``."""
    images = torch.from_numpy(np.stack([it.image for it in items]).astype(np.float32))
    rows = [np.concatenate([np.full((len(it.boxes), 1), i, np.float32), it.labels], 1) for i, it in enumerate(items)]
    targets = torch.from_numpy(np.concatenate(rows, 0)) if rows else torch.zeros(0, 6)
    return images, targets
