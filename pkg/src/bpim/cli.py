"""Command line entry point: ``bpim synth | train | eval | detect | inspect | ablate``.

Exit codes: 0 success, 1 every input failed (detect), 2 invalid spec or
config, 3 missing dataset, 4 training diverged.
"""
from __future__ import annotations

import hashlib
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import torch
from PIL import Image, ImageDraw

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config, resolve_data_path
from .data import DatasetError, SYNTH_CLASSES, SyntheticSpec, format_label_line, generate_synthetic, letterbox, load_dataset, read_image, read_manifest
from .geometry import Box
from .model import FLAGS, build, count_flops, count_params, load_checkpoint
from .train import TrainingDiverged, ablate, evaluate, predict, train

log = logging.getLogger("bpim")

EXIT_OK, EXIT_FAILED, EXIT_INVALID, EXIT_NO_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4

# class-indexed overlay colours, cycled past the end
PALETTE = [(255, 56, 56), (56, 120, 255), (40, 200, 80), (255, 180, 30), (190, 60, 255), (0, 210, 210)]


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, config: dict, outputs: list[Path], extra: dict | None = None) -> Path:
    """``manifest.json`` listing every output with its digest; no timestamps, so reruns match."""
    files = sorted(outputs, key=lambda p: str(p.relative_to(out)))
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _run_config(config: str | None, seed: int | None) -> RunConfig:
    try:
        cfg = load_config(config)
    except (ConfigError, FileNotFoundError) as e:
        _fail(EXIT_INVALID, str(e))
    if seed is not None:
        cfg = cfg.with_seed(seed)
    log.info("resolved config:\n%s", dump_config(cfg))
    return cfg


def _load_data(root: str | None, num_classes: int):
    path = resolve_data_path(root)
    if path is None:
        _fail(EXIT_NO_DATA, "no dataset given (set data.root in the config or pass --data)")
    try:
        items = load_dataset(path, num_classes)
    except DatasetError as e:
        _fail(EXIT_NO_DATA, str(e))
    if not items:
        _fail(EXIT_NO_DATA, f"{path} holds no images")
    return items


def _check_device(device: str) -> None:
    if device != "cpu":
        _fail(EXIT_INVALID, f"device {device!r} is not supported; this build runs on the CPU")


common = [
    click.option("--config", type=click.Path(dir_okay=False), default=None, help="YAML run config."),
    click.option("--seed", type=int, default=None, help="Override the config seed."),
    click.option("--device", default="cpu", show_default=True, help="Compute device."),
    click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory."),
]


def with_common(f):
    for opt in reversed(common):
        f = opt(f)
    return f


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
@click.version_option(__version__)
def main(verbose: bool):
    """Small-object detector: data synthesis, training, evaluation and ablation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n", "num_images", type=int, default=16, show_default=True, help="Number of images.")
@click.option("--size", type=int, default=128, show_default=True, help="Square image side, a multiple of 32.")
@click.option("--objects", nargs=2, type=int, default=(1, 4), show_default=True, help="Min and max objects per image.")
@click.option("--object-size", nargs=2, type=int, default=(6, 24), show_default=True, help="Min and max object side in pixels.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def synth(seed, num_images, size, objects, object_size, out):
    """Write a synthetic disc/square dataset under OUT."""
    spec = SyntheticSpec(seed, num_images, size, tuple(objects), tuple(object_size))
    try:
        spec.validate()
    except ValueError as e:
        _fail(EXIT_INVALID, str(e))
    out = Path(out)
    generate_synthetic(spec, out)
    files = [p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"]
    write_manifest(out, "synth", {"seed": seed, "num_images": num_images, "image_size": size, "objects_per_image": list(objects), "object_size_px": list(object_size)}, files)
    click.echo(f"wrote {num_images} images to {out}")


@main.command("train")
@with_common
@click.option("--data", default=None, help="Dataset root (overrides data.root).")
@click.option("--epochs", type=int, default=None, help="Override train.epochs.")
def train_cmd(config, seed, device, out, data, epochs):
    """Train a model and write last.ckpt, metrics.jsonl and eval.json."""
    _check_device(device)
    cfg = _run_config(config, seed)
    if epochs is not None:
        import dataclasses

        try:
            cfg.train = dataclasses.replace(cfg.train, epochs=epochs, warmup_epochs=min(cfg.train.warmup_epochs, epochs))
        except ValueError as e:
            _fail(EXIT_INVALID, str(e))
    items = _load_data(data or cfg.data_root, cfg.model.num_classes)
    val = _load_data(cfg.val_root, cfg.model.num_classes) if cfg.val_root else None
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    try:
        res = train(cfg.model, cfg.train, items, out_dir=out, val_dataset=val)
    except TrainingDiverged as e:
        _fail(EXIT_DIVERGED, f"{e} (checkpoint: {e.checkpoint})")
    if res.eval is not None:
        res.eval.params_m = count_params(res.model) / 1e6
        res.eval.gflops = count_flops(res.model) / 1e9
    ev = res.eval.to_dict() if res.eval else {}
    (out / "eval.json").write_text(json.dumps(ev, indent=2, sort_keys=True) + "\n")
    write_manifest(
        out,
        "train",
        cfg.to_dict(),
        [out / n for n in ("config.yaml", "metrics.jsonl", "last.ckpt", "eval.json")],
        {"final_loss": res.final_loss, "steps": res.steps},
    )
    click.echo(json.dumps({"final_loss": res.final_loss, "steps": res.steps, **ev}, sort_keys=True))


@main.command("eval")
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--data", required=True, help="Dataset root.")
@click.option("--conf", type=float, default=0.001, show_default=True)
@click.option("--iou", type=float, default=0.6, show_default=True)
@click.option("--device", default="cpu", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def eval_cmd(checkpoint, data, conf, iou, device, out):
    """Score a checkpoint on a dataset; writes eval.json."""
    _check_device(device)
    model, _ = _load_model(checkpoint)
    items = _load_data(data, model.cfg.num_classes)
    res = evaluate(model, items, conf, iou)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval.json"
    path.write_text(json.dumps(res.to_dict(), indent=2, sort_keys=True) + "\n")
    write_manifest(out, "eval", {"checkpoint": str(checkpoint), "data": str(data), "conf": conf, "iou": iou}, [path])
    click.echo(f"map50 {res.map50:.6f} map5095 {res.map5095:.6f}")


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (OSError, KeyError, ValueError) as e:
        _fail(EXIT_INVALID, f"cannot load checkpoint {path}: {e}")


def draw_overlay(image: np.ndarray, detections: np.ndarray) -> Image.Image:
    """Draw one-pixel class-coloured rectangles; ``detections`` rows are normalized ``cx, cy, w, h, conf, cls``."""
    arr = np.clip(np.round(image.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    im = Image.fromarray(arr)
    h, w = arr.shape[:2]
    draw = ImageDraw.Draw(im)
    for cx, cy, bw, bh, _, cls in detections:
        x1, y1 = round((cx - bw / 2) * w), round((cy - bh / 2) * h)
        x2, y2 = round((cx + bw / 2) * w) - 1, round((cy + bh / 2) * h) - 1
        draw.rectangle([x1, y1, max(x1, x2), max(y1, y2)], outline=PALETTE[int(cls) % len(PALETTE)], width=1)
    return im


@main.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--images", type=click.Path(file_okay=False), required=True, help="Directory of input images.")
@click.option("--conf", type=float, default=0.25, show_default=True)
@click.option("--iou", type=float, default=0.45, show_default=True)
@click.option("--device", default="cpu", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def detect(checkpoint, images, conf, iou, device, out):
    """Write PNG overlays and per-image detection files (label format plus confidence)."""
    _check_device(device)
    model, _ = _load_model(checkpoint)
    src = Path(images)
    paths = sorted(p for p in src.iterdir() if p.is_file()) if src.is_dir() else []
    if not paths:
        _fail(EXIT_NO_DATA, f"no images in {src}")
    out = Path(out)
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    (out / "detections").mkdir(parents=True, exist_ok=True)
    written, ok = [], 0
    for p in paths:
        try:
            img = read_image(p)
        except Exception as e:  # PIL raises several unrelated types
            log.warning("skipping %s: %s", p, e)
            continue
        boxed, tf = letterbox(img, model.cfg.input_size)
        det = predict(model, torch.from_numpy(boxed)[None], conf, iou)[0].numpy()
        rows, lines = [], []
        for cx, cy, bw, bh, score, cls in det:
            try:
                b = tf.inverse(Box(float(cx), float(cy), float(bw), float(bh))).clip()
            except ValueError:
                continue  # nothing left inside the image
            rows.append([b.cx, b.cy, b.w, b.h, score, cls])
            lines.append(format_label_line(int(cls), b, float(score)))
        overlay = out / "overlays" / f"{p.stem}.png"
        draw_overlay(img, np.asarray(rows, dtype=np.float64).reshape(-1, 6)).save(overlay, format="PNG")
        txt = out / "detections" / f"{p.stem}.txt"
        txt.write_text("".join(l + "\n" for l in lines), encoding="utf-8")
        written += [overlay, txt]
        ok += 1
    write_manifest(out, "detect", {"checkpoint": str(checkpoint), "images": str(src), "conf": conf, "iou": iou}, written, {"processed": ok, "failed": len(paths) - ok})
    click.echo(f"processed {ok}/{len(paths)} images")
    if ok == 0:
        sys.exit(EXIT_FAILED)


@main.command()
@click.option("--config", type=click.Path(dir_okay=False), default=None)
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Also write inspect.json here.")
def inspect(config, checkpoint, out):
    """Report parameter count, GFLOPs and per-module parameters for a config or checkpoint."""
    if checkpoint:
        model, _ = _load_model(checkpoint)
    else:
        model = build(_run_config(config, None).model, seed=0)
    per_module = {}
    for name, child in model.named_children():
        per_module[name] = count_params(child)
    report = {
        "flags": model.cfg.flags,
        "channels": {str(k): v for k, v in model.cfg.channels.items()},
        "input_size": model.cfg.input_size,
        "params": count_params(model),
        "params_m": count_params(model) / 1e6,
        "gflops": count_flops(model) / 1e9,
        "modules": per_module,
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if out:
        o = Path(out)
        o.mkdir(parents=True, exist_ok=True)
        (o / "inspect.json").write_text(text + "\n")
        write_manifest(o, "inspect", {"config": config, "checkpoint": checkpoint}, [o / "inspect.json"])
    click.echo(text)


@main.command("ablate")
@with_common
@click.option("--data", default=None, help="Dataset root (overrides data.root).")
@click.option("--row", "rows", multiple=True, help="Comma-separated flags for one row; repeatable. Empty string is the baseline.")
def ablate_cmd(config, seed, device, out, data, rows):
    """Train one model per flag row and write ablation.csv."""
    _check_device(device)
    cfg = _run_config(config, seed)
    matrix = [[f for f in r.split(",") if f] for r in rows] if rows else cfg.ablation
    bad = sorted({f for r in matrix for f in r} - set(FLAGS))
    if bad:
        _fail(EXIT_INVALID, f"unknown module flags {bad}; choose from {list(FLAGS)}")
    items = _load_data(data or cfg.data_root, cfg.model.num_classes)
    val = _load_data(cfg.val_root, cfg.model.num_classes) if cfg.val_root else None
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        _, text = ablate(cfg.model, cfg.train, items, matrix, cfg.dataset_name, val, out / "ablation.csv")
    except TrainingDiverged as e:
        _fail(EXIT_DIVERGED, str(e))
    (out / "config.yaml").write_text(dump_config(cfg))
    write_manifest(out, "ablate", {**cfg.to_dict(), "ablation": matrix}, [out / "ablation.csv", out / "config.yaml"])
    click.echo(text, nl=False)


if __name__ == "__main__":
    main()
