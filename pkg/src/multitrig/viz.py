"""Detection overlays and side-by-side clean/triggered strips."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .core import DetectionSet
from .data import Sample
from .detector import GridDetector, predict
from .targets import ALL_SCENARIOS, AttackTarget
from .trigger import InjectionConfig, TriggerGenerator, inject, patch_to_image

_COLORS = (
    (230, 70, 70),
    (70, 160, 230),
    (90, 200, 90),
    (240, 180, 40),
    (190, 90, 220),
    (80, 210, 200),
    (240, 120, 50),
    (150, 150, 150),
)


def class_color(class_id: int) -> tuple[int, int, int]:
    return _COLORS[class_id % len(_COLORS)]


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def draw_detections(image: np.ndarray, detections: DetectionSet, class_names: Sequence[str] | None = None) -> np.ndarray:
    """Overlay boxes and class labels; returns an H x W x 3 uint8 copy."""
    pil = Image.fromarray(to_uint8(image))
    draw = ImageDraw.Draw(pil)
    for rec in detections:
        color = class_color(rec.class_id)
        x0, y0, x1, y1 = rec.box.as_tuple()
        draw.rectangle((x0, y0, x1, y1), outline=color, width=1)
        name = class_names[rec.class_id] if class_names else str(rec.class_id)
        label = f"{name} {rec.score:.2f}"
        draw.text((min(x0 + 1, pil.width - 1), max(y0 - 10, 0)), label, fill=color)
    return np.asarray(pil)


def montage(panels: Sequence[np.ndarray], labels: Sequence[str], pad: int = 4, caption_h: int = 12) -> np.ndarray:
    """Horizontal strip of equally sized uint8 panels with caption bars."""
    h, w = panels[0].shape[:2]
    total_w = len(panels) * w + (len(panels) + 1) * pad
    total_h = h + caption_h + 2 * pad
    canvas = Image.new("RGB", (total_w, total_h), (24, 24, 24))
    draw = ImageDraw.Draw(canvas)
    x = pad
    for panel, label in zip(panels, labels):
        canvas.paste(Image.fromarray(panel), (x, pad + caption_h))
        draw.text((x + 1, pad), label[: max(1, w // 6)], fill=(230, 230, 230))
        x += w + pad
    return np.asarray(canvas)


def render_scenario_strip(
    model: GridDetector,
    generator: TriggerGenerator,
    sample: Sample,
    inj_cfg: InjectionConfig,
    targets: Sequence[AttackTarget],
    class_names: Sequence[str] | None = None,
) -> np.ndarray:
    """Clean panel plus one triggered panel per target, detections drawn."""
    if sample.image is None:
        raise ValueError(f"sample {sample.id} has no image loaded")
    h, w = sample.image.shape[:2]
    x = torch.from_numpy(np.ascontiguousarray(sample.image.transpose(2, 0, 1)))
    panels = []
    labels = []
    clean_sets = predict(model, x.unsqueeze(0), (w, h))
    panels.append(draw_detections(sample.image, clean_sets[0], class_names))
    labels.append("clean")
    for target in targets:
        with torch.no_grad():
            dirty = inject(x, generator, target, inj_cfg)
        dirty_np = dirty.permute(1, 2, 0).numpy()
        sets = predict(model, dirty.unsqueeze(0), (w, h))
        panels.append(draw_detections(dirty_np, sets[0], class_names))
        labels.append(target.describe())
    return montage(panels, labels)


def save_png(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(image).save(str(path))


def save_patch_png(generator: TriggerGenerator, target: AttackTarget, path: str | Path, scale: int = 4) -> None:
    """Trigger patch rendered through its sigmoid, upscaled for visibility."""
    patch = to_uint8(patch_to_image(generator, target))
    pil = Image.fromarray(patch)
    pil = pil.resize((pil.width * scale, pil.height * scale), Image.NEAREST)
    pil.save(str(path))
