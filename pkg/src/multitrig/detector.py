"""Desk-scale single-stage grid detector.

A small convolutional backbone pools to a G x G grid; each cell predicts
an objectness logit, four box parameters, and K class logits (channel
layout [obj, tx, ty, tw, th, cls...]). One cell owns at most one object:
the cell containing the box center, larger area winning collisions.
Boxes decode as

    cx = (col + sigmoid(tx)) * cell_w      w = max(sigmoid(tw), 1e-4) * W
    cy = (row + sigmoid(ty)) * cell_h      h = max(sigmoid(th), 1e-4) * H

and the per-record score is sigmoid(obj) * max softmax class prob.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import BoundingBox, DetectionRecord, DetectionSet, iou

# floor on decoded box extent, as a fraction of the image side
MIN_EXTENT = 1e-4


class DetectorError(ValueError):
    pass


@dataclass
class GridDetectorConfig:
    k: int
    grid: int = 7
    channels: tuple[int, ...] = (16, 32, 64)
    score_threshold: float = 0.3
    nms_iou: float = 0.5

    def __post_init__(self):
        if self.k < 1:
            raise DetectorError(f"k must be >= 1, got {self.k}")
        if self.grid < 1:
            raise DetectorError(f"grid must be >= 1, got {self.grid}")
        if not 0.0 < self.score_threshold < 1.0:
            raise DetectorError(f"score threshold {self.score_threshold} outside (0, 1)")
        if not self.channels:
            raise DetectorError("need at least one backbone channel width")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise DetectorError(f"nms iou {self.nms_iou} outside [0, 1]")

    @property
    def cell_depth(self) -> int:
        return 5 + self.k


class GridDetector(nn.Module):
    def __init__(self, cfg: GridDetectorConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        prev = 3
        for width in cfg.channels:
            layers.append(nn.Conv2d(prev, width, 3, stride=2, padding=1))
            layers.append(nn.LeakyReLU(0.1))
            prev = width
        self.backbone = nn.Sequential(*layers)
        self.head = nn.Conv2d(prev, cfg.cell_depth, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """B x 3 x H x W -> B x G x G x (5+K) raw grid predictions."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise DetectorError(f"expected B x 3 x H x W input, got shape {tuple(x.shape)}")
        feat = self.backbone(x)
        feat = F.adaptive_avg_pool2d(feat, (self.cfg.grid, self.cfg.grid))
        out = self.head(feat)
        return out.permute(0, 2, 3, 1)


# ---------------------------------------------------------------------------
# Decoding


def decode(raw: torch.Tensor, cfg: GridDetectorConfig, image_size: tuple[int, int]) -> DetectionSet:
    """Decode one image's raw grid into a thresholded, NMS-filtered set.

    Records with score < threshold are dropped; greedy per-class NMS
    suppresses boxes with IoU > nms_iou against an already kept box.
    Output order is descending score, ties broken by cell index.
    """
    if raw.dim() != 3:
        raise DetectorError(f"expected G x G x (5+K) raw grid, got shape {tuple(raw.shape)}")
    g = cfg.grid
    if raw.shape != (g, g, cfg.cell_depth):
        raise DetectorError(f"raw shape {tuple(raw.shape)} does not match config {(g, g, cfg.cell_depth)}")
    if not torch.isfinite(raw).all():
        raise DetectorError("non-finite raw predictions")

    w_img, h_img = image_size
    grid = raw.detach().cpu().to(torch.float64).numpy()
    obj = 1.0 / (1.0 + np.exp(-grid[..., 0]))
    box = 1.0 / (1.0 + np.exp(-grid[..., 1:5]))
    logits = grid[..., 5:]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=-1, keepdims=True)

    cell_w = w_img / g
    cell_h = h_img / g
    candidates = []  # (score, cell_index, class_id, BoundingBox)
    for row in range(g):
        for col in range(g):
            class_id = int(probs[row, col].argmax())
            score = float(obj[row, col] * probs[row, col, class_id])
            if score < cfg.score_threshold:
                continue
            cx = (col + box[row, col, 0]) * cell_w
            cy = (row + box[row, col, 1]) * cell_h
            bw = max(box[row, col, 2], MIN_EXTENT) * w_img
            bh = max(box[row, col, 3], MIN_EXTENT) * h_img
            bb = BoundingBox(
                max(0.0, cx - bw / 2.0),
                max(0.0, cy - bh / 2.0),
                min(float(w_img), cx + bw / 2.0),
                min(float(h_img), cy + bh / 2.0),
            )
            candidates.append((score, row * g + col, class_id, bb))

    candidates.sort(key=lambda c: (-c[0], c[1]))
    kept = []
    for score, cell, class_id, bb in candidates:
        suppressed = False
        for k_score, k_cell, k_class, k_bb in kept:
            if k_class == class_id and iou(bb, k_bb) > cfg.nms_iou:
                suppressed = True
                break
        if not suppressed:
            kept.append((score, cell, class_id, bb))

    records = tuple(DetectionRecord(bb, class_id, score) for score, _, class_id, bb in kept)
    return DetectionSet(records, image_size)


def predict(model: GridDetector, images: torch.Tensor, image_size: tuple[int, int]) -> list[DetectionSet]:
    model.eval()
    with torch.no_grad():
        raw = model(images)
    return [decode(raw[i], model.cfg, image_size) for i in range(raw.shape[0])]


# ---------------------------------------------------------------------------
# Loss


def encode_targets(truths: list[DetectionSet], cfg: GridDetectorConfig, image_size: tuple[int, int], device=None):
    """Grid-shaped supervision for a batch of ground-truth sets.

    Returns (obj B x G x G, box B x G x G x 4, cls B x G x G int64); the
    box entries are (frac_x, frac_y, w/W, h/H), meaningful only where
    obj is 1. Center-cell assignment, larger area wins a shared cell.
    """
    g = cfg.grid
    w_img, h_img = image_size
    b = len(truths)
    obj = torch.zeros((b, g, g), device=device)
    box = torch.zeros((b, g, g, 4), device=device)
    cls = torch.zeros((b, g, g), dtype=torch.int64, device=device)
    area = np.zeros((b, g, g))
    cell_w = w_img / g
    cell_h = h_img / g
    for i, truth in enumerate(truths):
        for rec in truth:
            cx, cy = rec.box.center
            col = min(int(cx / cell_w), g - 1)
            row = min(int(cy / cell_h), g - 1)
            if obj[i, row, col] > 0 and rec.box.area() <= area[i, row, col]:
                continue
            area[i, row, col] = rec.box.area()
            obj[i, row, col] = 1.0
            box[i, row, col, 0] = cx / cell_w - col
            box[i, row, col, 1] = cy / cell_h - row
            box[i, row, col, 2] = rec.box.width / w_img
            box[i, row, col, 3] = rec.box.height / h_img
            cls[i, row, col] = rec.class_id
    return obj, box, cls


def detection_loss(raw: torch.Tensor, truths: list[DetectionSet], cfg: GridDetectorConfig, image_size: tuple[int, int], weights: tuple[float, float, float] = (1.0, 5.0, 1.0)) -> torch.Tensor:
    """Objectness BCE over all cells + box smooth-L1 + class CE over assigned cells."""
    if raw.dim() != 4:
        raise DetectorError(f"expected batched raw predictions, got shape {tuple(raw.shape)}")
    if raw.shape[0] != len(truths):
        raise DetectorError(f"{raw.shape[0]} predictions vs {len(truths)} ground-truth sets")
    obj_t, box_t, cls_t = encode_targets(truths, cfg, image_size, device=raw.device)
    obj_t = obj_t.to(raw.dtype)
    box_t = box_t.to(raw.dtype)
    w_obj, w_box, w_cls = weights

    loss = w_obj * F.binary_cross_entropy_with_logits(raw[..., 0], obj_t)
    mask = obj_t > 0
    if mask.any():
        pred_box = torch.sigmoid(raw[..., 1:5][mask])
        loss = loss + w_box * F.smooth_l1_loss(pred_box, box_t[mask])
        loss = loss + w_cls * F.cross_entropy(raw[..., 5:][mask], cls_t[mask])
    return loss


# ---------------------------------------------------------------------------
# Persistence


def save_detector(model: GridDetector, path: str | Path, step: int = 0) -> None:
    payload = {
        "config": {
            "k": model.cfg.k,
            "grid": model.cfg.grid,
            "channels": tuple(model.cfg.channels),
            "score_threshold": model.cfg.score_threshold,
            "nms_iou": model.cfg.nms_iou,
        },
        "step": step,
        "state_dict": model.state_dict(),
    }
    torch.save(payload, str(path))


def load_detector(path: str | Path) -> tuple[GridDetector, int]:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    cfg_d = dict(payload["config"])
    cfg_d["channels"] = tuple(cfg_d["channels"])
    model = GridDetector(GridDetectorConfig(**cfg_d))
    model.load_state_dict(payload["state_dict"])
    return model, int(payload["step"])
