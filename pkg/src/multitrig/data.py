"""Synthetic shapes dataset with controllable imbalance, plus COCO-style IO.

Each class is a (shape archetype, palette color) combination drawn on a
textured background; annotations are the tight boxes of the painted
pixels. Class draws follow ``class_frequency``; once an image already
contains objects, later draws are reweighted by the co-existence bias
matrix (``p(c | present) ~ freq[c] * prod_{k present} bias[c, k]``), so a
neutral all-ones bias keeps the instance marginal exactly at
``class_frequency``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import BoundingBox, DetectionRecord, DetectionSet, Rng, iou

SHAPE_ARCHETYPES = ("circle", "square", "triangle", "cross", "diamond", "ring")

PALETTE = (
    (0.90, 0.15, 0.15),
    (0.15, 0.75, 0.20),
    (0.20, 0.30, 0.95),
    (0.95, 0.85, 0.10),
    (0.85, 0.20, 0.85),
    (0.10, 0.85, 0.85),
    (0.95, 0.55, 0.10),
    (0.95, 0.95, 0.95),
)


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class Sample:
    """One image with its ground-truth annotations."""

    id: str
    annotations: DetectionSet
    image: np.ndarray | None = None  # H x W x 3 float32 in [0, 1]; None for label-only loads

    @property
    def image_size(self) -> tuple[int, int]:
        return self.annotations.image_size


@dataclass
class DatasetSpec:
    k: int
    n_images: int
    image_size: tuple[int, int] = (112, 112)
    class_frequency: list[float] | None = None  # None = uniform
    coexist_bias: list[list[float]] | None = None  # None = neutral (all ones)
    objects_per_image: tuple[int, int] = (1, 3)
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise DatasetError(f"class count must be positive, got {self.k}")
        if self.k > len(SHAPE_ARCHETYPES) * len(PALETTE):
            raise DatasetError(
                f"K={self.k} exceeds the {len(SHAPE_ARCHETYPES) * len(PALETTE)} available shape/color combinations"
            )
        if self.class_frequency is not None:
            if len(self.class_frequency) != self.k:
                raise DatasetError("class_frequency length must equal K")
            if abs(sum(self.class_frequency) - 1.0) > 1e-9:
                raise DatasetError("class_frequency must sum to 1")
            if any(f < 0 for f in self.class_frequency):
                raise DatasetError("class_frequency entries must be nonnegative")
        if self.coexist_bias is not None:
            b = np.asarray(self.coexist_bias, dtype=np.float64)
            if b.shape != (self.k, self.k):
                raise DatasetError("coexist_bias must be K x K")
            if np.any(b < 0):
                raise DatasetError("coexist_bias must be nonnegative")
            if not np.allclose(b, b.T):
                raise DatasetError("coexist_bias must be symmetric")
            if not np.allclose(np.diag(b), 1.0):
                raise DatasetError("coexist_bias must have unit diagonal")
        lo, hi = self.objects_per_image
        if not (0 <= lo <= hi):
            raise DatasetError(f"bad objects_per_image range ({lo}, {hi})")

    def frequency(self) -> np.ndarray:
        if self.class_frequency is None:
            return np.full(self.k, 1.0 / self.k)
        return np.asarray(self.class_frequency, dtype=np.float64)

    def bias(self) -> np.ndarray:
        if self.coexist_bias is None:
            return np.ones((self.k, self.k))
        return np.asarray(self.coexist_bias, dtype=np.float64)


@dataclass
class DatasetStats:
    """Instance counts per class and image-level co-existence counts."""

    instance_counts: np.ndarray  # (K,)
    coexistence: np.ndarray  # (K, K); diagonal = images containing the class

    def to_dict(self) -> dict:
        return {
            "instance_counts": self.instance_counts.tolist(),
            "coexistence": self.coexistence.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetStats":
        return cls(
            instance_counts=np.asarray(d["instance_counts"], dtype=np.int64),
            coexistence=np.asarray(d["coexistence"], dtype=np.int64),
        )


def _shape_mask(kind: str, h: int, w: int, cx: float, cy: float, s: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    u = xx + 0.5 - cx
    v = yy + 0.5 - cy
    if kind == "circle":
        return u * u + v * v <= s * s
    if kind == "square":
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if kind == "triangle":
        return (v >= -s) & (v <= s) & (np.abs(u) <= 0.5 * (v + s))
    if kind == "cross":
        arm = s / 3.0
        return ((np.abs(u) <= arm) & (np.abs(v) <= s)) | ((np.abs(v) <= arm) & (np.abs(u) <= s))
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= s
    if kind == "ring":
        d2 = u * u + v * v
        return (d2 <= s * s) & (d2 >= (0.55 * s) ** 2)
    raise DatasetError(f"unknown shape archetype {kind!r}")


def class_appearance(class_id: int) -> tuple[str, tuple[float, float, float]]:
    shape = SHAPE_ARCHETYPES[class_id % len(SHAPE_ARCHETYPES)]
    color = PALETTE[(class_id // len(SHAPE_ARCHETYPES)) % len(PALETTE)]
    return shape, color


def _textured_background(rng: Rng, w: int, h: int) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.55, size=(max(1, h // 8), max(1, w // 8), 3))
    bg = np.kron(coarse, np.ones((8, 8, 1)))[:h, :w, :]
    if bg.shape[:2] != (h, w):  # image smaller than one coarse cell
        pad_h, pad_w = h - bg.shape[0], w - bg.shape[1]
        bg = np.pad(bg, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    bg = bg + rng.uniform(-0.02, 0.02, size=(h, w, 3))
    return np.clip(bg, 0.0, 1.0)


def _draw_sample(spec: DatasetSpec, index: int, rng: Rng) -> Sample:
    w, h = spec.image_size
    freq = spec.frequency()
    bias = spec.bias()
    image = _textured_background(rng, w, h)

    lo, hi = spec.objects_per_image
    n_objects = int(rng.integers(lo, hi + 1)) if hi > lo else lo

    records: list[DetectionRecord] = []
    present: set[int] = set()
    for _ in range(n_objects):
        weights = freq.copy()
        for k in present:
            weights = weights * bias[:, k]
        if weights.sum() <= 0:
            weights = np.ones(spec.k)
        class_id = rng.weighted_index(weights)
        shape, color = class_appearance(class_id)

        s_max = min(0.18 * min(w, h), 0.5 * min(w, h) - 2.0)
        s_min = min(0.09 * min(w, h), s_max)
        if s_max < 1.5:
            raise DatasetError(f"image size {spec.image_size} too small to place shapes")
        placed = None
        for _attempt in range(10):
            s = float(rng.uniform(s_min, s_max))
            cx = float(rng.uniform(s + 1, w - s - 1))
            cy = float(rng.uniform(s + 1, h - s - 1))
            candidate = BoundingBox(cx - s, cy - s, cx + s, cy + s)
            if all(iou(candidate, r.box) < 0.25 for r in records):
                placed = (cx, cy, s)
                break
            placed = placed or (cx, cy, s)  # fall back to the first try if crowded
        cx, cy, s = placed

        mask = _shape_mask(shape, h, w, cx, cy, s)
        if not mask.any():
            continue
        brightness = float(rng.uniform(0.85, 1.0))
        image[mask] = np.clip(np.asarray(color) * brightness, 0.0, 1.0)

        ys, xs = np.nonzero(mask)
        box = BoundingBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
        records.append(DetectionRecord(box=box, class_id=class_id, score=1.0))
        present.add(class_id)

    annotations = DetectionSet(records=tuple(records), image_size=(w, h))
    return Sample(id=f"img_{index:05d}", annotations=annotations, image=image.astype(np.float32))


def generate_dataset(spec: DatasetSpec) -> list[Sample]:
    """Deterministically generate ``spec.n_images`` shape images."""
    root = Rng(spec.seed)
    return [_draw_sample(spec, i, root.child(i)) for i in range(spec.n_images)]


def compute_stats(samples: list[Sample], k: int) -> DatasetStats:
    counts = np.zeros(k, dtype=np.int64)
    coex = np.zeros((k, k), dtype=np.int64)
    for sample in samples:
        for r in sample.annotations:
            if r.class_id >= k:
                raise DatasetError(f"class id {r.class_id} out of range for K={k}")
            counts[r.class_id] += 1
        ids = sorted(sample.annotations.class_ids())
        for i in ids:
            coex[i, i] += 1
            for j in ids:
                if j > i:
                    coex[i, j] += 1
                    coex[j, i] += 1
    return DatasetStats(instance_counts=counts, coexistence=coex)


# ---------------------------------------------------------------------------
# COCO-style annotation IO


def export_coco(samples: list[Sample], class_names: list[str]) -> dict:
    """COCO dict with category ids 1..K (file order defines the remap back)."""
    images = []
    annotations = []
    ann_id = 1
    for idx, sample in enumerate(samples):
        w, h = sample.image_size
        images.append({"id": idx, "file_name": f"{sample.id}.png", "width": w, "height": h})
        for r in sample.annotations:
            x, y, bw, bh = r.box.as_xywh()
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": idx,
                    "category_id": r.class_id + 1,
                    "bbox": [x, y, bw, bh],
                    "area": bw * bh,
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    categories = [{"id": i + 1, "name": name} for i, name in enumerate(class_names)]
    return {"images": images, "annotations": annotations, "categories": categories}


@dataclass
class CocoLoad:
    samples: list[Sample]
    class_names: list[str]
    skipped: int  # records dropped for nonpositive width/height
    category_map: dict[int, int] = field(default_factory=dict)


def load_coco_annotations(path: str | Path, images_dir: str | Path | None = None) -> CocoLoad:
    """Load a COCO-style annotation file.

    Category ids are remapped to contiguous [0, K) following the order of
    the ``categories`` array. Boxes arrive as (x, y, width, height) and are
    converted to corner form; records with nonpositive width or height are
    skipped and counted. When ``images_dir`` is given, PNGs named by
    ``file_name`` are loaded alongside the annotations.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from exc

    for key in ("images", "annotations", "categories"):
        if key not in payload:
            raise DatasetError(f"{path}: missing top-level {key!r} array")

    category_map: dict[int, int] = {}
    class_names: list[str] = []
    for pos, cat in enumerate(payload["categories"]):
        try:
            category_map[int(cat["id"])] = pos
            class_names.append(str(cat.get("name", f"class_{pos}")))
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"{path}: malformed category entry {cat!r}") from exc

    by_image: dict[int, list[DetectionRecord]] = {}
    skipped = 0
    for ann in payload["annotations"]:
        try:
            image_id = int(ann["image_id"])
            x, y, bw, bh = (float(v) for v in ann["bbox"])
            cat = int(ann["category_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: malformed annotation record id={ann.get('id')!r}") from exc
        if cat not in category_map:
            raise DatasetError(f"{path}: annotation id={ann.get('id')!r} references unknown category {cat}")
        if bw <= 0 or bh <= 0:
            skipped += 1
            continue
        record = DetectionRecord(
            box=BoundingBox(x, y, x + bw, y + bh), class_id=category_map[cat], score=1.0
        )
        by_image.setdefault(image_id, []).append(record)

    samples: list[Sample] = []
    for img in payload["images"]:
        try:
            image_id = int(img["id"])
            w, h = int(img["width"]), int(img["height"])
            file_name = str(img.get("file_name", f"{image_id}.png"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: malformed image entry {img!r}") from exc
        image = None
        if images_dir is not None:
            image_path = Path(images_dir) / file_name
            if image_path.exists():
                image = load_image_png(image_path)
        records = tuple(by_image.get(image_id, ()))
        sample_id = file_name.rsplit(".", 1)[0]
        samples.append(
            Sample(id=sample_id, annotations=DetectionSet(records=records, image_size=(w, h)), image=image)
        )
    return CocoLoad(samples=samples, class_names=class_names, skipped=skipped, category_map=category_map)


def save_image_png(image: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(str(path))


def load_image_png(path: str | Path) -> np.ndarray:
    with Image.open(str(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def default_class_names(k: int) -> list[str]:
    names = []
    for c in range(k):
        shape, color = class_appearance(c)
        names.append(f"{shape}_{PALETTE.index(color)}")
    return names


def save_dataset(samples: list[Sample], out_dir: str | Path, k: int, class_names: list[str] | None = None) -> DatasetStats:
    """Write the directory layout: images/ + annotations.json + stats.json."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    names = class_names or default_class_names(k)
    for sample in samples:
        if sample.image is not None:
            save_image_png(sample.image, out_dir / "images" / f"{sample.id}.png")
    coco = export_coco(samples, names)
    (out_dir / "annotations.json").write_text(json.dumps(coco, indent=1, sort_keys=True))
    stats = compute_stats(samples, k)
    (out_dir / "stats.json").write_text(json.dumps(stats.to_dict(), indent=1, sort_keys=True))
    return stats


def load_dataset(dataset_dir: str | Path, with_images: bool = True) -> CocoLoad:
    dataset_dir = Path(dataset_dir)
    images_dir = dataset_dir / "images" if with_images else None
    return load_coco_annotations(dataset_dir / "annotations.json", images_dir=images_dir)


# ---------------------------------------------------------------------------
# COCO-style result dumps (predictions)


def save_detections_json(detections: dict[str, DetectionSet], path: str | Path) -> None:
    rows = []
    for image_id in sorted(detections):
        for r in detections[image_id]:
            x, y, bw, bh = r.box.as_xywh()
            rows.append(
                {
                    "image_id": image_id,
                    "category_id": r.class_id,
                    "bbox": [x, y, bw, bh],
                    "score": r.score,
                }
            )
    Path(path).write_text(json.dumps(rows, indent=1))


def load_detections_json(path: str | Path, image_sizes: dict[str, tuple[int, int]]) -> dict[str, DetectionSet]:
    try:
        rows = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from exc
    grouped: dict[str, list[DetectionRecord]] = {image_id: [] for image_id in image_sizes}
    for row in rows:
        image_id = row["image_id"]
        if image_id not in image_sizes:
            raise DatasetError(f"{path}: result references unknown image {image_id!r}")
        x, y, bw, bh = row["bbox"]
        grouped[image_id].append(
            DetectionRecord(
                box=BoundingBox(x, y, x + bw, y + bh),
                class_id=int(row["category_id"]),
                score=float(row["score"]),
            )
        )
    return {
        image_id: DetectionSet(records=tuple(records), image_size=image_sizes[image_id])
        for image_id, records in grouped.items()
    }
