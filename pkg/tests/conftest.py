import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from multitrig.core import BoundingBox, DetectionRecord, DetectionSet

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


IMG_W, IMG_H = 64, 64


@st.composite
def boxes(draw, w=IMG_W, h=IMG_H, integer=False):
    if integer:
        x0 = draw(st.integers(0, w - 2))
        y0 = draw(st.integers(0, h - 2))
        x1 = draw(st.integers(x0 + 1, w - 1))
        y1 = draw(st.integers(y0 + 1, h - 1))
        return BoundingBox(float(x0), float(y0), float(x1), float(y1))
    x0 = draw(st.floats(0, w - 2, allow_nan=False))
    y0 = draw(st.floats(0, h - 2, allow_nan=False))
    bw = draw(st.floats(0.5, w - x0 - 0.25, allow_nan=False))
    bh = draw(st.floats(0.5, h - y0 - 0.25, allow_nan=False))
    return BoundingBox(x0, y0, x0 + bw, y0 + bh)


@st.composite
def records(draw, k=4, scored=False, **box_kwargs):
    box = draw(boxes(**box_kwargs))
    class_id = draw(st.integers(0, k - 1))
    score = draw(st.floats(0.3, 1.0, allow_nan=False)) if scored else 1.0
    return DetectionRecord(box=box, class_id=class_id, score=float(score))


@st.composite
def detection_sets(draw, k=4, max_records=6, scored=False):
    n = draw(st.integers(0, max_records))
    recs = tuple(draw(records(k=k, scored=scored)) for _ in range(n))
    return DetectionSet(records=recs, image_size=(IMG_W, IMG_H))


def as_tuples(ds: DetectionSet):
    """Package DetectionSet -> the plain-tuple form the oracles consume."""
    return [(r.box.as_tuple(), r.class_id, r.score) for r in ds]


def random_detection_set(gen: np.random.Generator, k=4, max_records=6, w=IMG_W, h=IMG_H, scored=True) -> DetectionSet:
    n = int(gen.integers(0, max_records + 1))
    recs = []
    for _ in range(n):
        x0 = float(gen.uniform(0, w - 4))
        y0 = float(gen.uniform(0, h - 4))
        bw = float(gen.uniform(2, w - x0 - 1))
        bh = float(gen.uniform(2, h - y0 - 1))
        score = float(gen.uniform(0.3, 1.0)) if scored else 1.0
        recs.append(
            DetectionRecord(
                box=BoundingBox(x0, y0, x0 + bw, y0 + bh),
                class_id=int(gen.integers(0, k)),
                score=score,
            )
        )
    return DetectionSet(records=tuple(recs), image_size=(w, h))


@pytest.fixture(scope="session")
def tiny_dataset():
    from multitrig.data import DatasetSpec, compute_stats, generate_dataset

    spec = DatasetSpec(k=4, n_images=24, image_size=(64, 64), seed=11)
    samples = generate_dataset(spec)
    return samples, compute_stats(samples, spec.k), spec
