"""Procedurally rendered scenes of coloured, patterned shapes.

Images are described by small JSON-able specs (``{"kind": "toy", ...}``) and
rendered deterministically, so dataset files stay tiny and reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .curation import (
    AttributeLexicon,
    DatasetRecord,
    InsufficientAttributesError,
    derive_seed,
    generate_hard_negatives,
)
from .regionops import RegionBox

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.1),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "purple": (0.6, 0.1, 0.8),
    "cyan": (0.1, 0.9, 0.9),
    "orange": (1.0, 0.55, 0.0),
    "white": (0.95, 0.95, 0.95),
}
PATTERNS = ("plain", "striped", "dotted", "checkered")
SHAPES = ("square", "circle", "triangle", "cross")
SIZES = ("small", "large")

# eight single-object concepts; each colour appears twice, once plain and once striped
CONCEPTS = (
    ("red", "plain", "square"),
    ("red", "striped", "circle"),
    ("green", "plain", "triangle"),
    ("green", "striped", "cross"),
    ("blue", "plain", "circle"),
    ("blue", "striped", "square"),
    ("yellow", "plain", "cross"),
    ("yellow", "striped", "triangle"),
)
_CONCEPT_LONG = {
    "square": "with four straight edges",
    "circle": "with a round outline",
    "triangle": "with three pointed corners",
    "cross": "with two crossing bars",
}

# colour of the "off" pixels of each pattern; distinct tones keep patterns separable at 8x8 patches
_PATTERN_OFF = {
    "plain": np.zeros(3),
    "striped": np.full(3, 0.8),
    "dotted": np.full(3, 0.45),
    "checkered": np.zeros(3),
}

DIFFICULTY_SPLITS = {1: "hard", 2: "medium", 3: "easy"}


def toy_lexicon() -> AttributeLexicon:
    return AttributeLexicon(
        attributes={"color": list(COLORS), "pattern": list(PATTERNS), "size": list(SIZES)},
        nouns=set(SHAPES),
        determiners={"a", "an", "the"},
    )


# -- rendering ------------------------------------------------------------------------------


def _shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    if shape == "square":
        return np.ones((h, w), bool)
    if shape == "circle":
        return (yy - cy) ** 2 / (h / 2) ** 2 + (xx - cx) ** 2 / (w / 2) ** 2 <= 1.0
    if shape == "triangle":
        half = (yy + 1) / h * (w / 2)
        return np.abs(xx - cx) <= half
    if shape == "cross":
        return (np.abs(yy - cy) <= h / 6) | (np.abs(xx - cx) <= w / 6)
    raise ValueError(f"unknown shape {shape!r}")


def _pattern_mask(pattern: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if pattern == "plain":
        return np.ones((h, w), bool)
    if pattern == "striped":
        return (yy // 2) % 2 == 0
    if pattern == "dotted":
        return (yy % 3 != 2) & (xx % 3 != 2) & ((yy // 3 + xx // 3) % 2 == 0)
    if pattern == "checkered":
        return ((yy // 3) + (xx // 3)) % 2 == 0
    raise ValueError(f"unknown pattern {pattern!r}")


def render(spec: dict) -> np.ndarray:
    """(S, S, 3) float image centred around zero."""
    if spec.get("kind") != "toy":
        raise ValueError(f"unsupported image spec kind {spec.get('kind')!r}")
    size = int(spec.get("size", 32))
    rng = np.random.default_rng(int(spec.get("seed", 0)))
    img = np.full((size, size, 3), 0.15) + rng.normal(0.0, float(spec.get("noise", 0.03)), (size, size, 3))
    for obj in spec.get("objects", []):
        x1, y1, x2, y2 = obj["box"]
        px1, py1 = int(round(x1 * size)), int(round(y1 * size))
        px2, py2 = int(round(x2 * size)), int(round(y2 * size))
        h, w = py2 - py1, px2 - px1
        if h <= 0 or w <= 0:
            continue
        mask = _shape_mask(obj["shape"], h, w)
        pattern = obj.get("pattern", "plain")
        on = _pattern_mask(pattern, h, w)
        color = np.array(COLORS[obj["color"]])
        patch = img[py1:py2, px1:px2]
        fill = np.where(on[..., None], color, _PATTERN_OFF[pattern])
        patch[mask] = fill[mask]
    return np.clip(img, 0.0, 1.0) - 0.5


def load_image(source, root: str | Path | None = None) -> np.ndarray:
    if isinstance(source, dict):
        return render(source)
    path = Path(source)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    if path.suffix != ".npy":
        raise ValueError(f"unsupported image file {path} (expected .npy)")
    return np.load(path).astype(np.float64)


# -- datasets ------------------------------------------------------------------------------------


def _jitter_box(rng, cx, cy, extent, size=32):
    half = extent / 2
    x1 = np.clip(cx - half, 0, 1 - extent)
    y1 = np.clip(cy - half, 0, 1 - extent)
    snap = lambda v: round(v * size) / size  # noqa: E731
    return [snap(x1), snap(y1), snap(x1 + extent), snap(y1 + extent)]


def concept_dataset(per_concept: int = 64, seed: int = 0, size: int = 32) -> list[DatasetRecord]:
    """Single-object images of the eight :data:`CONCEPTS`, concept-major order."""
    rng = np.random.default_rng(seed)
    records = []
    for ci, (color, pattern, shape) in enumerate(CONCEPTS):
        for n in range(per_concept):
            extent = rng.uniform(0.55, 0.8)
            cx, cy = rng.uniform(0.35, 0.65, size=2)
            box = _jitter_box(rng, cx, cy, extent, size)
            spec = {
                "kind": "toy",
                "size": size,
                "seed": int(rng.integers(2**31)),
                "noise": 0.03,
                "objects": [{"shape": shape, "color": color, "pattern": pattern, "box": box}],
            }
            records.append(
                DatasetRecord(
                    image_id=f"concept{ci}-{n:03d}",
                    image_source=spec,
                    short_caption=f"a {color} {pattern} {shape}",
                    long_caption=(
                        f"a picture of one {color} {shape} {_CONCEPT_LONG[shape]} "
                        f"and a {pattern} surface on a dark background"
                    ),
                    regions=[RegionBox(*box, 1.0, f"a {color} {pattern} {shape}", [])],
                )
            )
    return records


def concept_of(record: DatasetRecord) -> int:
    return int(record.image_id.split("-")[0].removeprefix("concept"))


_QUADRANTS = ((0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5))
_QUADRANT_NAMES = ("top left", "top right", "bottom left", "bottom right")


def region_caption(obj: dict) -> str:
    # size is rendered but not named: pooled features at a 4x4 token grid barely resolve it
    return f"a {obj['color']} {obj['pattern']} {obj['shape']}"


def scene_dataset(
    n_images: int,
    seed: int = 0,
    size: int = 32,
    lexicon: AttributeLexicon | None = None,
    difficulty: int = 1,
    negatives: int = 10,
    prefix: str = "scene",
    min_objects: int = 2,
) -> list[DatasetRecord]:
    """Multi-object scenes, one object per occupied quadrant, with region captions
    and seeded attribute-swap negatives."""
    lexicon = lexicon or toy_lexicon()
    rng = np.random.default_rng(seed)
    colors = list(COLORS)
    records = []
    for n in range(n_images):
        k = int(rng.integers(min_objects, 5))
        quads = sorted(rng.choice(4, size=k, replace=False))
        objects = []
        for q in quads:
            scale = SIZES[int(rng.integers(2))]
            extent = 0.4 if scale == "large" else 0.25
            qx, qy = _QUADRANTS[q]
            cx = qx + 0.25 + rng.uniform(-0.03, 0.03)
            cy = qy + 0.25 + rng.uniform(-0.03, 0.03)
            box = _jitter_box(rng, cx, cy, extent, size)
            objects.append(
                {
                    "shape": SHAPES[int(rng.integers(len(SHAPES)))],
                    "color": colors[int(rng.integers(len(colors)))],
                    "pattern": PATTERNS[int(rng.integers(len(PATTERNS)))],
                    "scale": scale,
                    "box": box,
                }
            )
        spec = {"kind": "toy", "size": size, "seed": int(rng.integers(2**31)), "noise": 0.03, "objects": objects}
        image_id = f"{prefix}{n:05d}"
        regions = []
        for j, obj in enumerate(objects):
            cap = region_caption(obj)
            try:
                negs = list(generate_hard_negatives(cap, lexicon, negatives, difficulty, derive_seed(seed, image_id, j)))
            except InsufficientAttributesError:
                negs = []
            regions.append(RegionBox(*obj["box"], 1.0, cap, negs))
        short = " and ".join(f"a {o['color']} {o['shape']}" for o in objects)
        long = " ".join(
            f"{region_caption(o)} in the {_QUADRANT_NAMES[q]}" for o, q in zip(objects, quads)
        )
        records.append(DatasetRecord(image_id, spec, short, f"a scene showing {long}", regions))
    return records


# -- benchmarks ---------------------------------------------------------------------------------


@dataclass
class RegionSample:
    """One region of one image with its candidate captions (positive first)."""

    image_id: str
    image_source: dict | str
    box: RegionBox
    positive: str
    negatives: list[str]
    split: str


def difficulty_samples(
    records: list[DatasetRecord],
    lexicon: AttributeLexicon,
    seed: int = 0,
    negatives: int = 10,
) -> list[RegionSample]:
    """Region matching samples for every region and difficulty level the caption supports.

    Difficulty 1/2/3 (``hard``/``medium``/``easy``) replaces that many attribute words.
    """
    samples = []
    for rec in records:
        for j, box in enumerate(rec.regions):
            if not box.positive_caption:
                continue
            for difficulty, split in DIFFICULTY_SPLITS.items():
                try:
                    negs = generate_hard_negatives(
                        box.positive_caption, lexicon, negatives, difficulty, derive_seed(seed, rec.image_id, j, split)
                    )
                except InsufficientAttributesError:
                    continue
                samples.append(RegionSample(rec.image_id, rec.image_source, box, box.positive_caption, list(negs), split))
    return samples


def fgovd_benchmark(
    records: list[DatasetRecord],
    seed: int = 0,
    lexicon: AttributeLexicon | None = None,
    negatives: int = 10,
) -> list[RegionSample]:
    """Difficulty-stratified splits plus a ``trivial`` split whose negatives
    describe objects of a different shape."""
    lexicon = lexicon or toy_lexicon()
    samples = difficulty_samples(records, lexicon, seed, negatives)
    rng = np.random.default_rng(seed)
    for rec in records:
        for box in rec.regions:
            noun = box.positive_caption.split()[-1]
            trivial: list[str] = []
            while len(trivial) < negatives:
                obj = {
                    "color": list(COLORS)[int(rng.integers(len(COLORS)))],
                    "pattern": PATTERNS[int(rng.integers(len(PATTERNS)))],
                    "shape": [s for s in SHAPES if s != noun][int(rng.integers(len(SHAPES) - 1))],
                }
                cap = region_caption(obj)
                if cap not in trivial:
                    trivial.append(cap)
            samples.append(RegionSample(rec.image_id, rec.image_source, box, box.positive_caption, trivial, "trivial"))
    return samples


def raw_scene_records(records: list[DatasetRecord], seed: int = 0) -> list[dict]:
    """Uncurated versions of scene records, as a detector plus captioner would emit them.

    Region captions are blanked (each box points into the de-duplicated list
    of phrases in the long caption with ``expression_index``), every box gets a lower-confidence near-duplicate,
    and one low-confidence distractor box is added per image.
    """
    rng = np.random.default_rng(seed)
    out = []
    for rec in records:
        regions = []
        phrases = list(dict.fromkeys(b.positive_caption.lower() for b in rec.regions))
        for box in rec.regions:
            j = phrases.index(box.positive_caption.lower())
            conf = round(float(rng.uniform(0.6, 0.99)), 3)
            regions.append({"x1": box.x1, "y1": box.y1, "x2": box.x2, "y2": box.y2, "confidence": conf, "expression_index": j})
            dx = 0.01
            regions.append(
                {
                    "x1": min(box.x1 + dx, box.x2 - dx),
                    "y1": box.y1,
                    "x2": min(box.x2 + dx, 1.0),
                    "y2": box.y2,
                    "confidence": round(conf - 0.05, 3),
                    "expression_index": j,
                }
            )
        regions.append({"x1": 0.4, "y1": 0.4, "x2": 0.6, "y2": 0.6, "confidence": 0.35, "expression_index": 0})
        out.append(
            {
                "image_id": rec.image_id,
                "image_source": rec.image_source,
                "short_caption": rec.short_caption,
                "long_caption": rec.long_caption,
                "regions": regions,
            }
        )
    return out


def box_category(caption: str) -> str:
    """Category name of a toy region caption: ``"a red striped square"`` -> ``"red square"``."""
    words = caption.split()
    return f"{words[1]} {words[-1]}"


def box_categories() -> list[str]:
    return [f"{c} {s}" for c in COLORS for s in SHAPES]
