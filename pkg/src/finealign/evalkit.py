"""Evaluation harnesses: region matching, box classification, retrieval,
zero-shot classification and similarity heatmaps.

Ranking ties always go to the lowest index (``np.argmax`` semantics).
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .curation import atomic_write_bytes, atomic_write_text
from .regionops import dense_tokens, image_dense_tokens, roi_weights
from .toyworld import RegionSample, load_image

TEXT_CHUNK = 256


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, dict[str, float]]
    counts: dict[str, int]
    config: dict = field(default_factory=dict)
    excluded: int = 0

    def __post_init__(self):
        if not self.counts or any(n <= 0 for n in self.counts.values()):
            raise ValueError(f"{self.task}: no samples evaluated")
        for split, values in self.metrics.items():
            for name, v in values.items():
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{self.task}/{split}/{name}={v} outside [0, 1]")

    @property
    def sample_count(self) -> int:
        return sum(self.counts.values())

    def to_text(self) -> str:
        """One JSON object per (split, metric)."""
        lines = []
        for split in sorted(self.metrics):
            for metric in sorted(self.metrics[split]):
                row = {
                    "task": self.task,
                    "split": split,
                    "metric": metric,
                    "value": self.metrics[split][metric],
                    "count": self.counts[split],
                }
                lines.append(json.dumps(row))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        atomic_write_text(path, self.to_text())


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n < 1e-12, 0.0, x / np.where(n < 1e-12, 1.0, n))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _normalize_rows(np.asarray(a, float)) @ _normalize_rows(np.asarray(b, float)).T


def encode_texts(model, texts: Sequence[str]) -> np.ndarray:
    frozen = model.frozen()
    chunks = [frozen.encode_texts(texts[i : i + TEXT_CHUNK]).data for i in range(0, len(texts), TEXT_CHUNK)]
    return np.concatenate(chunks) if chunks else np.zeros((0, model.text_config.proj_dim))


def encode_images(model, images: np.ndarray, chunk: int = 64, grid: str = "dense"):
    """Global embeddings and token grids for a stack of images.

    ``grid="dense"`` returns value-only last-block features; ``"tokens"`` the
    ordinary output tokens (what regional training pools over).
    """
    if grid not in ("dense", "tokens"):
        raise ValueError(f"grid must be 'dense' or 'tokens', got {grid!r}")
    frozen = model.frozen()
    cls, grids = [], []
    for i in range(0, len(images), chunk):
        out = frozen.encode_image(images[i : i + chunk])
        cls.append(out.cls_embedding.data)
        if grid == "dense":
            grids.append(dense_tokens(frozen, out.caches["final_block_input"]).data)
        else:
            grids.append(out.token_grid.data)
    return np.concatenate(cls), np.concatenate(grids)


# -- metric cores (embedding level) --------------------------------------------------------------


def candidate_top1(region_features: np.ndarray, candidates: Sequence[np.ndarray]) -> np.ndarray:
    """For each region, whether candidate 0 (the positive) has the highest cosine similarity."""
    hits = np.zeros(len(candidates), dtype=bool)
    for i, (r, c) in enumerate(zip(region_features, candidates)):
        hits[i] = int(np.argmax(cosine_matrix(r[None], c)[0])) == 0
    return hits


def topk_hits(sim: np.ndarray, gold: np.ndarray, k: int) -> np.ndarray:
    """Whether ``gold[i]`` is among the ``k`` highest entries of row ``i`` (stable, low index first)."""
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    return (order == np.asarray(gold)[:, None]).any(axis=1)


def retrieval_recall(image_emb, text_emb, pairing: Sequence[int] | None = None) -> EvalReport:
    """I2T and T2I Recall@1; image ``i`` is paired with text ``pairing[i]`` (identity by default)."""
    image_emb, text_emb = np.asarray(image_emb, float), np.asarray(text_emb, float)
    if len(image_emb) != len(text_emb):
        raise ValueError(f"{len(image_emb)} images vs {len(text_emb)} texts")
    n = len(image_emb)
    pairing = np.arange(n) if pairing is None else np.asarray(pairing)
    if sorted(pairing.tolist()) != list(range(n)):
        raise ValueError("pairing must be a bijection")
    sim = cosine_matrix(image_emb, text_emb)
    i2t = float(np.mean(sim.argmax(axis=1) == pairing))
    inverse = np.argsort(pairing)
    t2i = float(np.mean(sim.argmax(axis=0) == inverse))
    return EvalReport("retrieval", {"all": {"i2t_r1": i2t, "t2i_r1": t2i}}, {"all": n})


def unique_caption_groups(captions: Sequence[str]) -> list[list[int]]:
    """Split indices into groups in which every caption is distinct.

    Retrieval with repeated captions is ill-posed (identical texts tie); the
    k-th occurrence of every caption goes into group k.
    """
    seen: dict[str, int] = defaultdict(int)
    groups: list[list[int]] = []
    for i, c in enumerate(captions):
        k = seen[c]
        seen[c] += 1
        if k == len(groups):
            groups.append([])
        groups[k].append(i)
    return groups


def grouped_retrieval(image_emb, text_emb, groups: Sequence[Sequence[int]], task: str = "retrieval") -> EvalReport:
    """Recall@1 averaged over groups (weighted by group size)."""
    image_emb, text_emb = np.asarray(image_emb), np.asarray(text_emb)
    i2t = t2i = 0.0
    total = 0
    for g in groups:
        g = list(g)
        rep = retrieval_recall(image_emb[g], text_emb[g])
        i2t += rep.metrics["all"]["i2t_r1"] * len(g)
        t2i += rep.metrics["all"]["t2i_r1"] * len(g)
        total += len(g)
    return EvalReport(task, {"all": {"i2t_r1": i2t / total, "t2i_r1": t2i / total}}, {"all": total})


# -- model-level harnesses ----------------------------------------------------------------------------


def _load_unique_images(sources: Sequence, image_root=None):
    keys, index, images = {}, [], []
    for src in sources:
        key = json.dumps(src, sort_keys=True) if isinstance(src, dict) else str(src)
        if key not in keys:
            keys[key] = len(images)
            images.append(load_image(src, image_root))
        index.append(keys[key])
    return np.stack(images), np.array(index)


def pooled_region_features(
    model, sources, boxes, samples_per_axis: int = 3, image_root=None, grid: str = "dense"
) -> np.ndarray:
    """RoIAlign-averaged token features, one row per (image source, box)."""
    images, index = _load_unique_images(sources, image_root)
    _, dense = encode_images(model, images, grid=grid)
    w = dense.shape[1]
    out = np.empty((len(boxes), dense.shape[-1]))
    for k, (box, img) in enumerate(zip(boxes, index)):
        out[k] = roi_weights(box, w, samples_per_axis) @ dense[img].reshape(w * w, -1)
    return out


def fgovd_accuracy(
    model, samples: Sequence[RegionSample], samples_per_axis: int = 3, image_root=None, grid: str = "dense"
) -> EvalReport:
    """Top-1 accuracy of picking the positive caption among 1 + negatives, per difficulty split."""
    usable = [s for s in samples if s.negatives]
    excluded = len(samples) - len(usable)
    if not usable:
        raise ValueError("no region with negatives to evaluate")
    feats = pooled_region_features(
        model, [s.image_source for s in usable], [s.box for s in usable], samples_per_axis, image_root, grid
    )
    texts = sorted({t for s in usable for t in [s.positive, *s.negatives]})
    lookup = {t: i for i, t in enumerate(texts)}
    emb = encode_texts(model, texts)
    candidates = [emb[[lookup[t] for t in [s.positive, *s.negatives]]] for s in usable]
    hits = candidate_top1(feats, candidates)
    by_split: dict[str, list[bool]] = defaultdict(list)
    for s, h in zip(usable, hits):
        by_split[s.split].append(bool(h))
    metrics = {k: {"top1": float(np.mean(v))} for k, v in sorted(by_split.items())}
    counts = {k: len(v) for k, v in sorted(by_split.items())}
    return EvalReport("fgovd", metrics, counts, {"samples_per_axis": samples_per_axis, "grid": grid}, excluded)


def _check_categories(names: Sequence[str], gold: Sequence[str]):
    if len(names) < 2:
        raise ValueError("need at least two categories")
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if list(names).count(n) > 1})
        raise ValueError(f"duplicate category names: {dupes}")
    index = {n: i for i, n in enumerate(names)}
    missing = sorted({g for g in gold if g not in index})
    if missing:
        raise ValueError(f"gold labels not among categories: {missing}")
    return np.array([index[g] for g in gold])


def classification_report(task: str, sim: np.ndarray, gold_idx: np.ndarray, topk=(1, 5)) -> EvalReport:
    metrics = {f"top{k}": float(np.mean(topk_hits(sim, gold_idx, k))) for k in topk}
    return EvalReport(task, {"all": metrics}, {"all": len(gold_idx)})


def bbox_classification(
    model,
    sources,
    boxes,
    gold_labels: Sequence[str],
    category_names: Sequence[str],
    samples_per_axis: int = 3,
    image_root=None,
    grid: str = "dense",
) -> EvalReport:
    """Classify each box's pooled feature against every category name."""
    gold = _check_categories(category_names, gold_labels)
    feats = pooled_region_features(model, sources, boxes, samples_per_axis, image_root, grid)
    sim = cosine_matrix(feats, encode_texts(model, list(category_names)))
    return classification_report("bbox_classification", sim, gold)


def zero_shot_classification(model, images: np.ndarray, class_names: Sequence[str], gold_labels: Sequence[str]) -> EvalReport:
    """Nearest class name to each whole-image embedding; reports Top-1."""
    if len(class_names) == 1 and all(g == class_names[0] for g in gold_labels):
        return EvalReport("zero_shot", {"all": {"top1": 1.0}}, {"all": len(gold_labels)})
    gold = _check_categories(class_names, gold_labels)
    cls, _ = encode_images(model, np.asarray(images))
    sim = cosine_matrix(cls, encode_texts(model, list(class_names)))
    return classification_report("zero_shot", sim, gold, topk=(1,))


# -- heatmaps --------------------------------------------------------------------------------------


def similarity_grid(token_grid: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Per-token cosine similarity to ``query``, min-max scaled to [0, 1] (flat grids map to 0.5)."""
    w = token_grid.shape[0]
    sim = cosine_matrix(token_grid.reshape(w * w, -1), query[None])[:, 0].reshape(w, w)
    lo, hi = sim.min(), sim.max()
    if hi - lo < 1e-12:
        return np.full_like(sim, 0.5)
    return (sim - lo) / (hi - lo)


def write_heatmap(grid: np.ndarray, path_prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.txt`` (6-decimal rows) and ``<prefix>.pgm`` (binary 8-bit graymap)."""
    prefix = Path(path_prefix)
    txt = prefix.parent / f"{prefix.name}.txt"
    pgm = prefix.parent / f"{prefix.name}.pgm"
    text = "".join(" ".join(f"{v:.6f}" for v in row) + "\n" for row in grid)
    h, w = grid.shape
    pixels = np.clip(np.rint(grid * 255), 0, 255).astype(np.uint8)
    atomic_write_text(txt, text)
    atomic_write_bytes(pgm, f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return txt, pgm


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    # four header tokens, then exactly one whitespace byte before the raster
    # (pixel bytes may themselves look like whitespace, so no split() on the body)
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(blob) and not blob[end : end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError("not a binary graymap")
    w, h = int(fields[1]), int(fields[2])
    raster = blob[pos + 1 : pos + 1 + w * h]
    if len(raster) != w * h:
        raise ValueError("graymap raster truncated")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w)


def emit_similarity_heatmap(model, image, query: str, path_prefix) -> np.ndarray:
    dense = image_dense_tokens(model.frozen(), np.asarray(image)).data
    q = encode_texts(model, [query])[0]
    grid = similarity_grid(dense, q)
    write_heatmap(grid, path_prefix)
    return grid
