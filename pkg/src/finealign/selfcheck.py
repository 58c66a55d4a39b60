"""Quick built-in verification suite.

Each check compares a library function against a small, independent numpy
reference (or a finite-difference estimate) on seeded random inputs. The
``faults`` hook swaps in a deliberately broken backward rule so the suite can
prove it notices.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import diffcore as dc
from . import encoders, losses, regionops
from .curation import iou as lib_iou
from .curation import nms_filter
from .encoders import DualEncoder, TextConfig, VisionConfig, Vocabulary
from .regionops import RegionBox


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.2f}s)"


# -- reference implementations ------------------------------------------------------------


def reference_info_nce(x: np.ndarray, y: np.ndarray, tau: float) -> float:
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    yn = y / np.linalg.norm(y, axis=1, keepdims=True)
    s = xn @ yn.T / tau
    n = len(x)
    total = 0.0
    for i in range(n):
        total += -s[i, i] + math.log(sum(math.exp(v) for v in s[i]))
        total += -s[i, i] + math.log(sum(math.exp(v) for v in s[:, i]))
    return total / (2 * n)


def reference_hard_negative(r: np.ndarray, captions: list[np.ndarray], tau: float) -> float:
    total = 0.0
    for ri, ci in zip(r, captions):
        sims = [float(ri @ c / (np.linalg.norm(ri) * np.linalg.norm(c))) / tau for c in ci]
        total += -sims[0] + math.log(sum(math.exp(v) for v in sims))
    return total / len(r)


def reference_bilinear_pool(grid: np.ndarray, box, samples: int) -> np.ndarray:
    """Average of point samples; each point interpolates its four surrounding token centres."""
    w = grid.shape[0]
    x1, y1, x2, y2 = box
    acc = np.zeros(grid.shape[2])
    for i in range(samples):
        for j in range(samples):
            px = (x1 + (x2 - x1) * (j + 0.5) / samples) * w - 0.5
            py = (y1 + (y2 - y1) * (i + 0.5) / samples) * w - 0.5
            px = min(max(px, 0.0), w - 1.0)
            py = min(max(py, 0.0), w - 1.0)
            x0, y0 = min(int(math.floor(px)), max(w - 2, 0)), min(int(math.floor(py)), max(w - 2, 0))
            fx, fy = px - x0, py - y0
            for dy, wy in ((0, 1 - fy), (1, fy)):
                for dx, wx in ((0, 1 - fx), (1, fx)):
                    if wy * wx == 0.0:
                        continue
                    acc += wy * wx * grid[y0 + dy, x0 + dx]
    return acc / samples**2


def reference_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def reference_nms(boxes: list[RegionBox], gate: float, thresh: float) -> list[int]:
    """Indices kept by greedy suppression, found by scanning a fully sorted list."""
    cand = [i for i, b in enumerate(boxes) if b.confidence > gate]
    cand.sort(key=lambda i: (-boxes[i].confidence, boxes[i].x1, boxes[i].y1, i))
    kept: list[int] = []
    for i in cand:
        if all(reference_iou(boxes[i].coords, boxes[k].coords) <= thresh for k in kept):
            kept.append(i)
    return kept


# -- fault injection --------------------------------------------------------------------------------


@contextlib.contextmanager
def broken_gelu_backward(scale: float = 1.05) -> Iterator[None]:
    """Temporarily make GELU's gradient wrong by a constant factor."""
    original = dc.gelu

    def faulty(a):
        out = original(a)
        if out._backward is not None:
            bw = out._backward
            out._backward = lambda g: tuple(x * scale for x in bw(g))
        return out

    dc.gelu = faulty
    try:
        yield
    finally:
        dc.gelu = original


FAULTS: dict[str, Callable[[], contextlib.AbstractContextManager]] = {"gelu-backward": broken_gelu_backward}


# -- checks ----------------------------------------------------------------------------------------


def tiny_model(seed: int = 0) -> DualEncoder:
    vocab = Vocabulary.build(["red blue square circle striped plain small large"], 16)
    vision = VisionConfig(image_size=8, patch_size=4, embed_dim=8, num_layers=1, num_heads=2, mlp_ratio=2, proj_dim=6)
    text = TextConfig(vocab_size=16, embed_dim=8, num_layers=1, num_heads=2, mlp_ratio=2, proj_dim=6)
    model = DualEncoder.create(vision, text, vocab, seed=seed)
    # move away from the symmetric initialisation so every path has signal
    rng = np.random.default_rng(seed + 1)
    for p in model.params.values():
        if p.data.ndim:
            p.data = p.data + rng.normal(0, 0.1, p.data.shape)
    return model


def full_objective(model: DualEncoder, images: np.ndarray, seed: int = 0) -> Callable[[], dc.Tensor]:
    """Combined global + regional + hard loss through both encoders and region pooling."""
    short = ["a red square", "a blue circle"]
    long = ["a small red striped square", "a large blue plain circle"]
    boxes = [RegionBox(0.0, 0.0, 0.6, 0.7), RegionBox(0.3, 0.2, 1.0, 0.9), RegionBox(0.1, 0.4, 0.8, 1.0)]
    box_image = [0, 0, 1]
    phrases = ["a red square", "a striped square", "a blue circle"]
    negatives = [["a blue square", "a red circle"], ["a plain square"], ["a red circle", "a small circle"]]

    def loss():
        tau = model.temperature_param
        out = model.encode_image(images)
        emb = model.encode_texts(short + long + phrases + [n for ns in negatives for n in ns])
        g = losses.dual_caption_global_loss(out.cls_embedding, emb[:2], emb[2:4], tau)
        regions = regionops.roi_align_batch(out.token_grid, boxes, box_image, 2)
        r = losses.regional_contrastive_loss(regions, emb[4:7], tau)
        cursor, caps = 7, []
        for i, ns in enumerate(negatives):
            rows = [4 + i] + list(range(cursor, cursor + len(ns)))
            cursor += len(ns)
            caps.append(emb[np.array(rows)])
        h = losses.hard_negative_loss(regions, caps, tau)
        return losses.combined_loss(g, r, h)

    return loss


def check_gradients(seed: int = 0, max_entries: int | None = 24) -> tuple[bool, str]:
    model = tiny_model(seed)
    images = np.random.default_rng(seed).normal(0, 0.5, (2, 8, 8, 3))
    err = dc.finite_difference_check(full_objective(model, images, seed), model.params, h=1e-5, max_entries=max_entries, seed=seed)
    return err < 1e-4, f"max relative error {err:.2e}"


def check_losses(seed: int = 0, cases: int = 40) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        n, d = int(rng.integers(1, 9)), int(rng.integers(2, 7))
        tau = float(rng.uniform(0.05, 1.0))
        x, y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        worst = max(worst, abs(float(losses.global_contrastive_loss(x, y, tau).data) - reference_info_nce(x, y, tau)))
        worst = max(worst, abs(float(losses.regional_contrastive_loss(x, y, tau).data) - reference_info_nce(x, y, tau)))
        caps = [rng.normal(size=(int(rng.integers(1, 6)), d)) for _ in range(n)]
        worst = max(worst, abs(float(losses.hard_negative_loss(x, caps, tau).data) - reference_hard_negative(x, caps, tau)))
    two = float(losses.global_contrastive_loss(np.eye(2), np.eye(2), 1.0).data)
    eleven = float(losses.hard_negative_loss(np.eye(11)[:1], [np.eye(11)], 1.0).data)
    ok = worst < 1e-10 and abs(two - 0.3133) < 1e-3 and abs(eleven - 1.543) < 1e-3
    return ok, f"max oracle gap {worst:.1e}; closed forms {two:.4f}, {eleven:.4f}"


def check_roi_align(seed: int = 0, cases: int = 200) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        w, g, d = int(rng.integers(1, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
        grid = rng.normal(size=(w, w, d))
        x = np.sort(rng.uniform(0, 1, 2))
        y = np.sort(rng.uniform(0, 1, 2))
        if x[1] - x[0] < 1e-6 or y[1] - y[0] < 1e-6:
            continue
        box = (x[0], y[0], x[1], y[1])
        got = regionops.roi_align_average(grid, box, g).data
        worst = max(worst, float(np.max(np.abs(got - reference_bilinear_pool(grid, box, g)))))
    grid = rng.normal(size=(4, 4, 3))
    full = regionops.roi_align_average(grid, (0.0, 0.0, 1.0, 1.0), 4).data
    full_gap = float(np.max(np.abs(full - grid.mean(axis=(0, 1)))))
    return worst < 1e-9 and full_gap < 1e-12, f"max oracle gap {worst:.1e}; full-box gap {full_gap:.1e}"


def check_nms(seed: int = 0, cases: int = 500) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(cases):
        boxes = []
        for _ in range(int(rng.integers(0, 9))):
            x = np.sort(rng.uniform(0, 1, 2))
            y = np.sort(rng.uniform(0, 1, 2))
            if x[1] - x[0] < 1e-3 or y[1] - y[0] < 1e-3:
                continue
            conf = float(rng.choice([0.4, 0.5, 0.9, rng.uniform(0, 1)]))
            boxes.append(RegionBox(x[0], y[0], x[1], y[1], conf))
        got = [id(b) for b in nms_filter(boxes)]
        want = [id(boxes[i]) for i in reference_nms(boxes, 0.4, 0.5)]
        mismatches += sorted(got) != sorted(want)
        for a, b in itertools.combinations(boxes[:3], 2):
            mismatches += abs(lib_iou(a, b) - reference_iou(a.coords, b.coords)) > 1e-12
    return mismatches == 0, f"{mismatches} mismatches over {cases} random box sets"


def check_position_extension(seed: int = 0) -> tuple[bool, str]:
    table = np.random.default_rng(seed).normal(size=(77, 5))
    out = encoders.extend_position_embeddings(table)
    ok = out.shape == (248, 5) and np.array_equal(out[:20], table[:20])
    worst = 0.0
    for j in range(228):
        c = min(20 + j / 4, 76.0)
        lo = int(math.floor(c))
        hi = min(lo + 1, 76)
        want = (1 - (c - lo)) * table[lo] + (c - lo) * table[hi]
        if j % 4 == 0 and not np.array_equal(out[20 + j], table[lo]):
            ok = False
        worst = max(worst, float(np.max(np.abs(out[20 + j] - want))))
    return ok and worst < 1e-12, f"shape {out.shape}, max interpolation gap {worst:.1e}"


CHECKS: dict[str, Callable[[int], tuple[bool, str]]] = {
    "gradients": check_gradients,
    "losses": check_losses,
    "roi_align": check_roi_align,
    "nms": check_nms,
    "position_extension": check_position_extension,
}


def run_selfcheck(seed: int = 0, fault: str | None = None) -> list[CheckResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {sorted(FAULTS)}")
    results = []
    ctx = FAULTS[fault]() if fault else contextlib.nullcontext()
    with ctx:
        for name, fn in CHECKS.items():
            t0 = time.perf_counter()
            try:
                ok, detail = fn(seed)
            except Exception as exc:  # a crashing check is a failing check
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results
