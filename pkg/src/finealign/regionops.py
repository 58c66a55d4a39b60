"""Region features from the vision token grid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor
from .encoders import transformer_block


class DegenerateBoxError(ValueError):
    pass


@dataclass
class RegionBox:
    x1: float
    y1: float
    x2: float
    y2: float
    confidence: float = 1.0
    positive_caption: str = ""
    negative_captions: list[str] = field(default_factory=list)

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"box ({self.x1}, {self.y1}, {self.x2}, {self.y2}) has no area")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if len(self.negative_captions) > 10:
            raise ValueError(f"{len(self.negative_captions)} negatives; at most 10 allowed")

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def _axis_weights(lo: float, hi: float, grid: int, samples: int) -> np.ndarray:
    """(samples, grid) bilinear weights along one axis.

    Sample ``i`` sits at ``lo + (hi - lo) * (i + 0.5) / samples`` in normalised
    coordinates; token ``u`` is centred at ``(u + 0.5) / grid``. Positions are
    clamped to the hull of token centres.
    """
    t = (np.arange(samples) + 0.5) / samples
    pos = (lo + (hi - lo) * t) * grid - 0.5
    snapped = np.round(pos)
    pos = np.where(np.abs(pos - snapped) < 1e-9, snapped, pos)
    pos = np.clip(pos, 0.0, grid - 1)
    left = np.minimum(np.floor(pos).astype(np.int64), max(grid - 2, 0))
    frac = pos - left
    w = np.zeros((samples, grid))
    rows = np.arange(samples)
    w[rows, left] += 1.0 - frac
    if grid > 1:
        w[rows, left + 1] += frac
    return w


def roi_weights(box, grid: int, samples_per_axis: int = 3) -> np.ndarray:
    """Weights over the flattened ``grid x grid`` tokens whose dot product with
    the tokens is the RoIAlign-then-average feature of ``box``."""
    if grid < 1 or samples_per_axis < 1:
        raise ValueError("grid and samples_per_axis must be >= 1")
    x1, y1, x2, y2 = box.coords if isinstance(box, RegionBox) else box
    x1, x2 = np.clip([x1, x2], 0.0, 1.0)
    y1, y2 = np.clip([y1, y2], 0.0, 1.0)
    if not (x2 > x1 and y2 > y1):
        raise DegenerateBoxError(f"box {tuple(box.coords if isinstance(box, RegionBox) else box)} has zero area")
    wy = _axis_weights(y1, y2, grid, samples_per_axis).sum(axis=0)
    wx = _axis_weights(x1, x2, grid, samples_per_axis).sum(axis=0)
    # one division keeps the full-box weights at exactly 1/grid^2 (0.2 * 0.2 != 1/25)
    return np.outer(wy, wx).reshape(-1) / samples_per_axis**2


def roi_align_average(token_grid: Tensor, box, samples_per_axis: int = 3) -> Tensor:
    """Mean of ``G x G`` bilinear samples of a (W, W, d) token grid inside ``box``."""
    token_grid = dc.as_tensor(token_grid)
    if token_grid.ndim != 3 or token_grid.shape[0] != token_grid.shape[1]:
        raise ShapeError("roi_align_average", token_grid.shape, detail="expected (W, W, d)")
    w = token_grid.shape[0]
    weights = roi_weights(box, w, samples_per_axis)
    flat = dc.reshape(token_grid, (w * w, token_grid.shape[2]))
    return dc.reshape(dc.matmul(Tensor(weights[None]), flat), (token_grid.shape[2],))


def roi_align_batch(token_grids: Tensor, boxes, image_index, samples_per_axis: int = 3) -> Tensor:
    """Pool many boxes at once from a (B, W, W, d) batch; returns (K, d).

    ``image_index[k]`` names the image box ``k`` belongs to.
    """
    b, w, w2, d = token_grids.shape
    if w != w2:
        raise ShapeError("roi_align_batch", token_grids.shape, detail="grid must be square")
    weights = np.zeros((len(boxes), b * w * w))
    for k, (box, img) in enumerate(zip(boxes, image_index)):
        weights[k, img * w * w : (img + 1) * w * w] = roi_weights(box, w, samples_per_axis)
    flat = dc.reshape(token_grids, (b * w * w, d))
    return dc.matmul(Tensor(weights), flat)


def dense_tokens(model, cached_final_block_input: Tensor | None) -> Tensor:
    """Per-token features with the last block's token mixing removed.

    The final transformer block is re-run with every token routed only through
    its own value and output projections, then the feed-forward path, the
    final layer norm and the projection. The class token is dropped; the
    result is (W, W, d), or (B, W, W, d) for a batched cache.
    """
    if cached_final_block_input is None:
        raise ValueError("no final-block cache; run encode_image first")
    cfg = model.vision_config
    x = cached_final_block_input
    single = x.ndim == 2
    if single:
        x = dc.reshape(x, (1,) + x.shape)
    if x.shape[1] != 1 + cfg.grid**2:
        raise ShapeError("dense_tokens", x.shape, detail=f"expected {1 + cfg.grid ** 2} tokens")
    y = transformer_block(
        x, model.params, f"vision.block{cfg.num_layers - 1}", cfg.num_heads, self_only=True
    )
    out = model.vision_head(y)[:, 1:]
    out = dc.reshape(out, (x.shape[0], cfg.grid, cfg.grid, cfg.proj_dim))
    return out[0] if single else out


def image_dense_tokens(model, images) -> Tensor:
    return dense_tokens(model, model.encode_image(images).caches["final_block_input"])
