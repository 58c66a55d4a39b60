"""Global, regional and hard-negative contrastive objectives.

All losses take a ``temperature`` that is either a plain float tau or the
learnable log-inverse-temperature Tensor. In both cases tau is clamped to
``[TAU_MIN, TAU_MAX]`` where it is used.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor

TAU_MIN = 0.01
TAU_MAX = 1.0
_MASKED = -1e9


class LossConfigError(ValueError):
    pass


def inverse_temperature(temperature) -> Tensor:
    if isinstance(temperature, Tensor):
        return dc.exp(dc.clip(temperature, math.log(1.0 / TAU_MAX), math.log(1.0 / TAU_MIN)))
    tau = min(max(float(temperature), TAU_MIN), TAU_MAX)
    return Tensor(1.0 / tau)


def tau_value(temperature) -> float:
    return 1.0 / float(inverse_temperature(temperature).data)


def cosine_similarity(a, b) -> Tensor:
    """(N, d) x (M, d) -> (N, M) matrix of cosine similarities."""
    a, b = dc.as_tensor(a), dc.as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    return dc.matmul(dc.l2_normalize(a, axis=1), dc.transpose(dc.l2_normalize(b, axis=1)))


def _symmetric_info_nce(x: Tensor, y: Tensor, temperature) -> Tensor:
    n = x.shape[0]
    logits = dc.mul(cosine_similarity(x, y), inverse_temperature(temperature))
    eye = np.eye(n)
    rows = dc.tsum(dc.mul(dc.log_softmax(logits, axis=1), eye))
    cols = dc.tsum(dc.mul(dc.log_softmax(logits, axis=0), eye))
    return dc.mul(dc.add(rows, cols), -1.0 / (2 * n))


def global_contrastive_loss(v, t, temperature) -> Tensor:
    """Symmetric InfoNCE between N image embeddings and their N paired captions."""
    v, t = dc.as_tensor(v), dc.as_tensor(t)
    if v.ndim != 2 or v.shape != t.shape:
        raise ShapeError("global_contrastive_loss", v.shape, t.shape)
    if v.shape[0] == 0:
        raise ValueError("global_contrastive_loss needs at least one pair")
    return _symmetric_info_nce(v, t, temperature)


def dual_caption_global_loss(v, t_short, t_long, temperature) -> Tensor:
    """Global loss against short captions plus the same loss against long captions."""
    return dc.add(
        global_contrastive_loss(v, t_short, temperature),
        global_contrastive_loss(v, t_long, temperature),
    )


def _empty(term: str) -> Tensor:
    out = Tensor(0.0)
    out.meta["empty"] = True
    out.meta["term"] = term
    return out


def regional_contrastive_loss(r, l, temperature) -> Tensor:
    """Symmetric InfoNCE over all K region/phrase pairs pooled across the batch.

    With no regions the result is 0 with ``meta["empty"]`` set.
    """
    r, l = dc.as_tensor(r), dc.as_tensor(l)
    if r.ndim != 2 or r.shape != l.shape:
        raise ShapeError("regional_contrastive_loss", r.shape, l.shape)
    if r.shape[0] == 0:
        return _empty("regional")
    return _symmetric_info_nce(r, l, temperature)


def hard_negative_loss(r, captions, temperature, mask: np.ndarray | None = None) -> Tensor:
    """Cross-entropy of each region against its own candidate captions, positive first.

    ``captions`` is (K, M, d) with an optional (K, M) validity ``mask``, or a
    list of K tensors of shape (M_k, d).
    """
    r = dc.as_tensor(r)
    if isinstance(captions, (list, tuple)):
        return _hard_negative_ragged(r, captions, temperature)
    captions = dc.as_tensor(captions)
    if r.ndim != 2 or captions.ndim != 3 or captions.shape[0] != r.shape[0] or captions.shape[2] != r.shape[1]:
        raise ShapeError("hard_negative_loss", r.shape, captions.shape)
    k, m, _ = captions.shape
    if k == 0:
        return _empty("hard")
    if mask is None:
        mask = np.ones((k, m), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (k, m):
        raise ShapeError("hard_negative_loss", mask.shape, (k, m), detail="mask")
    if m == 0 or not mask[:, 0].all():
        bad = int(np.flatnonzero(~mask[:, 0])[0]) if m else 0
        raise ValueError(f"region {bad} has no positive caption")
    rn = dc.reshape(dc.l2_normalize(r, axis=1), (k, 1, r.shape[1]))
    sim = dc.tsum(dc.mul(rn, dc.l2_normalize(captions, axis=2)), axis=2)
    logits = dc.add(dc.mul(sim, inverse_temperature(temperature)), np.where(mask, 0.0, _MASKED))
    logp = dc.log_softmax(logits, axis=1)
    return dc.mul(dc.tsum(logp[:, 0]), -1.0 / k)


def _hard_negative_ragged(r: Tensor, captions: Sequence, temperature) -> Tensor:
    k = r.shape[0]
    if len(captions) != k:
        raise ShapeError("hard_negative_loss", r.shape, (len(captions),))
    if k == 0:
        return _empty("hard")
    inv = inverse_temperature(temperature)
    terms = []
    for i, c in enumerate(captions):
        c = dc.as_tensor(c)
        if c.ndim != 2 or c.shape[0] == 0:
            raise ValueError(f"region {i} has no captions")
        logits = dc.mul(cosine_similarity(r[i : i + 1], c), inv)
        terms.append(dc.log_softmax(logits, axis=1)[0, 0])
    return dc.mul(dc.tsum(dc.stack(terms)), -1.0 / k)


def combined_loss(l_global, l_regional, l_hard, alpha: float = 0.1, beta: float = 0.5):
    """``l_global + alpha * l_regional + beta * l_hard``."""
    if alpha < 0 or beta < 0:
        raise LossConfigError(f"loss weights must be non-negative (alpha={alpha}, beta={beta})")
    if isinstance(l_global, Tensor) or isinstance(l_regional, Tensor) or isinstance(l_hard, Tensor):
        return dc.add(dc.add(l_global, dc.mul(l_regional, alpha)), dc.mul(l_hard, beta))
    return l_global + alpha * l_regional + beta * l_hard
