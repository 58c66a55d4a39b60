"""Tiny dual encoders: a patch ViT and a text transformer with extended positions."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor

PAD_ID = 0
CLS_ID = 1
UNK_ID = 2
NUM_SPECIAL = 4  # id 3 reserved

_WORD_RE = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*")


@dataclass(frozen=True)
class VisionConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    proj_dim: int = 64

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int = 2048
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    proj_dim: int = 64
    base_max_len: int = 77
    extended_max_len: int = 248
    keep_prefix: int = 20
    interp_factor: int = 4

    def __post_init__(self):
        expected = self.keep_prefix + (self.base_max_len - self.keep_prefix) * self.interp_factor
        if self.extended_max_len != expected:
            raise ValueError(
                f"extended_max_len {self.extended_max_len} != "
                f"{self.keep_prefix} + ({self.base_max_len} - {self.keep_prefix}) x {self.interp_factor}"
            )
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.vocab_size <= NUM_SPECIAL:
            raise ValueError("vocab_size too small")


# -- tokenizer ---------------------------------------------------------------------


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Word-level vocabulary. Ids 0-3 are PAD, CLS, UNK and a reserved slot."""

    def __init__(self, word_to_id: dict[str, int]):
        self.word_to_id = dict(word_to_id)
        for w, i in self.word_to_id.items():
            if i < NUM_SPECIAL:
                raise ValueError(f"word {w!r} uses reserved id {i}")
        self.size = max(self.word_to_id.values(), default=NUM_SPECIAL - 1) + 1

    @classmethod
    def build(cls, corpus: Iterable[str], max_size: int = 2048) -> "Vocabulary":
        counts = Counter(w for text in corpus for w in split_words(text))
        # most frequent first, alphabetical among ties, so corpus order never matters
        ranked = sorted(counts, key=lambda w: (-counts[w], w))[: max_size - NUM_SPECIAL]
        return cls({w: NUM_SPECIAL + i for i, w in enumerate(sorted(ranked))})

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.word_to_id == other.word_to_id

    def to_json(self) -> dict:
        return dict(sorted(self.word_to_id.items(), key=lambda kv: kv[1]))


@dataclass
class TokenSequence:
    ids: np.ndarray
    length: int  # real tokens including CLS
    empty: bool = False

    @property
    def mask(self) -> np.ndarray:
        return np.arange(len(self.ids)) < self.length


def tokenize(text: str, vocab: Vocabulary, max_len: int = 248) -> TokenSequence:
    """``[CLS] + word ids``, truncated to ``max_len`` and right-padded with PAD."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    words = split_words(text)
    ids = [CLS_ID] + [vocab.word_to_id.get(w, UNK_ID) for w in words]
    ids = ids[:max_len]
    length = len(ids)
    ids = ids + [PAD_ID] * (max_len - length)
    return TokenSequence(np.array(ids, dtype=np.int64), length, empty=not words)


def tokenize_batch(
    texts: Sequence[str], vocab: Vocabulary, max_len: int = 248
) -> tuple[np.ndarray, np.ndarray]:
    """Token ids and key mask for a batch, cut to the longest real sequence.

    Padding beyond the longest sequence is masked anyway, so dropping it only
    saves compute.
    """
    seqs = [tokenize(t, vocab, max_len) for t in texts]
    width = max((s.length for s in seqs), default=1)
    ids = np.stack([s.ids[:width] for s in seqs]) if seqs else np.zeros((0, width), np.int64)
    mask = ids != PAD_ID
    mask[:, 0] = True
    return ids, mask


# -- positional extension ---------------------------------------------------------------


def interpolation_coordinates(base_len: int = 77, keep_prefix: int = 20, factor: int = 4):
    """Source rows and weights for each extended position.

    Output row ``keep_prefix + j`` reads source coordinate ``keep_prefix + j / factor``.
    Coordinates past the last source row (76.25 .. 76.75 for the default table)
    clamp to that row.
    """
    n_out = keep_prefix + (base_len - keep_prefix) * factor
    lo = np.empty(n_out, dtype=np.int64)
    hi = np.empty(n_out, dtype=np.int64)
    frac = np.zeros(n_out)
    lo[:keep_prefix] = hi[:keep_prefix] = np.arange(keep_prefix)
    j = np.arange(n_out - keep_prefix)
    coord_lo = keep_prefix + j // factor
    lo[keep_prefix:] = coord_lo
    frac[keep_prefix:] = (j % factor) / factor
    hi[keep_prefix:] = np.minimum(coord_lo + 1, base_len - 1)
    frac[keep_prefix:][coord_lo == base_len - 1] = 0.0
    return lo, hi, frac


def extend_position_embeddings(table, keep_prefix: int = 20, factor: int = 4, base_len: int = 77):
    """Stretch a ``base_len``-row positional table to ``keep_prefix + (base_len - keep_prefix) * factor`` rows.

    The first ``keep_prefix`` rows are copied; the rest linearly interpolate
    adjacent source rows. Accepts an ndarray (returns ndarray) or a Tensor
    (returns a differentiable Tensor).
    """
    rows = table.shape[0]
    if rows != base_len:
        raise ShapeError("extend_position_embeddings", table.shape, detail=f"expected {base_len} rows")
    lo, hi, frac = interpolation_coordinates(base_len, keep_prefix, factor)
    w_hi = frac[:, None]
    w_lo = 1.0 - w_hi
    if isinstance(table, Tensor):
        return dc.add(dc.mul(dc.take_slice(table, lo), w_lo), dc.mul(dc.take_slice(table, hi), w_hi))
    table = np.asarray(table, dtype=np.float64)
    return table[lo] * w_lo + table[hi] * w_hi


# -- parameters --------------------------------------------------------------------------


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


def _init_block(params: dict, prefix: str, dim: int, mlp_ratio: int, rng) -> None:
    hidden = dim * mlp_ratio
    params[f"{prefix}.ln1.g"] = np.ones(dim)
    params[f"{prefix}.ln1.b"] = np.zeros(dim)
    for n in ("q", "k", "v"):
        params[f"{prefix}.attn.w{n}"] = _normal(rng, (dim, dim), dim**-0.5)
        params[f"{prefix}.attn.b{n}"] = np.zeros(dim)
    params[f"{prefix}.attn.wo"] = _normal(rng, (dim, dim), dim**-0.5)
    params[f"{prefix}.attn.bo"] = np.zeros(dim)
    params[f"{prefix}.ln2.g"] = np.ones(dim)
    params[f"{prefix}.ln2.b"] = np.zeros(dim)
    params[f"{prefix}.mlp.w1"] = _normal(rng, (dim, hidden), dim**-0.5)
    params[f"{prefix}.mlp.b1"] = np.zeros(hidden)
    params[f"{prefix}.mlp.w2"] = _normal(rng, (hidden, dim), hidden**-0.5)
    params[f"{prefix}.mlp.b2"] = np.zeros(dim)


def init_vision_params(cfg: VisionConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d = cfg.embed_dim
    patch_in = cfg.patch_size * cfg.patch_size * cfg.channels
    p = {
        "vision.patch.w": _normal(rng, (patch_in, d), patch_in**-0.5),
        "vision.patch.b": np.zeros(d),
        "vision.cls": _normal(rng, (d,), 0.02),
        "vision.pos": _normal(rng, (1 + cfg.grid**2, d), 0.02),
    }
    for i in range(cfg.num_layers):
        _init_block(p, f"vision.block{i}", d, cfg.mlp_ratio, rng)
    p["vision.ln_post.g"] = np.ones(d)
    p["vision.ln_post.b"] = np.zeros(d)
    p["vision.proj"] = _normal(rng, (d, cfg.proj_dim), d**-0.5)
    return p


def init_text_params(cfg: TextConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d = cfg.embed_dim
    base_pos = _normal(rng, (cfg.base_max_len, d), 0.01)
    p = {
        "text.tok": _normal(rng, (cfg.vocab_size, d), 0.02),
        "text.pos": extend_position_embeddings(
            base_pos, cfg.keep_prefix, cfg.interp_factor, cfg.base_max_len
        ),
    }
    for i in range(cfg.num_layers):
        _init_block(p, f"text.block{i}", d, cfg.mlp_ratio, rng)
    p["text.ln_final.g"] = np.ones(d)
    p["text.ln_final.b"] = np.zeros(d)
    p["text.proj"] = _normal(rng, (d, cfg.proj_dim), d**-0.5)
    return p


# -- transformer pieces ----------------------------------------------------------------------


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = dc.matmul(x, w)
    return y if b is None else dc.add(y, b)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return dc.transpose(dc.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return dc.reshape(dc.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def self_attention(x: Tensor, p: dict, prefix: str, heads: int, key_bias=None) -> Tensor:
    q = _split_heads(_linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), heads)
    k = _split_heads(_linear(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), heads)
    v = _split_heads(_linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = dc.mul(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), scale)
    if key_bias is not None:
        scores = dc.add(scores, key_bias)
    attn = dc.softmax(scores, axis=-1)
    out = _merge_heads(dc.matmul(attn, v))
    return _linear(out, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def self_only_attention(x: Tensor, p: dict, prefix: str) -> Tensor:
    """Attention where each token attends only to itself: its value, then the output projection."""
    v = _linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    return _linear(v, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _mlp(x: Tensor, p: dict, prefix: str) -> Tensor:
    h = dc.gelu(_linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return _linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def transformer_block(
    x: Tensor, p: dict, prefix: str, heads: int, key_bias=None, self_only: bool = False
) -> Tensor:
    h = dc.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    if self_only:
        a = self_only_attention(h, p, f"{prefix}.attn")
    else:
        a = self_attention(h, p, f"{prefix}.attn", heads, key_bias)
    x = dc.add(x, a)
    h = dc.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    return dc.add(x, _mlp(h, p, f"{prefix}.mlp"))


# -- encoders ------------------------------------------------------------------------------


@dataclass
class EncoderOutput:
    cls_embedding: Tensor
    token_grid: Tensor | None = None
    caches: dict = field(default_factory=dict)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, grid*grid, patch*patch*C), patches in row-major order."""
    b, h, w, c = images.shape
    g = h // patch
    x = images.reshape(b, g, patch, g, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch * patch * c)


class DualEncoder:
    """Vision and text towers sharing one projected embedding space, plus the temperature.

    Parameters live in a flat ``name -> Tensor`` table so the optimizer and the
    checkpoint format can treat them uniformly.
    """

    TAU_INIT = 0.07

    def __init__(self, vision: VisionConfig, text: TextConfig, params: dict[str, Tensor], vocab: Vocabulary):
        if vision.proj_dim != text.proj_dim:
            raise ValueError("vision and text projections must share a dimension")
        if len(vocab) > text.vocab_size:
            raise ValueError(f"vocabulary of {len(vocab)} exceeds vocab_size {text.vocab_size}")
        self.vision_config = vision
        self.text_config = text
        self.params = params
        self.vocab = vocab

    @classmethod
    def create(cls, vision: VisionConfig, text: TextConfig, vocab: Vocabulary, seed: int = 0) -> "DualEncoder":
        rng = np.random.default_rng(seed)
        raw = init_vision_params(vision, rng)
        raw.update(init_text_params(text, rng))
        raw["log_inv_tau"] = np.array(math.log(1.0 / cls.TAU_INIT))
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
        return cls(vision, text, params, vocab)

    def frozen(self) -> "DualEncoder":
        """Same weights, no gradient recording; safe to share across readers."""
        return DualEncoder(
            self.vision_config,
            self.text_config,
            {k: v.detach() for k, v in self.params.items()},
            self.vocab,
        )

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    @property
    def temperature_param(self) -> Tensor:
        return self.params["log_inv_tau"]

    # vision

    def patch_embed(self, images: np.ndarray) -> Tensor:
        p = self.params
        patches = Tensor(patchify(images, self.vision_config.patch_size))
        return _linear(patches, p["vision.patch.w"], p["vision.patch.b"])

    def encode_image(self, images) -> EncoderOutput:
        """Encode one (H, W, C) image or a (B, H, W, C) batch.

        ``token_grid`` holds the W x W projected patch tokens (class token
        excluded); ``caches["final_block_input"]`` is kept for dense features.
        """
        cfg = self.vision_config
        images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
        single = images.ndim == 3
        if single:
            images = images[None]
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            shape = images.shape[1:] if images.ndim == 4 else images.shape
            raise ShapeError(
                "encode_image",
                shape,
                detail=f"expected ({cfg.image_size}, {cfg.image_size}, {cfg.channels})",
            )
        p = self.params
        b = images.shape[0]
        tokens = self.patch_embed(images)
        cls_tok = dc.add(Tensor(np.zeros((b, 1, cfg.embed_dim))), p["vision.cls"])
        x = dc.add(dc.concat([cls_tok, tokens], axis=1), p["vision.pos"])
        for i in range(cfg.num_layers - 1):
            x = transformer_block(x, p, f"vision.block{i}", cfg.num_heads)
        final_in = x
        x = transformer_block(x, p, f"vision.block{cfg.num_layers - 1}", cfg.num_heads)
        out = self.vision_head(x)
        cls_emb = out[:, 0]
        grid = dc.reshape(out[:, 1:], (b, cfg.grid, cfg.grid, cfg.proj_dim))
        if single:
            cls_emb, grid, final_in = cls_emb[0], grid[0], final_in[0]
        return EncoderOutput(cls_emb, grid, {"final_block_input": final_in})

    def vision_head(self, x: Tensor) -> Tensor:
        p = self.params
        x = dc.layer_norm(x, p["vision.ln_post.g"], p["vision.ln_post.b"])
        return dc.matmul(x, p["vision.proj"])

    # text

    def encode_text(self, tokens, mask: np.ndarray | None = None) -> EncoderOutput:
        """Encode a TokenSequence, a 1-D id array, or a (B, L) id batch."""
        cfg = self.text_config
        if isinstance(tokens, TokenSequence):
            ids, mask, single = tokens.ids[None], tokens.mask[None], True
        else:
            ids = np.asarray(tokens)
            single = ids.ndim == 1
            if single:
                ids = ids[None]
                mask = None if mask is None else np.asarray(mask)[None]
        if mask is None:
            mask = ids != PAD_ID
            mask[:, 0] = True
        if ids.shape[1] > cfg.extended_max_len:
            raise ShapeError("encode_text", ids.shape, detail=f"longer than {cfg.extended_max_len}")
        if ids.size and (ids.max() >= cfg.vocab_size or ids.min() < 0):
            raise ValueError(f"token id {int(ids.max())} outside vocabulary of {cfg.vocab_size}")
        p = self.params
        length = ids.shape[1]
        x = dc.add(dc.embedding(p["text.tok"], ids), p["text.pos"][:length])
        key_bias = np.where(mask, 0.0, -1e9)[:, None, None, :]
        for i in range(cfg.num_layers):
            x = transformer_block(x, p, f"text.block{i}", cfg.num_heads, key_bias)
        x = dc.layer_norm(x[:, 0], p["text.ln_final.g"], p["text.ln_final.b"])
        emb = dc.matmul(x, p["text.proj"])
        return EncoderOutput(emb[0] if single else emb)

    def encode_texts(self, texts: Sequence[str]) -> Tensor:
        """(len(texts), proj_dim) embeddings.

        Texts are bucketed by token length so short phrases are not padded to
        the longest caption in the batch; rows come back in input order.
        """
        seqs = [tokenize(t, self.vocab, self.text_config.extended_max_len) for t in texts]
        if not seqs:
            return self.encode_text(np.zeros((0, 1), np.int64)).cls_embedding
        buckets: dict[int, list[int]] = {}
        for i, s in enumerate(seqs):
            buckets.setdefault(s.length, []).append(i)
        parts, order = [], []
        for length in sorted(buckets):
            rows = buckets[length]
            ids = np.stack([seqs[i].ids[:length] for i in rows])
            mask = np.stack([seqs[i].mask[:length] for i in rows])
            parts.append(self.encode_text(ids, mask).cls_embedding)
            order += rows
        stacked = parts[0] if len(parts) == 1 else dc.concat(parts, axis=0)
        if order == list(range(len(order))):
            return stacked
        return stacked[np.argsort(order, kind="stable")]

    def config_dict(self) -> dict:
        return {"vision": asdict(self.vision_config), "text": asdict(self.text_config)}
