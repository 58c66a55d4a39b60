"""Two-stage training loop, AdamW, warmup schedule and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import losses
from .curation import DatasetRecord, atomic_write_bytes, atomic_write_text
from .encoders import DualEncoder, TextConfig, VisionConfig, Vocabulary
from .regionops import roi_align_batch
from .toyworld import load_image

log = logging.getLogger(__name__)

STAGE_DEFAULTS = {
    1: {"lr": 1e-4, "weight_decay": 0.05, "warmup_iters": 200},
    2: {"lr": 1e-6, "weight_decay": 0.001, "warmup_iters": 50},
}
MAX_CAPTIONS_PER_REGION = 11


class NumericalError(RuntimeError):
    """Non-finite loss or gradient. ``last_good`` holds the model state before the failing step."""

    def __init__(self, msg: str, last_good: "Checkpoint | None" = None):
        super().__init__(msg)
        self.last_good = last_good


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: int = 1
    batch_size: int = 32
    lr: float | None = None
    weight_decay: float | None = None
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    warmup_iters: int | None = None
    epochs: int = 1
    alpha: float = 0.1
    beta: float = 0.5
    use_global: bool = True
    use_regional: bool = True
    use_hard: bool = True
    seed: int = 0
    grad_clip: float | None = 1.0
    max_regions: int = 64
    samples_per_axis: int = 3
    max_text_len: int = 248

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        for key, value in STAGE_DEFAULTS[self.stage].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.stage == 1 and (self.use_regional or self.use_hard or not self.use_global):
            # stage 1 is global-only by construction
            self.use_global, self.use_regional, self.use_hard = True, False, False
        if self.alpha < 0 or self.beta < 0:
            raise losses.LossConfigError(f"alpha and beta must be non-negative ({self.alpha}, {self.beta})")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# -- optimizer -----------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


NO_DECAY = frozenset({"log_inv_tau"})


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 over ``warmup_iters`` steps, constant afterwards."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if config.warmup_iters and step < config.warmup_iters:
        return config.lr * step / config.warmup_iters
    return config.lr


def adamw_step(
    params: dict[str, dc.Tensor],
    state: OptimizerState,
    config: TrainConfig,
    lr: float,
    grads: dict[str, np.ndarray] | None = None,
) -> None:
    """Decoupled-weight-decay Adam update, in place."""
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        if name not in NO_DECAY and config.weight_decay:
            update = update + config.weight_decay * p.data
        p.data -= lr * update


def clip_grad_norm(params: dict[str, dc.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params.values() if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


# -- checkpoints ----------------------------------------------------------------------------

MAGIC = b"FACK"
FORMAT_VERSION = 1
_DIGEST = 32


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]  # float32
    config: dict
    optimizer_step: int = 0
    optimizer: dict[str, dict[str, np.ndarray]] = field(default_factory=lambda: {"m": {}, "v": {}})
    version: int = FORMAT_VERSION

    @property
    def temperature(self) -> float:
        return float(np.exp(-np.asarray(self.tensors["log_inv_tau"], dtype=np.float64)).item())

    def to_model(self) -> DualEncoder:
        model_cfg = self.config["model"]
        vision = VisionConfig(**model_cfg["vision"])
        text = TextConfig(**model_cfg["text"])
        vocab = Vocabulary(self.config["vocab"])
        params = {k: dc.Tensor(v.astype(np.float64), requires_grad=True, name=k) for k, v in self.tensors.items()}
        return DualEncoder(vision, text, params, vocab)

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(
            {k: v.astype(np.float64) for k, v in self.optimizer["m"].items()},
            {k: v.astype(np.float64) for k, v in self.optimizer["v"].items()},
            self.optimizer_step,
        )


def make_checkpoint(model: DualEncoder, state: OptimizerState | None, config: dict) -> Checkpoint:
    snapshot = dict(config)
    snapshot["model"] = model.config_dict()
    snapshot["vocab"] = model.vocab.to_json()
    state = state or OptimizerState()
    return Checkpoint(
        tensors={k: p.data.astype(np.float32) for k, p in model.params.items()},
        config=snapshot,
        optimizer_step=state.step,
        optimizer={
            "m": {k: v.astype(np.float32) for k, v in state.m.items()},
            "v": {k: v.astype(np.float32) for k, v in state.v.items()},
        },
    )


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    groups = [("", ckpt.tensors), ("opt.m.", ckpt.optimizer["m"]), ("opt.v.", ckpt.optimizer["v"])]
    for prefix, table in groups:
        for name in sorted(table):
            arr = np.asarray(table[name], dtype="<f4", order="C")  # keeps 0-d shapes, unlike ascontiguousarray
            entries.append({"name": prefix + name, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "config": ckpt.config,
        "optimizer_step": ckpt.optimizer_step,
        "temperature": float(np.float32(ckpt.temperature)) if "log_inv_tau" in ckpt.tensors else None,
        "tensors": entries,
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", ckpt.version, len(hjson)) + hjson + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(ckpt))


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 12 + _DIGEST:
        raise CheckpointError("checksum error: file truncated")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum error: content does not match digest")
    if body[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, hlen = struct.unpack("<IQ", body[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unknown checkpoint version {version}")
    header = json.loads(body[16 : 16 + hlen].decode("utf-8"))
    payload = memoryview(body)[16 + hlen :]
    tensors, opt = {}, {"m": {}, "v": {}}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"]).copy()
        name = e["name"]
        if name.startswith("opt.m."):
            opt["m"][name[6:]] = arr
        elif name.startswith("opt.v."):
            opt["v"][name[6:]] = arr
        else:
            tensors[name] = arr
    return Checkpoint(tensors, header["config"], header["optimizer_step"], opt, version)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# -- training -------------------------------------------------------------------------------------


@dataclass
class StepMetrics:
    step: int
    stage: int
    lr: float
    loss_global: float
    loss_regional: float
    loss_hard: float
    loss_total: float
    tau: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(", ", ": "))


@dataclass
class TrainResult:
    model: DualEncoder
    optimizer: OptimizerState
    checkpoint: Checkpoint
    metrics: list[StepMetrics]
    loss_calls: Counter

    def metrics_text(self) -> str:
        return "".join(m.to_json() + "\n" for m in self.metrics)


@dataclass
class Batch:
    images: np.ndarray
    short: list[str]
    long: list[str]
    boxes: list = field(default_factory=list)
    box_image: list[int] = field(default_factory=list)
    region_captions: list[str] = field(default_factory=list)
    negatives: list[list[str]] = field(default_factory=list)


def build_vocab(records: Sequence[DatasetRecord], extra: Sequence[str] = (), max_size: int = 2048) -> Vocabulary:
    corpus = list(extra)
    for r in records:
        corpus += [r.short_caption, r.long_caption]
        for b in r.regions:
            corpus.append(b.positive_caption)
            corpus += b.negative_captions
    return Vocabulary.build(corpus, max_size)


def batch_order(n: int, config: TrainConfig, epoch: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(n)
    return [order[i : i + config.batch_size] for i in range(0, n, config.batch_size)]


def make_batch(records: Sequence[DatasetRecord], images: Sequence[np.ndarray], idx, config: TrainConfig) -> Batch:
    batch = Batch(np.stack([images[i] for i in idx]), [records[i].short_caption for i in idx], [records[i].long_caption for i in idx])
    for slot, i in enumerate(idx):
        for box in records[i].regions:
            if len(batch.boxes) >= config.max_regions:
                break
            batch.boxes.append(box)
            batch.box_image.append(slot)
            batch.region_captions.append(box.positive_caption)
            batch.negatives.append(list(box.negative_captions)[: MAX_CAPTIONS_PER_REGION - 1])
    return batch


def batch_losses(model: DualEncoder, batch: Batch, config: TrainConfig, calls: Counter | None = None):
    """Loss terms for one batch; returns ``(total, global, regional, hard)`` tensors."""
    calls = calls if calls is not None else Counter()
    tau = model.temperature_param
    stage2 = config.stage == 2
    need_regions = stage2 and (config.use_regional or config.use_hard) and batch.boxes
    texts = batch.short + batch.long
    if need_regions:
        texts += batch.region_captions
        if config.use_hard:
            for negs in batch.negatives:
                texts += negs
    out = model.encode_image(batch.images)
    emb = model.encode_texts(texts)
    n = len(batch.short)
    zero = dc.Tensor(0.0)

    l_global = zero
    if config.use_global:
        calls["global"] += 2
        l_global = losses.dual_caption_global_loss(out.cls_embedding, emb[:n], emb[n : 2 * n], tau)
    l_regional = l_hard = zero
    if need_regions:
        k = len(batch.boxes)
        regions = roi_align_batch(out.token_grid, batch.boxes, batch.box_image, config.samples_per_axis)
        phrases = emb[2 * n : 2 * n + k]
        if config.use_regional:
            calls["regional"] += 1
            l_regional = losses.regional_contrastive_loss(regions, phrases, tau)
        if config.use_hard:
            calls["hard"] += 1
            m = 1 + max(len(x) for x in batch.negatives)
            index = np.zeros((k, m), dtype=np.int64)
            mask = np.zeros((k, m), dtype=bool)
            cursor = 2 * n + k
            for i, negs in enumerate(batch.negatives):
                index[i, 0] = 2 * n + i
                index[i, 1 : 1 + len(negs)] = np.arange(cursor, cursor + len(negs))
                mask[i, : 1 + len(negs)] = True
                cursor += len(negs)
            index[~mask] = 2 * n  # any valid row; masked out of the softmax
            captions = emb[index]
            l_hard = losses.hard_negative_loss(regions, captions, tau, mask)
    if stage2:
        total = losses.combined_loss(
            l_global, l_regional, l_hard, config.alpha if config.use_regional else 0.0, config.beta if config.use_hard else 0.0
        )
    else:
        total = l_global
    return total, l_global, l_regional, l_hard


def _snapshot(config: TrainConfig) -> dict:
    return {"train": config.to_dict()}


def train_stage(
    records: Sequence[DatasetRecord],
    config: TrainConfig,
    init: Checkpoint | DualEncoder | None = None,
    vision: VisionConfig | None = None,
    text: TextConfig | None = None,
    vocab: Vocabulary | None = None,
    image_root=None,
    metrics_path=None,
) -> TrainResult:
    """Run ``config.epochs`` passes over ``records`` (seeded shuffle) and return the final state.

    Stage 1 optimises the global loss only. Stage 2 must start from an
    existing model and adds the regional and hard-negative terms as toggled.
    """
    if not records:
        raise ValueError("empty dataset")
    if config.stage == 2:
        if init is None:
            raise ValueError("stage 2 requires a stage-1 checkpoint to initialise from")
        if not any(r.regions for r in records):
            raise ValueError("stage 2 needs region annotations, but no record has any")
    if isinstance(init, Checkpoint):
        model = init.to_model()
    elif isinstance(init, DualEncoder):
        model = DualEncoder(
            init.vision_config,
            init.text_config,
            {k: dc.Tensor(p.data.copy(), requires_grad=True, name=k) for k, p in init.params.items()},
            init.vocab,
        )
    else:
        vocab = vocab or build_vocab(records)
        vision = vision or VisionConfig()
        text = text or TextConfig(vocab_size=max(len(vocab), 8))
        model = DualEncoder.create(vision, text, vocab, seed=config.seed)

    images = [load_image(r.image_source, image_root) for r in records]
    state = OptimizerState()
    calls: Counter = Counter()
    metrics: list[StepMetrics] = []
    params = model.params
    step = 0
    lines: list[str] = []
    for epoch in range(config.epochs):
        for idx in batch_order(len(records), config, epoch):
            batch = make_batch(records, images, idx, config)
            dc.zero_grads(params.values())
            total, lg, lr_, lh = batch_losses(model, batch, config, calls)
            value = float(total.data)
            if not math.isfinite(value):
                raise NumericalError(
                    f"non-finite loss at step {step}", make_checkpoint(model, state, _snapshot(config))
                )
            lr = lr_schedule(step, config)
            row = StepMetrics(
                step,
                config.stage,
                lr,
                float(lg.data),
                float(lr_.data),
                float(lh.data),
                value,
                losses.tau_value(model.temperature_param),
            )
            total.backward()
            if config.grad_clip:
                clip_grad_norm(params, config.grad_clip)
            try:
                adamw_step(params, state, config, lr)
            except NumericalError as exc:
                exc.last_good = make_checkpoint(model, state, _snapshot(config))
                raise
            metrics.append(row)
            lines.append(row.to_json() + "\n")
            log.debug("step %d loss %.6f", step, value)
            step += 1
    ckpt = make_checkpoint(model, state, _snapshot(config))
    if metrics_path is not None:
        atomic_write_text(metrics_path, "".join(lines))
    return TrainResult(model, state, ckpt, metrics, calls)
