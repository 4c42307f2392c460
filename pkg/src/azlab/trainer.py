"""Span-loss fine-tuning loop and the portable checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"AZLB" | version: u8 | header_len: u64 | header: UTF-8 JSON | payload

The header lists tensor names and shapes in payload order together with
the model config, vocabulary and training metadata. The payload is the
concatenation of every tensor as float64, row-major.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import ModelConfig, as_leaves, batch_logits, init_params, param_shapes
from .text import Feature, Vocab

logger = logging.getLogger(__name__)

MAGIC = b"AZLB"
VERSION = 1
_PREFIX = struct.Struct("<4sBQ")


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: float = 3.0
    batch_size: int = 16
    learning_rate: float = 3e-5
    seed: int = 0
    max_steps: int | None = None
    checkpoint_path: str | None = None
    # global-norm gradient clipping as in BERT's optimizer; None disables
    clip_norm: float | None = 1.0
    # "constant" or "linear" (BERT-style warmup then linear decay to zero)
    schedule: str = "constant"
    warmup_proportion: float = 0.0

    def __post_init__(self):
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0.0 <= self.warmup_proportion < 1.0:
            raise ValueError("warmup_proportion must be in [0, 1)")
        if self.epochs <= 0:
            raise ValueError("epochs must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    vocab: Vocab
    metadata: dict = field(default_factory=dict)
    loss_trace: list[float] = field(default_factory=list, compare=False, repr=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.config == other.config and self.vocab == other.vocab
                and self.metadata == other.metadata
                and list(self.params) == list(other.params)
                and all(self.params[k].shape == other.params[k].shape
                        and self.params[k].tobytes() == other.params[k].tobytes()
                        for k in self.params))

    def validate(self) -> None:
        expected = param_shapes(self.config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise CheckpointError(f"parameter names disagree: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise CheckpointError(
                    f"{name}: shape {self.params[name].shape} != expected {shape}")
        if len(self.vocab) != self.config.vocab_size:
            raise CheckpointError(
                f"vocab size {len(self.vocab)} != config.vocab_size {self.config.vocab_size}")


# ---------------------------------------------------------------- loss

def span_loss(start_logits: T.Tensor, end_logits: T.Tensor, gold_start, gold_end) -> T.Tensor:
    """Mean of the start and end cross-entropies; logits are [B, n] (or [n])."""
    if len(start_logits.shape) == 1:
        start_logits = T.reshape(start_logits, (1,) + start_logits.shape)
        end_logits = T.reshape(end_logits, (1,) + end_logits.shape)
    gs = np.atleast_1d(np.asarray(gold_start, dtype=np.int64))
    ge = np.atleast_1d(np.asarray(gold_end, dtype=np.int64))
    n = start_logits.shape[1]
    for g in (gs, ge):
        if g.size and (g.min() < 0 or g.max() >= n):
            raise ValueError(f"gold index outside [0, {n})")
    for logits, g in ((start_logits, gs), (end_logits, ge)):
        picked = logits.data[np.arange(len(g)), g]
        if (picked <= T.NEG_INF / 2).any():
            raise ValueError("gold index points at a masked (non-passage) position")
    return T.scale(T.add(T.cross_entropy(start_logits, gs), T.cross_entropy(end_logits, ge)), 0.5)


# ---------------------------------------------------------------- training

def batch_loss(params: dict[str, np.ndarray], config: ModelConfig, batch: Sequence[Feature]):
    leaves = as_leaves(params)
    start, end = batch_logits(leaves, config, batch)
    loss = span_loss(start, end, [f.start_position for f in batch],
                     [f.end_position for f in batch])
    return loss, leaves


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


def learning_rate_at(config: TrainConfig, step: int, n_steps: int) -> float:
    """Learning rate used for the update at 0-based ``step``."""
    lr = config.learning_rate
    warmup = int(config.warmup_proportion * n_steps)
    if step < warmup:
        return lr * (step + 1) / warmup
    if config.schedule == "linear":
        return lr * (n_steps - step) / max(n_steps - warmup, 1)
    return lr


def train(features: Sequence[Feature], config: TrainConfig, model_config: ModelConfig,
          vocab: Vocab, featurize_opts: dict | None = None) -> Checkpoint:
    """Seeded mini-batch Adam on the span loss; fully deterministic for a given seed."""
    usable = [f for f in features if f.start_position is not None]
    if not usable:
        raise ValueError("no training feature carries a gold span")
    params = init_params(model_config, config.seed)
    state = T.AdamState(lr=config.learning_rate)
    rng = np.random.default_rng(config.seed + 1)

    per_epoch = math.ceil(len(usable) / config.batch_size)
    n_steps = math.ceil(config.epochs * per_epoch)
    if config.max_steps is not None:
        n_steps = min(n_steps, config.max_steps)

    trace: list[float] = []
    order: np.ndarray = np.empty(0, dtype=np.int64)
    for step in range(n_steps):
        k = step % per_epoch
        if k == 0:
            order = rng.permutation(len(usable))
        batch = [usable[i] for i in order[k * config.batch_size:(k + 1) * config.batch_size]]
        loss, leaves = batch_loss(params, model_config, batch)
        grads = T.backward(loss, leaves)
        if config.clip_norm is not None:
            grads = clip_by_global_norm(grads, config.clip_norm)
        state.lr = learning_rate_at(config, step, n_steps)
        params, state = T.adam_update(params, grads, state)
        trace.append(float(loss.data))
        if step % 100 == 0:
            logger.info("step %d/%d loss %.4f", step, n_steps, trace[-1])

    metadata = {
        "seed": config.seed,
        "steps": n_steps,
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "learning_rate": config.learning_rate,
        "clip_norm": config.clip_norm,
        "schedule": config.schedule,
        "warmup_proportion": config.warmup_proportion,
    }
    if featurize_opts:
        metadata["featurize"] = dict(featurize_opts)
    ckpt = Checkpoint(model_config, params, vocab, metadata)
    ckpt.loss_trace = trace
    if config.checkpoint_path:
        save_checkpoint(ckpt, config.checkpoint_path)
    return ckpt


def write_loss_trace(trace: Sequence[float], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(trace):
            w.writerow([i, repr(float(loss))])


# ---------------------------------------------------------------- persistence

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    ckpt.validate()
    names = list(ckpt.params)
    header = {
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab.tokens,
        "lowercase": ckpt.vocab.lowercase,
        "metadata": ckpt.metadata,
        "tensors": [{"name": n, "shape": list(ckpt.params[n].shape)} for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(ckpt.params[n], dtype="<f8").tobytes() for n in names)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated file ({len(blob)} bytes, no header)")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}, expected {VERSION}")
    body_start = _PREFIX.size + header_len
    if len(blob) < body_start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[_PREFIX.size:body_start].decode("utf-8"))
        config = ModelConfig(**header["config"])
        vocab = Vocab(header["vocab"], lowercase=header["lowercase"])
        specs = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None

    expected = body_start + 8 * sum(math.prod(s) for _, s in specs)
    if len(blob) < expected:
        raise CheckpointError(f"{path}: truncated payload ({len(blob)} < {expected} bytes)")
    if len(blob) > expected:
        raise CheckpointError(f"{path}: {len(blob) - expected} unexpected trailing bytes")

    params, offset = {}, body_start
    for name, shape in specs:
        count = math.prod(shape)
        params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset
                                     ).astype(np.float64).reshape(shape)
        offset += 8 * count
    ckpt = Checkpoint(config, params, vocab, header["metadata"])
    ckpt.validate()
    return ckpt
