"""Batching, losses, teacher-forced training and greedy decoding."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, Tape, Tensor, WarmupExpDecay
from .decoder import Seq2SeqModel, decoder_forward_train, decoder_init_state, decoder_step
from .exceptions import NonFiniteLossError
from .tasks import TaskDataset, error_rate

log = logging.getLogger(__name__)

__all__ = [
    "Batch",
    "make_batch",
    "batch_loss",
    "greedy_decode",
    "generate_frames",
    "teacher_forced_loss",
    "validate",
    "OptimConfig",
    "fit",
    "decode_lengths",
]


@dataclass
class Batch:
    src: np.ndarray  # (B, T) int
    src_mask: np.ndarray  # (B, T) bool
    tgt_in: np.ndarray  # (B, L) int or (B, L, F) float
    tgt_out: np.ndarray  # (B, L) int or (B, L, F) float
    weight: np.ndarray  # (B, L) 0/1

    @property
    def size(self) -> int:
        return self.src.shape[0]


def _pad_sources(examples, pad):
    T = max(len(ex.source) for ex in examples)
    src = np.full((len(examples), T), pad, dtype=np.int64)
    mask = np.zeros((len(examples), T), dtype=bool)
    for i, ex in enumerate(examples):
        src[i, :len(ex.source)] = ex.source
        mask[i, :len(ex.source)] = True
    return src, mask


def make_batch(examples, model: Seq2SeqModel) -> Batch:
    """Pad a list of examples; targets are shifted right for teacher forcing."""
    cfg = model.cfg
    src, src_mask = _pad_sources(examples, cfg.src_pad)
    B = len(examples)
    if cfg.output_head == "token":
        L = max(len(ex.target) for ex in examples) - 1
        tgt_in = np.full((B, L), cfg.pad, dtype=np.int64)
        tgt_out = np.zeros((B, L), dtype=np.int64)
        weight = np.zeros((B, L), dtype=model.dtype)
        for i, ex in enumerate(examples):
            t = np.asarray(ex.target)
            n = len(t) - 1
            tgt_in[i, :n] = t[:-1]
            tgt_out[i, :n] = t[1:]
            weight[i, :n] = 1.0
    else:
        F = cfg.feature_dim
        L = max(len(ex.target) for ex in examples)
        tgt_in = np.zeros((B, L, F), dtype=model.dtype)
        tgt_out = np.zeros((B, L, F), dtype=model.dtype)
        weight = np.zeros((B, L), dtype=model.dtype)
        for i, ex in enumerate(examples):
            n = len(ex.target)
            tgt_out[i, :n] = ex.target
            tgt_in[i, 1:n] = ex.target[:-1]
            weight[i, :n] = 1.0
    return Batch(src, src_mask, tgt_in, tgt_out, weight)


def batch_loss(model: Seq2SeqModel, batch: Batch, rng=None, train: bool = False) -> Tensor:
    """Cross-entropy (token head) or L1 (continuous head), averaged over real positions."""
    enc = model.encode(batch.src, batch.src_mask)
    out = decoder_forward_train(model, batch.tgt_in, enc, rng=rng, train=train)
    if model.cfg.output_head == "token":
        return ad.cross_entropy(out, batch.tgt_out, weight=batch.weight)
    return ad.l1_loss(out, batch.tgt_out, weight=batch.weight[..., None])


def teacher_forced_loss(model: Seq2SeqModel, dataset: TaskDataset, batch_size: int = 64) -> float:
    """Token- or frame-weighted mean loss over ``dataset`` with no tape recording."""
    total, weight = 0.0, 0.0
    for i in range(0, len(dataset), batch_size):
        b = make_batch(dataset.examples[i:i + batch_size], model)
        w = float(b.weight.sum()) * (model.cfg.feature_dim if model.cfg.output_head == "continuous" else 1)
        total += float(batch_loss(model, b).data) * w
        weight += w
    return total / max(weight, 1e-12)


def decode_lengths(src_mask: np.ndarray, max_len_ratio: float) -> np.ndarray:
    """Per-example cap on generated content tokens, proportional to the source length."""
    return np.maximum(1, np.ceil(src_mask.sum(axis=1) * max_len_ratio)).astype(np.int64)


def greedy_decode(model: Seq2SeqModel, src, src_mask, max_len_ratio: float = 1.0) -> list[list[int]]:
    """Batched argmax decoding; returns content tokens (no BOS/EOS) per example."""
    cfg = model.cfg
    enc = model.encode(src, src_mask)
    caps = decode_lengths(enc.mask, max_len_ratio)
    state = decoder_init_state(model, enc)
    B = enc.mask.shape[0]
    prev = np.full(B, cfg.bos, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    hyps: list[list[int]] = [[] for _ in range(B)]
    for t in range(int(caps.max())):
        state, logits = decoder_step(model, state, prev)
        tok = np.argmax(logits, axis=-1)
        for b in range(B):
            if done[b]:
                continue
            if tok[b] == cfg.eos:
                done[b] = True
            else:
                hyps[b].append(int(tok[b]))
                if len(hyps[b]) >= caps[b]:
                    done[b] = True
        if done.all():
            break
        prev = tok
    return hyps


def generate_frames(model: Seq2SeqModel, src, src_mask, lengths) -> list[np.ndarray]:
    """Autoregressive frame generation, feeding back each predicted frame."""
    cfg = model.cfg
    enc = model.encode(src, src_mask)
    state = decoder_init_state(model, enc)
    B = enc.mask.shape[0]
    prev = np.zeros((B, cfg.feature_dim), dtype=model.dtype)
    frames = []
    for _ in range(int(np.max(lengths))):
        state, prev = decoder_step(model, state, prev)
        frames.append(prev)
    out = np.stack(frames, axis=1)
    return [out[b, :lengths[b]] for b in range(B)]


def validate(model: Seq2SeqModel, dataset: TaskDataset, batch_size: int = 128,
             max_len_ratio: float = 1.0, bucket_edges=None) -> dict:
    """Validation summary: loss, and for token tasks greedy error rate and exact match."""
    res = {"loss": teacher_forced_loss(model, dataset, batch_size)}
    if dataset.is_continuous:
        res["metric"] = -res["loss"]
        return res
    refs, hyps = [], []
    for i in range(0, len(dataset), batch_size):
        chunk = dataset.examples[i:i + batch_size]
        src, mask = _pad_sources(chunk, model.cfg.src_pad)
        hyps.extend(greedy_decode(model, src, mask, max_len_ratio))
        refs.extend(ex.content() for ex in chunk)
    m = error_rate(refs, hyps, bucket_edges)
    res.update(error_rate=m.error_rate, exact_match=m.exact_match, metric=m.exact_match)
    return res


@dataclass
class OptimConfig:
    """Optimizer and schedule settings.

    Full-scale reference values: warmup 40000 steps, peak learning rate 0.025.
    """

    lr_peak: float = 2e-3
    warmup: int = 500
    lr_gamma: float = 4e-4
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-9
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    batch_size: int = 32
    epochs: int = 20


def _clip(grads: list[np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g).real) for g in grads))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def fit(model: Seq2SeqModel, train_set: TaskDataset, val_set: TaskDataset | None, opt_cfg: OptimConfig,
        seed: int = 0, max_len_ratio: float = 1.0, on_epoch=None) -> list[dict]:
    """Teacher-forced training; returns one log record per epoch.

    ``on_epoch(epoch, record, model)`` is called after every epoch's validation,
    which is where the harness writes checkpoints.
    """
    params = model.parameters()
    sched = WarmupExpDecay(opt_cfg.lr_peak, opt_cfg.warmup, opt_cfg.lr_gamma)
    opt = AdamW(params, sched, tuple(opt_cfg.betas), opt_cfg.eps, opt_cfg.weight_decay)
    rng = np.random.default_rng(seed)
    history = []
    n = len(train_set)
    for epoch in range(1, opt_cfg.epochs + 1):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for i in range(0, n, opt_cfg.batch_size):
            batch = make_batch([train_set.examples[j] for j in order[i:i + opt_cfg.batch_size]], model)
            with Tape() as tape:
                loss = batch_loss(model, batch, rng=rng, train=True)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLossError(f"loss became {value} at epoch {epoch}, step {opt.t + 1}")
            gmap = ad.backward(tape, loss)
            grads = [gmap[p] for p in params]
            _clip(grads, opt_cfg.clip_norm)
            opt.step(grads)
            total += value * batch.size
            count += batch.size
        rec = {"epoch": epoch, "step": opt.t, "lr": opt.lr, "train_loss": total / max(count, 1)}
        if val_set is not None and len(val_set):
            val = validate(model, val_set, max_len_ratio=max_len_ratio)
            rec.update({f"val_{k}": v for k, v in val.items()})
        log.info("epoch %d %s", epoch, rec)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(epoch, rec, model)
    return history
