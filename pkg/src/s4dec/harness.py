"""Run configuration, training runs with k-best checkpointing, evaluation and the long-form experiment."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .beam import beam_search
from .checkpoint import Checkpoint, average_checkpoints, config_hash, load_checkpoint
from .decoder import DecoderConfig, Seq2SeqModel
from .exceptions import CheckpointMismatchError, ConfigError
from .tasks import (
    CSV_HEADER,
    Metrics,
    TaskDataset,
    concat_longform,
    default_bucket_edges,
    error_rate,
    gen_continuous_task,
    gen_copy_task,
    gen_reverse_task,
)
from .training import (
    OptimConfig,
    _pad_sources,
    decode_lengths,
    fit,
    generate_frames,
    greedy_decode,
    teacher_forced_loss,
)

log = logging.getLogger(__name__)

__all__ = [
    "RunConfig",
    "load_config",
    "make_datasets",
    "train",
    "TrainResult",
    "evaluate",
    "evaluate_model",
    "run_longform_experiment",
    "model_from_checkpoint",
]


@dataclass
class RunConfig:
    """Everything a run needs; unknown keys are rejected on load.

    Desk-scale defaults.  Full-scale reference values: beam 25 (CSJ) or 60
    (LibriSpeech), averaging over the 10 best checkpoints, 6 decoder layers with
    ``d_model=512`` and state size 64.
    """

    model: DecoderConfig = field(default_factory=DecoderConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    task: str = "copy"
    train_size: int = 10000
    val_size: int = 200
    train_len: tuple = (5, 20)
    seed: int = 0
    data_seed: int = 1
    beam_size: int = 5
    max_len_ratio: float = 1.0
    average_best: int = 3
    longform_k: int = 3
    eval_size: int = 300
    continuous_epochs: int = 10
    continuous_train_size: int = 2000
    out_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = _build(DecoderConfig, self.model, "model")
        if isinstance(self.optim, dict):
            self.optim = _build(OptimConfig, self.optim, "optim")
        self.train_len = tuple(int(x) for x in self.train_len)
        self.validate()

    def validate(self) -> None:
        if self.task not in ("copy", "reverse", "continuous"):
            raise ConfigError(f"task must be copy, reverse or continuous, got {self.task!r}")
        if len(self.train_len) != 2 or not 1 <= self.train_len[0] <= self.train_len[1]:
            raise ConfigError(f"train_len must be (lo, hi) with 1 <= lo <= hi, got {self.train_len}")
        if self.beam_size < 1 or self.average_best < 1 or self.longform_k < 2:
            raise ConfigError("beam_size and average_best must be >= 1, longform_k >= 2")
        want = "continuous" if self.task == "continuous" else "token"
        if self.model.output_head != want:
            raise ConfigError(f"task {self.task!r} needs output_head={want!r}")
        if self.model.vocab_size != self.model.src_vocab_size:
            raise ConfigError("source and target vocabularies must match for the synthetic tasks")
        self.model.validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train_len"] = list(self.train_len)
        d["optim"]["betas"] = list(self.optim.betas)
        return d

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        for key, value in changes.items():
            target = d
            *head, last = key.split(".")
            for h in head:
                target = target[h]
            target[last] = value
        return RunConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "config")


def _build(klass, d: dict, where: str):
    names = {f.name for f in dataclasses.fields(klass)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    try:
        return klass(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path) -> RunConfig:
    """Read a JSON config, or UTF-8 ``key=value`` lines with dotted keys (``model.d_model=64``)."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return RunConfig.from_dict(json.loads(text))
    d: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        target = d
        *head, last = key.split(".")
        for h in head:
            target = target.setdefault(h, {})
        target[last] = _parse_value(value)
    return RunConfig.from_dict(d)


def make_datasets(rc: RunConfig, task: str | None = None, train_size: int | None = None):
    """Training and validation sets for ``task`` (defaults to the configured one)."""
    task = task or rc.task
    V = rc.model.vocab_size
    n = rc.train_size if train_size is None else train_size
    if task == "continuous":
        F = rc.model.feature_dim
        gen = lambda size, seed: gen_continuous_task(size, rc.train_len, F, seed, vocab=V)  # noqa: E731
    else:
        g = gen_copy_task if task == "copy" else gen_reverse_task
        gen = lambda size, seed: g(size, rc.train_len, V, seed)  # noqa: E731
    return gen(n, rc.data_seed), gen(rc.val_size, rc.data_seed + 1000)


@dataclass
class TrainResult:
    model: Seq2SeqModel
    history: list
    checkpoints: list  # (metric, path or Checkpoint), best first
    averaged: Checkpoint | None = None


def train(rc: RunConfig, train_set: TaskDataset | None = None, val_set: TaskDataset | None = None,
          out_dir=None) -> TrainResult:
    """Train one model, keeping the ``average_best`` best epoch checkpoints.

    With an output directory the checkpoints, ``metrics.jsonl`` and the
    averaged checkpoint are written there; otherwise they stay in memory.
    """
    out = Path(out_dir or rc.out_dir) if (out_dir or rc.out_dir) else None
    if train_set is None or val_set is None:
        tr, va = make_datasets(rc)
        train_set = train_set or tr
        val_set = val_set or va
    model = Seq2SeqModel(rc.model, seed=rc.seed)
    cfg_dict = rc.to_dict()
    kept: list[tuple[float, int, object]] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg_dict, indent=1, sort_keys=True) + "\n")
        log_fh = open(out / "metrics.jsonl", "w", encoding="utf-8")
    else:
        log_fh = None

    def on_epoch(epoch, rec, m):
        metric = float(rec.get("val_metric", -rec["train_loss"]))
        ck = Checkpoint(m.state_dict(), cfg_dict, rec["step"], metric)
        if out is not None:
            ck = ck.save(out / f"epoch{epoch:03d}")
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()
        kept.append((metric, epoch, ck))
        # later epochs win ties
        kept.sort(key=lambda x: (-x[0], -x[1]))
        for _, _, dropped in kept[rc.average_best:]:
            if out is not None:
                for suffix in (".json", ".bin"):
                    Path(dropped).with_suffix(suffix).unlink(missing_ok=True)
        del kept[rc.average_best:]

    try:
        history = fit(model, train_set, val_set, rc.optim, seed=rc.seed, max_len_ratio=rc.max_len_ratio,
                      on_epoch=on_epoch)
    finally:
        if log_fh is not None:
            log_fh.close()
    averaged = None
    if kept:
        averaged = average_checkpoints([c for _, _, c in kept])
        if out is not None:
            averaged.save(out / "averaged")
    return TrainResult(model, history, [(m, c) for m, _, c in kept], averaged)


def model_from_checkpoint(ckpt) -> tuple[Seq2SeqModel, RunConfig]:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if config_hash(ckpt.config) != ckpt.config_hash:
        raise CheckpointMismatchError("checkpoint config does not match its config_hash")
    rc = RunConfig.from_dict(ckpt.config)
    model = Seq2SeqModel(rc.model, seed=rc.seed)
    try:
        model.load_state_dict(ckpt.tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointMismatchError(str(exc)) from exc
    return model, rc


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SSQ_THREADS", "1")))
    except ValueError:
        return 1


def _decode_chunk(model, chunk, beam, ratio):
    src, mask = _pad_sources(chunk, model.cfg.src_pad)
    if beam <= 1:
        return greedy_decode(model, src, mask, ratio)
    hyps = []
    for i in range(len(chunk)):
        enc = model.encode(src[i:i + 1, :len(chunk[i].source)])
        cap = int(decode_lengths(enc.mask, ratio)[0])
        hyps.append(list(beam_search(model, enc, beam, cap).tokens))
    return hyps


def evaluate_model(model: Seq2SeqModel, dataset: TaskDataset, beam: int = 1, max_len_ratio: float = 1.0,
                   bucket_edges=None, batch_size: int = 64) -> Metrics | dict:
    """Decode every example and score it.

    Token tasks give bucketed :class:`Metrics`; continuous tasks give a dict of
    teacher-forced and free-running L1.
    """
    if dataset.is_continuous:
        tf = teacher_forced_loss(model, dataset, batch_size)
        errs, n = 0.0, 0
        for i in range(0, len(dataset), batch_size):
            chunk = dataset.examples[i:i + batch_size]
            src, mask = _pad_sources(chunk, model.cfg.src_pad)
            gen = generate_frames(model, src, mask, [len(ex.target) for ex in chunk])
            for ex, g in zip(chunk, gen):
                errs += float(np.abs(g - ex.target).sum())
                n += ex.target.size
        return {"teacher_forced_l1": tf, "free_running_l1": errs / max(n, 1), "count": len(dataset)}
    chunks = [dataset.examples[i:i + batch_size] for i in range(0, len(dataset), batch_size)]
    workers = min(_threads(), len(chunks)) or 1
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda c: _decode_chunk(model, c, beam, max_len_ratio), chunks))
    else:
        parts = [_decode_chunk(model, c, beam, max_len_ratio) for c in chunks]
    hyps = [h for p in parts for h in p]
    refs = [ex.content() for ex in dataset]
    return error_rate(refs, hyps, bucket_edges)


def _write_metrics(metrics: Metrics, out_prefix: Path, label: str = "") -> None:
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    out_prefix.with_suffix(".json").write_text(json.dumps(metrics.to_dict(), indent=1) + "\n")
    with open(out_prefix.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        w.writerows(metrics.to_csv_rows(label))


def evaluate(ckpt, dataset: TaskDataset, beam: int | None = None, out_prefix=None):
    """Evaluate a checkpoint on ``dataset``; optionally write ``<prefix>.json`` and ``.csv``."""
    model, rc = model_from_checkpoint(ckpt)
    if dataset.vocab_size != rc.model.vocab_size or dataset.is_continuous != (rc.model.output_head == "continuous"):
        raise CheckpointMismatchError("dataset does not match the checkpoint's model configuration")
    beam = rc.beam_size if beam is None else beam
    res = evaluate_model(model, dataset, beam, rc.max_len_ratio, default_bucket_edges(rc.train_len[1]))
    if out_prefix is not None:
        out_prefix = Path(out_prefix)
        if isinstance(res, Metrics):
            _write_metrics(res, out_prefix)
        else:
            out_prefix.parent.mkdir(parents=True, exist_ok=True)
            out_prefix.with_suffix(".json").write_text(json.dumps(res, indent=1) + "\n")
    return res


def _final_model(result: TrainResult, rc: RunConfig) -> Seq2SeqModel:
    if result.averaged is None:
        return result.model
    model = Seq2SeqModel(rc.model, seed=rc.seed)
    model.load_state_dict(result.averaged.tensors)
    return model


def run_longform_experiment(rc: RunConfig, out_dir=None) -> dict:
    """Short-sequence training, long-form evaluation, for both decoder variants.

    For each variant: train on the configured token task, average the best
    checkpoints, evaluate on an in-distribution set and on its ``longform_k``-fold
    concatenation, bucketed by multiples of the longest training length.  Then
    train both variants on the continuous task and record per-epoch L1 curves.
    """
    out = Path(out_dir or rc.out_dir) if (out_dir or rc.out_dir) else None
    task = rc.task if rc.task != "continuous" else "copy"
    base = rc.replace(task=task, **{"model.output_head": "token"})
    V = base.model.vocab_size
    gen = gen_copy_task if task == "copy" else gen_reverse_task
    train_set, val_set = make_datasets(base)
    eval_orig = gen(rc.eval_size, base.train_len, V, rc.data_seed + 2000)
    eval_long = concat_longform(gen(rc.eval_size * rc.longform_k, base.train_len, V, rc.data_seed + 3000),
                                rc.longform_k)
    edges = default_bucket_edges(base.train_len[1], rc.longform_k)
    report: dict = {"task": task, "seed": rc.seed, "bucket_edges": edges, "variants": {}, "loss_curves": {}}
    for variant in ("s4", "transformer"):
        vrc = base.replace(**{"model.variant": variant})
        sub = None if out is None else out / variant
        result = train(vrc, train_set, val_set, sub)
        model = _final_model(result, vrc)
        blocks = {}
        for name, ds in (("original", eval_orig), ("longform", eval_long)):
            m = evaluate_model(model, ds, rc.beam_size, rc.max_len_ratio, edges)
            blocks[name] = m.to_dict()
            if out is not None:
                _write_metrics(m, out / f"{variant}_{name}", f"{variant}/{name}")
        report["variants"][variant] = {
            "parameters": model.parameter_count(),
            "history": result.history,
            **blocks,
        }
    # continuous task: loss curves for both variants under one schedule
    crc = rc.replace(task="continuous", train_size=rc.continuous_train_size,
                     **{"model.output_head": "continuous", "optim.epochs": rc.continuous_epochs})
    ctrain, cval = make_datasets(crc)
    for variant in ("s4", "transformer"):
        vrc = crc.replace(**{"model.variant": variant})
        result = train(vrc, ctrain, cval, None)
        report["loss_curves"][variant] = {
            "parameters": result.model.parameter_count(),
            "train_l1": [h["train_loss"] for h in result.history],
            "val_l1": [h["val_loss"] for h in result.history],
        }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        with open(out / "error_by_length.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for variant, blocks in report["variants"].items():
                for name in ("original", "longform"):
                    m = blocks[name]
                    for b in m["buckets"]:
                        w.writerow([f"{variant}/{name}", f"{b['lo']:g}", f"{b['hi']:g}", b["count"],
                                    b["ref_tokens"], b["errors"], repr(b["error_rate"])])
        with open(out / "loss_curves.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "epoch", "train_l1", "val_l1"])
            for variant, c in report["loss_curves"].items():
                for e, (a, b) in enumerate(zip(c["train_l1"], c["val_l1"]), 1):
                    w.writerow([variant, e, repr(a), repr(b)])
    return report
