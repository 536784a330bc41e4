"""Synthetic sequence-to-sequence tasks and error-rate metrics.

Token layout for discrete tasks: content tokens ``0..V-1``, ``BOS = V``,
``EOS = V + 1``.  Every generator is a pure function of its arguments.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConfigError

__all__ = [
    "DiscreteExample",
    "ContinuousExample",
    "TaskDataset",
    "Bucket",
    "Metrics",
    "gen_copy_task",
    "gen_reverse_task",
    "gen_continuous_task",
    "continuous_dictionary",
    "concat_longform",
    "edit_distance",
    "error_rate",
    "default_bucket_edges",
    "write_jsonl",
    "read_jsonl",
]


@dataclass(frozen=True)
class DiscreteExample:
    source: tuple
    target: tuple  # BOS ... EOS

    def content(self) -> tuple:
        return self.target[1:-1]


@dataclass(frozen=True, eq=False)
class ContinuousExample:
    source: tuple
    target: np.ndarray  # (T, F)

    def __eq__(self, other):
        return (isinstance(other, ContinuousExample) and self.source == other.source
                and np.array_equal(self.target, other.target))


@dataclass
class TaskDataset:
    task: str
    vocab_size: int
    examples: list = field(default_factory=list)
    feature_dim: int | None = None

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    @property
    def is_continuous(self) -> bool:
        return self.task == "continuous"

    def source_lengths(self) -> list[int]:
        return [len(ex.source) for ex in self.examples]


def _check_range(len_range):
    lo, hi = int(len_range[0]), int(len_range[1])
    if lo < 1 or hi < lo:
        raise ConfigError(f"invalid length range {len_range}")
    return lo, hi


def _sources(n, len_range, vocab, rng):
    lo, hi = _check_range(len_range)
    lengths = rng.integers(lo, hi + 1, size=n)
    return [tuple(int(t) for t in rng.integers(0, vocab, size=L)) for L in lengths]


def gen_copy_task(n: int, len_range, vocab: int, seed: int) -> TaskDataset:
    """Targets repeat the source verbatim."""
    rng = np.random.default_rng(seed)
    bos, eos = vocab, vocab + 1
    exs = [DiscreteExample(s, (bos, *s, eos)) for s in _sources(n, len_range, vocab, rng)]
    return TaskDataset("copy", vocab, exs)


def gen_reverse_task(n: int, len_range, vocab: int, seed: int) -> TaskDataset:
    """Targets are the reversed source."""
    rng = np.random.default_rng(seed)
    bos, eos = vocab, vocab + 1
    exs = [DiscreteExample(s, (bos, *s[::-1], eos)) for s in _sources(n, len_range, vocab, rng)]
    return TaskDataset("reverse", vocab, exs)


def continuous_dictionary(vocab: int, F: int, dict_seed: int = 0):
    """Fixed ``(freq, phase)`` tables of shape ``(vocab, F)``; frequencies in rad/frame."""
    rng = np.random.default_rng(dict_seed)
    freq = rng.uniform(0.1, 0.8, size=(vocab, F))
    phase = rng.uniform(0.0, 2 * np.pi, size=(vocab, F))
    return freq, phase


def continuous_target(source: Sequence[int], freq, phase) -> np.ndarray:
    """Frame ``t`` is the mean over ``j <= t`` of ``sin(freq[s_j] * t + phase[s_j])``."""
    src = np.asarray(source, dtype=np.int64)
    T = len(src)
    t = np.arange(T, dtype=np.float64)[:, None, None]
    waves = np.sin(freq[src][None] * t + phase[src][None])  # (t, j, F)
    active = (np.arange(T)[None, :] <= np.arange(T)[:, None])[:, :, None]
    return (waves * active).sum(axis=1) / active.sum(axis=1)


def gen_continuous_task(n: int, len_range, F: int, seed: int, vocab: int = 16,
                        dict_seed: int = 0) -> TaskDataset:
    """Source tokens switch on sinusoids; the target is their running mean, one frame per token.

    The frequency/phase dictionary depends only on ``dict_seed`` so that train
    and validation sets drawn with different seeds share it.
    """
    rng = np.random.default_rng(seed)
    freq, phase = continuous_dictionary(vocab, F, dict_seed)
    exs = [ContinuousExample(s, continuous_target(s, freq, phase))
           for s in _sources(n, len_range, vocab, rng)]
    return TaskDataset("continuous", vocab, exs, feature_dim=F)


def concat_longform(dataset: TaskDataset, k: int = 3) -> TaskDataset:
    """Merge each run of ``k`` consecutive examples into one long example.

    Sources are concatenated.  Discrete targets keep one BOS/EOS pair around the
    concatenated contents; continuous targets are stacked frame-wise.  A
    trailing remainder of fewer than ``k`` examples is dropped.
    """
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    out = []
    for i in range(0, len(dataset) - k + 1, k):
        group = dataset.examples[i:i + k]
        src = tuple(t for ex in group for t in ex.source)
        if dataset.is_continuous:
            out.append(ContinuousExample(src, np.concatenate([ex.target for ex in group], axis=0)))
        else:
            body = tuple(t for ex in group for t in ex.content())
            out.append(DiscreteExample(src, (group[0].target[0], *body, group[0].target[-1])))
    return TaskDataset(dataset.task, dataset.vocab_size, out, dataset.feature_dim)


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


@dataclass
class Bucket:
    lo: float  # exclusive, except for the first bucket
    hi: float  # inclusive
    count: int = 0  # examples
    ref_tokens: int = 0
    errors: int = 0

    @property
    def error_rate(self) -> float:
        return self.errors / self.ref_tokens if self.ref_tokens else float("nan")

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "count": self.count, "ref_tokens": self.ref_tokens,
                "errors": self.errors, "error_rate": self.error_rate}


@dataclass
class Metrics:
    """Error rates bucketed by reference length.

    ``error_rate`` is total edits over total reference tokens, i.e. the bucket
    rates averaged with weights ``ref_tokens``.
    """

    buckets: list
    count: int = 0
    ref_tokens: int = 0
    errors: int = 0
    exact_match: float = float("nan")

    @property
    def error_rate(self) -> float:
        return self.errors / self.ref_tokens if self.ref_tokens else float("nan")

    def bucket_rate(self, i: int) -> float:
        return self.buckets[i].error_rate

    def to_dict(self) -> dict:
        return {"error_rate": self.error_rate, "count": self.count, "ref_tokens": self.ref_tokens,
                "errors": self.errors, "exact_match": self.exact_match,
                "buckets": [b.to_dict() for b in self.buckets]}

    def to_csv_rows(self, label: str = "") -> list[list]:
        rows = [[label, f"{b.lo:g}", f"{b.hi:g}", b.count, b.ref_tokens, b.errors, repr(b.error_rate)]
                for b in self.buckets]
        rows.append([label, "all", "all", self.count, self.ref_tokens, self.errors, repr(self.error_rate)])
        return rows


CSV_HEADER = ["label", "len_lo", "len_hi", "count", "ref_tokens", "errors", "error_rate"]


def default_bucket_edges(train_max_len: int, multiples: int = 3) -> list[float]:
    """``[0, 1x], (1x, 2x], (2x, 3x]`` in multiples of the longest training length."""
    return [float(train_max_len * m) for m in range(1, multiples + 1)]


def error_rate(refs: Iterable[Sequence], hyps: Iterable[Sequence], bucket_edges=None) -> Metrics:
    """Edit-distance error rate, overall and per reference-length bucket.

    ``bucket_edges`` are inclusive upper edges; references longer than the last
    edge land in an extra open-ended bucket.
    """
    refs, hyps = list(refs), list(hyps)
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if bucket_edges is None:
        bucket_edges = [max((len(r) for r in refs), default=0)]
    edges = sorted(float(e) for e in bucket_edges)
    buckets = [Bucket(lo, hi) for lo, hi in zip([0.0] + edges[:-1], edges)]
    overflow = Bucket(edges[-1], float("inf"))
    m = Metrics(buckets)
    exact = 0
    for r, h in zip(refs, hyps):
        r, h = list(r), list(h)
        d = edit_distance(r, h)
        exact += int(r == h)
        b = next((b for b in buckets if len(r) <= b.hi), overflow)
        b.count += 1
        b.ref_tokens += len(r)
        b.errors += d
        m.count += 1
        m.ref_tokens += len(r)
        m.errors += d
    if overflow.count:
        buckets.append(overflow)
    m.exact_match = exact / m.count if m.count else float("nan")
    return m


# -- serialization ----------------------------------------------------------

def _encode_frames(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def _decode_frames(text: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f4").reshape(shape).astype(np.float64)


def write_jsonl(dataset: TaskDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset:
            if dataset.is_continuous:
                rec = {"src": list(ex.source), "tgt_shape": list(ex.target.shape),
                       "tgt": _encode_frames(ex.target)}
            else:
                rec = {"src": list(ex.source), "tgt": list(ex.target)}
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path, task: str | None = None, vocab_size: int | None = None) -> TaskDataset:
    """Load a dataset written by :func:`write_jsonl`.

    Continuous records are recognised by their ``tgt_shape`` key.  When
    ``vocab_size`` is omitted, discrete sets infer it from the BOS token.
    """
    exs = []
    continuous = False
    feature_dim = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        src = tuple(int(t) for t in rec["src"])
        if "tgt_shape" in rec:
            continuous = True
            tgt = _decode_frames(rec["tgt"], rec["tgt_shape"])
            feature_dim = tgt.shape[1]
            exs.append(ContinuousExample(src, tgt))
        else:
            exs.append(DiscreteExample(src, tuple(int(t) for t in rec["tgt"])))
    if vocab_size is None:
        if continuous:
            vocab_size = max((max(ex.source) for ex in exs if ex.source), default=-1) + 1
        else:
            vocab_size = exs[0].target[0] if exs else 0
    if task is None:
        task = "continuous" if continuous else "copy"
    return TaskDataset(task, int(vocab_size), exs, feature_dim)
