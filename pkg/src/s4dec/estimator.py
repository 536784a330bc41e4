"""scikit-learn style wrapper around the sequence-to-sequence models.

``X`` is a list of integer token sequences; ``y`` is a list of integer target
sequences (token head) or of ``(len(x), F)`` float arrays (continuous head).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .decoder import DecoderConfig, Seq2SeqModel
from .exceptions import ConfigError, EmptyInputError, LengthMismatchError
from .harness import _decode_chunk, evaluate_model
from .tasks import ContinuousExample, DiscreteExample, TaskDataset
from .training import OptimConfig, _pad_sources, fit, generate_frames

__all__ = ["Seq2SeqEstimator", "check_sequences", "check_targets"]


def check_sequences(X, vocab_size: int, name: str = "X") -> list[tuple]:
    """Validate a list of non-empty integer sequences with ids in ``[0, vocab_size)``."""
    if X is None or len(X) == 0:
        raise EmptyInputError(f"{name} is empty")
    out = []
    for i, seq in enumerate(X):
        arr = np.asarray(seq)
        if arr.ndim != 1 or arr.size == 0:
            raise EmptyInputError(f"{name}[{i}] must be a non-empty 1-D sequence")
        if arr.dtype.kind not in "iu":
            if arr.dtype.kind == "f" and np.all(arr == np.round(arr)):
                arr = arr.astype(np.int64)
            else:
                raise ConfigError(f"{name}[{i}] must contain integer token ids")
        if arr.min() < 0 or arr.max() >= vocab_size:
            raise ConfigError(f"{name}[{i}] has ids outside [0, {vocab_size})")
        out.append(tuple(int(t) for t in arr))
    return out


def check_targets(X: list, y, continuous: bool, vocab_size: int, feature_dim: int) -> list:
    if y is None or len(y) != len(X):
        raise LengthMismatchError(f"y has {0 if y is None else len(y)} entries for {len(X)} inputs")
    if not continuous:
        return check_sequences(y, vocab_size, "y")
    out = []
    for i, (x, t) in enumerate(zip(X, y)):
        t = np.asarray(t, dtype=np.float64)
        if t.shape != (len(x), feature_dim):
            raise LengthMismatchError(f"y[{i}] has shape {t.shape}, expected {(len(x), feature_dim)}")
        out.append(t)
    return out


class Seq2SeqEstimator(BaseEstimator):
    """Encoder plus S4 (or Transformer) decoder trained with teacher forcing.

    ``predict`` decodes greedily (``beam=1``) or with beam search; for the
    continuous head it generates one frame per source token.  ``score`` is exact
    sequence accuracy for tokens and negative mean L1 for frames.
    """

    def __init__(self, variant="s4", output_head="token", vocab_size=16, feature_dim=8, num_layers=2,
                 d_model=64, n_heads=4, d_ffn=256, state_size=16, dropout=0.1, stochastic_depth_p=0.1,
                 epochs=20, batch_size=32, lr_peak=2e-3, warmup=500, lr_gamma=4e-4, weight_decay=0.01,
                 beam=1, max_len_ratio=1.0, seed=0):
        self.variant = variant
        self.output_head = output_head
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        self.num_layers = num_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ffn = d_ffn
        self.state_size = state_size
        self.dropout = dropout
        self.stochastic_depth_p = stochastic_depth_p
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_peak = lr_peak
        self.warmup = warmup
        self.lr_gamma = lr_gamma
        self.weight_decay = weight_decay
        self.beam = beam
        self.max_len_ratio = max_len_ratio
        self.seed = seed

    @property
    def _continuous(self) -> bool:
        return self.output_head == "continuous"

    def _config(self) -> DecoderConfig:
        return DecoderConfig(num_layers=self.num_layers, d_model=self.d_model, n_heads=self.n_heads,
                             d_ffn=self.d_ffn, state_size=self.state_size, dropout=self.dropout,
                             stochastic_depth_p=self.stochastic_depth_p, variant=self.variant,
                             output_head=self.output_head, vocab_size=self.vocab_size,
                             feature_dim=self.feature_dim, src_vocab_size=self.vocab_size)

    def _dataset(self, X, y) -> TaskDataset:
        if self._continuous:
            exs = [ContinuousExample(x, t) for x, t in zip(X, y)]
            return TaskDataset("continuous", self.vocab_size, exs, self.feature_dim)
        bos, eos = self.vocab_size, self.vocab_size + 1
        return TaskDataset("seq", self.vocab_size, [DiscreteExample(x, (bos, *t, eos)) for x, t in zip(X, y)])

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_sequences(X, self.vocab_size)
        y = check_targets(X, y, self._continuous, self.vocab_size, self.feature_dim)
        val = None
        if X_val is not None:
            Xv = check_sequences(X_val, self.vocab_size, "X_val")
            val = self._dataset(Xv, check_targets(Xv, y_val, self._continuous, self.vocab_size,
                                                  self.feature_dim))
        self.model_ = Seq2SeqModel(self._config(), seed=self.seed)
        opt = OptimConfig(lr_peak=self.lr_peak, warmup=self.warmup, lr_gamma=self.lr_gamma,
                          weight_decay=self.weight_decay, batch_size=self.batch_size, epochs=self.epochs)
        self.history_ = fit(self.model_, self._dataset(X, y), val, opt, seed=self.seed,
                            max_len_ratio=self.max_len_ratio)
        self.n_parameters_ = self.model_.parameter_count()
        return self

    def predict(self, X) -> list:
        check_is_fitted(self, "model_")
        X = check_sequences(X, self.vocab_size)
        if self._continuous:
            src, mask = _pad_sources([ContinuousExample(x, None) for x in X], self.model_.cfg.src_pad)
            return generate_frames(self.model_, src, mask, [len(x) for x in X])
        exs = self._dataset(X, [()] * len(X)).examples  # targets unused when decoding
        out = []
        for i in range(0, len(exs), 64):
            out.extend(_decode_chunk(self.model_, exs[i:i + 64], self.beam, self.max_len_ratio))
        return [list(h) for h in out]

    def score(self, X, y) -> float:
        check_is_fitted(self, "model_")
        X = check_sequences(X, self.vocab_size)
        y = check_targets(X, y, self._continuous, self.vocab_size, self.feature_dim)
        res = evaluate_model(self.model_, self._dataset(X, y), self.beam, self.max_len_ratio)
        if self._continuous:
            return -res["free_running_l1"]
        return res.exact_match
