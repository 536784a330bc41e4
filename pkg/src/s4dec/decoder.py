"""Sequence-to-sequence decoder stacks.

Two variants share one layout, pre-LayerNorm blocks with dropout, stochastic
depth and a residual path:

* ``s4``: [S4 block -> source attention -> feed-forward] per layer, with no
  positional encoding anywhere on the target side;
* ``transformer``: masked self-attention instead of the S4 block, with sinusoidal
  positional encoding added to the scaled target embeddings.

Training runs the whole teacher-forced sequence in parallel
(:func:`decoder_forward_train`); inference advances one position at a time
from a :class:`DecoderState` (:func:`decoder_step`).  The S4 variant's state has
a fixed size, the Transformer's key/value cache grows with the position.

The encoder here is only a stand-in that produces an :class:`EncoderOutput`:
token embeddings over a fixed context window, two feed-forward layers and a
LayerNorm.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import (
    AllMaskedRowError,
    ConfigError,
    DimensionMismatchError,
    OddModelDimError,
    StateCorruptError,
    VariantMismatchError,
)
from .s4_layer import S4Layer, S4State

__all__ = [
    "DecoderConfig",
    "EncoderOutput",
    "DecoderState",
    "Seq2SeqModel",
    "sinusoidal_pe",
    "multi_head_attention",
    "decoder_forward_train",
    "s4_decoder_forward_train",
    "transformer_decoder_forward_train",
    "decoder_init_state",
    "decoder_step",
]


@dataclass
class DecoderConfig:
    """Model hyperparameters.

    Full-scale values are 6 decoder layers, ``d_model=512`` and a state size of
    64; the defaults are the desk-scale ones.
    """

    num_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    state_size: int = 16
    dropout: float = 0.1
    stochastic_depth_p: float = 0.1
    variant: str = "s4"
    output_head: str = "token"
    vocab_size: int = 16  # content tokens; BOS, EOS and PAD are appended
    feature_dim: int = 8
    src_vocab_size: int = 16
    encoder_context: int = 8
    encoder_hidden: int = 256
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in ("s4", "transformer"):
            raise ConfigError(f"variant must be 's4' or 'transformer', got {self.variant!r}")
        if self.output_head not in ("token", "continuous"):
            raise ConfigError(f"output_head must be 'token' or 'continuous', got {self.output_head!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.stochastic_depth_p < 1.0:
            raise ConfigError("dropout and stochastic_depth_p must lie in [0, 1)")
        if self.num_layers < 0 or self.state_size < 1:
            raise ConfigError("num_layers must be >= 0 and state_size >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    # token layout: content 0..V-1, then BOS, EOS, PAD
    @property
    def bos(self) -> int:
        return self.vocab_size

    @property
    def eos(self) -> int:
        return self.vocab_size + 1

    @property
    def pad(self) -> int:
        return self.vocab_size + 2

    @property
    def src_pad(self) -> int:
        return self.src_vocab_size

    @property
    def output_dim(self) -> int:
        return self.vocab_size + 2 if self.output_head == "token" else self.feature_dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EncoderOutput:
    """Encoder memory ``(B, T, d_model)`` and its validity mask ``(B, T)``."""

    memory: Tensor
    mask: np.ndarray

    def __post_init__(self):
        if not isinstance(self.memory, Tensor):
            self.memory = Tensor(np.asarray(self.memory))
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.memory.ndim == 2:
            self.memory = Tensor(self.memory.data[None])
        if self.mask.ndim == 1:
            self.mask = self.mask[None]
        if self.mask.shape != self.memory.shape[:2]:
            raise DimensionMismatchError(
                f"mask {self.mask.shape} does not match memory rows {self.memory.shape[:2]}")


def sinusoidal_pe(L: int, d_model: int) -> np.ndarray:
    """``PE[pos, 2i] = sin(pos / 10000^(2i/d))``, ``PE[pos, 2i+1] = cos(...)``."""
    if d_model % 2:
        raise OddModelDimError(f"d_model must be even, got {d_model}")
    pos = np.arange(L, dtype=np.float64)[:, None]
    inv = 10000.0 ** (-np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.empty((L, d_model))
    pe[:, 0::2] = np.sin(pos * inv)
    pe[:, 1::2] = np.cos(pos * inv)
    return pe


# ---------------------------------------------------------------------------
# small parameter containers
# ---------------------------------------------------------------------------

class _Params:
    def __init__(self, store: dict, rng, dtype):
        self.store = store
        self.rng = rng
        self.dtype = dtype

    def add(self, name, value, tag):
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, tag=tag, name=name)
        self.store[name] = t
        return t


class Linear:
    def __init__(self, P: _Params, name: str, d_in: int, d_out: int, zero: bool = False):
        bound = 1.0 / math.sqrt(d_in)
        w = np.zeros((d_out, d_in)) if zero else P.rng.uniform(-bound, bound, (d_out, d_in))
        self.weight = P.add(f"{name}.weight", w, "weight")
        self.bias = P.add(f"{name}.bias", np.zeros(d_out), "bias")

    def __call__(self, x):
        return x @ self.weight.T + self.bias


class LayerNorm:
    def __init__(self, P: _Params, name: str, d: int):
        self.gamma = P.add(f"{name}.gamma", np.ones(d), "norm")
        self.beta = P.add(f"{name}.beta", np.zeros(d), "norm")

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta)


class AttentionWeights:
    def __init__(self, P: _Params, name: str, d: int):
        self.q = Linear(P, f"{name}.q", d, d)
        self.k = Linear(P, f"{name}.k", d, d)
        self.v = Linear(P, f"{name}.v", d, d)
        self.o = Linear(P, f"{name}.o", d, d)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, L, d = x.shape
    return x.reshape(B, L, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, h, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, h * dh)


def project_kv(weights: AttentionWeights, memory: Tensor, n_heads: int) -> tuple[Tensor, Tensor]:
    return _split_heads(weights.k(memory), n_heads), _split_heads(weights.v(memory), n_heads)


def attend(weights: AttentionWeights, query: Tensor, k: Tensor, v: Tensor, mask, n_heads: int,
           return_probs: bool = False):
    """Scaled dot-product attention of ``query`` over pre-projected ``k``/``v``.

    ``mask`` is boolean, broadcastable to ``(B, Lq, Lk)``, True where attending is
    allowed.  Masked entries receive exactly zero probability.
    """
    q = _split_heads(weights.q(query), n_heads)
    dh = q.shape[-1]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    m4 = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 2:
            mask = mask[None]
        full = np.broadcast_to(mask, (scores.shape[0], scores.shape[2], scores.shape[3]))
        if not full.any(axis=-1).all():
            raise AllMaskedRowError("a query row has every key masked")
        m4 = mask[:, None]
    probs = ad.softmax(scores, axis=-1, mask=m4)
    out = weights.o(_merge_heads(probs @ v))
    return (out, probs) if return_probs else out


def multi_head_attention(Q, K, V, mask, n_heads: int, weights: AttentionWeights,
                         return_probs: bool = False):
    """Multi-head attention with queries ``Q (B, Lq, d)`` over keys/values ``K, V (B, Lk, d)``."""
    Q, K, V = (x if isinstance(x, Tensor) else Tensor(np.asarray(x)) for x in (Q, K, V))
    if Q.shape[-1] % n_heads or K.shape[-1] != Q.shape[-1] or K.shape[:2] != V.shape[:2]:
        raise DimensionMismatchError(
            f"incompatible attention shapes Q{Q.shape} K{K.shape} V{V.shape} heads={n_heads}")
    k = _split_heads(weights.k(K), n_heads)
    v = _split_heads(weights.v(V), n_heads)
    return attend(weights, Q, k, v, mask, n_heads, return_probs)


class FeedForward:
    def __init__(self, P: _Params, name: str, d: int, d_ffn: int):
        self.fc1 = Linear(P, f"{name}.1", d, d_ffn)
        self.fc2 = Linear(P, f"{name}.2", d_ffn, d)

    def __call__(self, x):
        return self.fc2(self.fc1(x).relu())


class DecoderLayer:
    def __init__(self, P: _Params, cfg: DecoderConfig, i: int, seed: int):
        pre = f"decoder.{i}"
        d = cfg.d_model
        self.norms = [LayerNorm(P, f"{pre}.norms.{j}", d) for j in range(3)]
        if cfg.variant == "s4":
            self.s4 = S4Layer(d, cfg.state_size, d, seed=seed, dtype=P.dtype)
            P.store.update(self.s4.named_parameters(f"{pre}.s4."))
            self.self_attn = None
        else:
            self.s4 = None
            self.self_attn = AttentionWeights(P, f"{pre}.self_attn", d)
        self.src_attn = AttentionWeights(P, f"{pre}.src_attn", d)
        self.ffn = FeedForward(P, f"{pre}.ffn", d, cfg.d_ffn)


class Encoder:
    """Context-window feed-forward stand-in for an acoustic encoder."""

    def __init__(self, P: _Params, cfg: DecoderConfig):
        d, c = cfg.d_model, cfg.encoder_context
        self.cfg = cfg
        self.embed = P.add("encoder.embed", P.rng.standard_normal((cfg.src_vocab_size + 1, d)) / math.sqrt(d),
                           "embedding")
        self.ff1 = Linear(P, "encoder.ff1", (2 * c + 1) * d, cfg.encoder_hidden)
        self.ff2 = Linear(P, "encoder.ff2", cfg.encoder_hidden, d)
        self.norm = LayerNorm(P, "encoder.norm", d)

    def __call__(self, src, src_mask) -> EncoderOutput:
        c, pad = self.cfg.encoder_context, self.cfg.src_pad
        src = np.where(src_mask, src, pad)
        padded = np.pad(src, ((0, 0), (c, c)), constant_values=pad)
        T = src.shape[1]
        idx = np.stack([padded[:, j:j + T] for j in range(2 * c + 1)], axis=-1)
        e = ad.embedding(self.embed, idx)
        B = src.shape[0]
        h = e.reshape(B, T, -1)
        mem = self.norm(self.ff2(self.ff1(h).relu()))
        return EncoderOutput(mem, src_mask)


class Seq2SeqModel:
    """Encoder stub plus an S4 or Transformer decoder stack.

    All trainable tensors live in ``self.params`` under their checkpoint names.
    """

    def __init__(self, cfg: DecoderConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        P = _Params(self.params, rng, self.dtype)
        d = cfg.d_model
        self.encoder = Encoder(P, cfg)
        if cfg.output_head == "token":
            std = 1.0 if cfg.variant == "s4" else 1.0 / math.sqrt(d)
            self.embed = P.add("embed.weight", rng.standard_normal((cfg.vocab_size + 3, d)) * std, "embedding")
            self.in_proj = None
        else:
            self.embed = None
            self.in_proj = Linear(P, "embed.proj", cfg.feature_dim, d)
        layer_seeds = rng.integers(0, 2**31 - 1, size=max(cfg.num_layers, 1))
        self.layers = [DecoderLayer(P, cfg, i, int(layer_seeds[i])) for i in range(cfg.num_layers)]
        self.head_norm = LayerNorm(P, "head.norm", d)
        self.head = Linear(P, "head.proj", d, cfg.output_dim, zero=True)
        self._pe_cache = np.zeros((0, d))

    # -- helpers -----------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self, prefix: str = "") -> int:
        return sum(t.size for k, t in self.params.items() if k.startswith(prefix))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)[:5]}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise DimensionMismatchError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(self.dtype).copy()

    def positional_table(self, L: int) -> np.ndarray:
        if self._pe_cache.shape[0] < L:
            self._pe_cache = sinusoidal_pe(max(L, 2 * self._pe_cache.shape[0]), self.cfg.d_model)
        return self._pe_cache[:L]

    def encode(self, src, src_mask=None) -> EncoderOutput:
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        if src_mask is None:
            src_mask = np.ones(src.shape, dtype=bool)
        return self.encoder(src, np.atleast_2d(np.asarray(src_mask, dtype=bool)))

    def embed_inputs(self, tgt_in, offset: int = 0) -> Tensor:
        """Target-side input vectors; ``offset`` is the absolute position of ``tgt_in[:, 0]``."""
        cfg = self.cfg
        if cfg.output_head == "token":
            x = ad.embedding(self.embed, np.asarray(tgt_in, dtype=np.int64))
        else:
            frames = tgt_in if isinstance(tgt_in, Tensor) else Tensor(np.asarray(tgt_in, dtype=self.dtype))
            x = self.in_proj(frames)
        if cfg.variant == "transformer":
            L = x.shape[1]
            pe = self.positional_table(offset + L)[offset:offset + L].astype(self.dtype)
            if cfg.output_head == "token":
                x = x * math.sqrt(cfg.d_model)
            x = x + pe
        return x

    def output(self, x: Tensor) -> Tensor:
        return self.head(self.head_norm(x))


# ---------------------------------------------------------------------------
# teacher-forced parallel forward
# ---------------------------------------------------------------------------

def _residual(x, h, cfg, rng, train):
    if train and rng is not None:
        if cfg.dropout > 0:
            keep = (rng.random(h.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
            h = h * keep.astype(h.dtype)
        if cfg.stochastic_depth_p > 0:
            p = cfg.stochastic_depth_p
            survive = (rng.random((h.shape[0],) + (1,) * (h.ndim - 1)) >= p) / (1.0 - p)
            h = h * survive.astype(h.dtype)
    return x + h


def decoder_forward_train(model: Seq2SeqModel, tgt_in, enc: EncoderOutput, rng=None,
                          train: bool = False) -> Tensor:
    """Parallel forward over a teacher-forced (shifted-right) target batch.

    ``tgt_in`` is ``(B, L)`` token ids or ``(B, L, F)`` frames.  Returns logits or
    features of shape ``(B, L, output_dim)``.  Dropout and stochastic depth are
    active only when ``train`` is set and a numpy ``Generator`` is given.
    """
    cfg = model.cfg
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    x = model.embed_inputs(tgt_in)
    if train and rng is not None and cfg.dropout > 0:
        x = x * ((rng.random(x.shape) >= cfg.dropout) / (1.0 - cfg.dropout)).astype(x.dtype)
    L = x.shape[1]
    causal = np.tril(np.ones((L, L), dtype=bool))[None]
    src_mask = enc.mask[:, None, :]
    for layer in model.layers:
        h = layer.norms[0](x)
        if layer.s4 is not None:
            h = layer.s4.forward_conv(h)
        else:
            h = multi_head_attention(h, h, h, causal, cfg.n_heads, layer.self_attn)
        x = _residual(x, h, cfg, rng, train)
        h = layer.norms[1](x)
        k, v = project_kv(layer.src_attn, enc.memory, cfg.n_heads)
        h = attend(layer.src_attn, h, k, v, src_mask, cfg.n_heads)
        x = _residual(x, h, cfg, rng, train)
        h = layer.ffn(layer.norms[2](x))
        x = _residual(x, h, cfg, rng, train)
    return model.output(x)


def s4_decoder_forward_train(model, tgt_in, enc, rng=None, train=False) -> Tensor:
    if model.cfg.variant != "s4":
        raise VariantMismatchError(f"model variant is {model.cfg.variant!r}, expected 's4'")
    return decoder_forward_train(model, tgt_in, enc, rng, train)


def transformer_decoder_forward_train(model, tgt_in, enc, rng=None, train=False) -> Tensor:
    if model.cfg.variant != "transformer":
        raise VariantMismatchError(f"model variant is {model.cfg.variant!r}, expected 'transformer'")
    return decoder_forward_train(model, tgt_in, enc, rng, train)


# ---------------------------------------------------------------------------
# incremental inference
# ---------------------------------------------------------------------------

@dataclass
class DecoderState:
    """Everything a decoding stream carries between steps, batched over streams.

    ``s4_states`` (s4 variant) has a fixed shape; ``self_kv`` (transformer)
    holds per-layer key/value caches of length ``position``.
    """

    position: int
    src_kv: list
    src_mask: np.ndarray
    s4_states: list | None = None
    self_kv: list | None = None
    variant: str = field(default="s4")

    @property
    def batch_size(self) -> int:
        return self.src_mask.shape[0]

    def reorder(self, index) -> "DecoderState":
        """Select/duplicate streams, e.g. when beam search keeps the best hypotheses."""
        index = np.asarray(index, dtype=np.int64)
        s4 = None if self.s4_states is None else [S4State(s.x[index], s.cache) for s in self.s4_states]
        kv = None if self.self_kv is None else [(k[index], v[index]) for k, v in self.self_kv]
        src_kv = [(Tensor(k.data[index]), Tensor(v.data[index])) for k, v in self.src_kv]
        return DecoderState(self.position, src_kv, self.src_mask[index], s4, kv, self.variant)

    def recurrent_size(self) -> int:
        """Number of scalars carried in the position-dependent part of the state."""
        if self.s4_states is not None:
            return sum(s.x.size for s in self.s4_states)
        return sum(k.size + v.size for k, v in self.self_kv)


def decoder_init_state(model: Seq2SeqModel, enc: EncoderOutput) -> DecoderState:
    """Zero recurrent states or empty caches; source keys/values projected once."""
    cfg = model.cfg
    B = enc.mask.shape[0]
    src_kv = [project_kv(layer.src_attn, enc.memory, cfg.n_heads) for layer in model.layers]
    if cfg.variant == "s4":
        s4 = [layer.s4.init_state((B,)) for layer in model.layers]
        return DecoderState(0, src_kv, enc.mask, s4_states=s4, variant="s4")
    dh = cfg.d_model // cfg.n_heads
    empty = np.zeros((B, cfg.n_heads, 0, dh), dtype=model.dtype)
    kv = [(empty, empty) for _ in model.layers]
    return DecoderState(0, src_kv, enc.mask, self_kv=kv, variant="transformer")


def decoder_step(model: Seq2SeqModel, state: DecoderState, prev) -> tuple[DecoderState, np.ndarray]:
    """Consume one previous token (``(B,)`` ids) or frame (``(B, F)``) and emit the next output.

    Returns the new state and logits/features of shape ``(B, output_dim)``.
    Inference is deterministic: no dropout, no stochastic depth.
    """
    cfg = model.cfg
    if state.variant != cfg.variant:
        raise StateCorruptError(f"state built for {state.variant!r}, model is {cfg.variant!r}")
    if state.self_kv is not None and any(k.shape[2] != state.position for k, _ in state.self_kv):
        raise StateCorruptError("self-attention cache length disagrees with position counter")
    prev = np.asarray(prev)
    if cfg.output_head == "token":
        tgt = prev.reshape(-1, 1).astype(np.int64)
    else:
        tgt = prev.reshape(prev.shape[0], 1, cfg.feature_dim).astype(model.dtype)
    x = model.embed_inputs(tgt, offset=state.position)
    src_mask = state.src_mask[:, None, :]
    new_s4, new_kv = [], []
    for i, layer in enumerate(model.layers):
        h = layer.norms[0](x)
        if layer.s4 is not None:
            s, y = layer.s4.forward_step(state.s4_states[i], h.data[:, 0, :])
            new_s4.append(s)
            h = Tensor(y[:, None, :])
        else:
            k_new, v_new = project_kv(layer.self_attn, h, cfg.n_heads)
            k_old, v_old = state.self_kv[i]
            k = np.concatenate([k_old, k_new.data], axis=2)
            v = np.concatenate([v_old, v_new.data], axis=2)
            new_kv.append((k, v))
            h = attend(layer.self_attn, h, Tensor(k), Tensor(v), None, cfg.n_heads)
        x = x + h
        k, v = state.src_kv[i]
        x = x + attend(layer.src_attn, layer.norms[1](x), k, v, src_mask, cfg.n_heads)
        x = x + layer.ffn(layer.norms[2](x))
    out = model.output(x).data[:, 0, :]
    new_state = DecoderState(
        state.position + 1, state.src_kv, state.src_mask,
        new_s4 if cfg.variant == "s4" else None,
        new_kv if cfg.variant == "transformer" else None,
        state.variant,
    )
    return new_state, out
