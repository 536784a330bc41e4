"""Length-normalized beam search over any incremental decoder.

The search only needs an object with ``bos``, ``eos``, ``init_state(enc)``,
``step(state, tokens) -> (state, logits)`` and ``reorder(state, index)``;
:class:`DecoderStepper` adapts a :class:`~s4dec.decoder.Seq2SeqModel`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import Seq2SeqModel, decoder_init_state, decoder_step

__all__ = ["Hypothesis", "DecoderStepper", "beam_search", "greedy_search", "sequence_score"]


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple  # content tokens, EOS stripped
    logprob: float
    length: int  # generated tokens, EOS included when emitted
    score: float  # logprob / length when length-normalized


class DecoderStepper:
    def __init__(self, model: Seq2SeqModel):
        self.model = model
        self.bos = model.cfg.bos
        self.eos = model.cfg.eos

    def init_state(self, enc):
        return decoder_init_state(self.model, enc)

    def step(self, state, tokens):
        return decoder_step(self.model, state, tokens)

    def reorder(self, state, index):
        return state.reorder(index)


def _as_stepper(model):
    return DecoderStepper(model) if isinstance(model, Seq2SeqModel) else model


def _log_softmax(x):
    x = np.asarray(x, dtype=np.float64)
    s = x - x.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def sequence_score(logprob: float, length: int, length_penalty: bool = True) -> float:
    return logprob / max(length, 1) if length_penalty else logprob


def _finish(tokens, logprob, with_eos, length_penalty):
    n = len(tokens) + int(with_eos)
    return Hypothesis(tuple(tokens), float(logprob), n, sequence_score(logprob, n, length_penalty))


def greedy_search(model, enc_out, max_len: int, length_penalty: bool = True) -> Hypothesis:
    """Argmax decoding of a single source, scored like a beam hypothesis."""
    st = _as_stepper(model)
    state = st.init_state(enc_out)
    prev, toks, lp = st.bos, [], 0.0
    while True:
        state, logits = st.step(state, np.array([prev]))
        logp = _log_softmax(logits)[0]
        v = int(np.argmax(logp))
        lp += logp[v]
        if v == st.eos:
            return _finish(toks, lp, True, length_penalty)
        toks.append(v)
        if len(toks) >= max_len:
            return _finish(toks, lp, False, length_penalty)
        prev = v


def beam_search(model, enc_out, beam: int, max_len: int, length_penalty: bool = True) -> Hypothesis:
    """Beam search for one source sequence.

    At every step the ``beam`` best expansions by accumulated log-probability
    are kept; those ending in EOS are set aside as finished.  Hypotheses that
    reach ``max_len`` content tokens finish without EOS.  Finished hypotheses
    compete on ``logprob / length``.  The greedy path is scored as well and
    wins ties-or-better, so the result is never worse than greedy.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    st = _as_stepper(model)
    state = st.init_state(enc_out)
    alive: list[tuple] = [()]
    scores = np.zeros(1)
    prev = np.array([st.bos])
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        state, logits = st.step(state, prev)
        logp = _log_softmax(logits)
        V = logp.shape[-1]
        cand = (scores[:, None] + logp).reshape(-1)
        order = np.argsort(-cand, kind="stable")[:beam]
        keep_idx, keep_tok, keep_score = [], [], []
        for flat in order:
            i, v = divmod(int(flat), V)
            if v == st.eos:
                finished.append(_finish(alive[i], cand[flat], True, length_penalty))
            else:
                keep_idx.append(i)
                keep_tok.append(v)
                keep_score.append(cand[flat])
        if not keep_idx:
            break
        alive = [alive[i] + (v,) for i, v in zip(keep_idx, keep_tok)]
        scores = np.asarray(keep_score)
        if len(alive[0]) >= max_len:
            finished.extend(_finish(h, s, False, length_penalty) for h, s in zip(alive, scores))
            break
        state = st.reorder(state, keep_idx)
        prev = np.asarray(keep_tok)
    best = max(finished, key=lambda h: h.score) if finished else None
    if beam > 1:
        g = greedy_search(st, enc_out, max_len, length_penalty)
        if best is None or g.score > best.score:
            best = g
    return best
