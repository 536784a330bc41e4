import itertools
import json

import numpy as np
import pytest

from s4dec.beam import beam_search, greedy_search, sequence_score
from s4dec.checkpoint import Checkpoint, average_checkpoints, load_checkpoint, save_checkpoint
from s4dec.decoder import DecoderConfig, Seq2SeqModel
from s4dec.exceptions import CheckpointMismatchError, ManifestMismatchError
from s4dec.training import greedy_decode


class ToyModel:
    """Prefix-dependent logits over {0, 1, EOS}; no neural network involved."""

    bos, eos = 3, 2

    def __init__(self, seed, sharp=2.0):
        self.seed = seed
        self.sharp = sharp

    def logits(self, prefix):
        rng = np.random.default_rng([self.seed, *[t + 1 for t in prefix]])
        return rng.normal(size=3) * self.sharp

    def init_state(self, enc):
        return [()]

    def step(self, state, tokens):
        out, new = [], []
        for pre, tok in zip(state, tokens):
            pre = pre + ((int(tok),) if tok != self.bos else ())
            new.append(pre)
            out.append(self.logits(pre))
        return new, np.stack(out)

    def reorder(self, state, index):
        return [state[i] for i in index]


def log_softmax(x):
    x = x - x.max()
    return x - np.log(np.exp(x).sum())


def exhaustive(model, max_len):
    """Best length-normalized score over every finishable sequence."""
    best = None
    for n in range(0, max_len + 1):
        for seq in itertools.product((0, 1), repeat=n):
            lp = sum(log_softmax(model.logits(seq[:i]))[seq[i]] for i in range(n))
            if n < max_len:
                total, length = lp + log_softmax(model.logits(seq))[2], n + 1
            else:
                total, length = lp, n  # the cap ends generation without EOS
            s = total / length
            if best is None or s > best[0] + 1e-12:
                best = (s, seq)
    return best


class TestBeam:
    @pytest.mark.parametrize("seed", range(25))
    @pytest.mark.parametrize("beam", [16, 81])
    def test_matches_exhaustive(self, seed, beam):
        m = ToyModel(seed)
        score, seq = exhaustive(m, 4)
        h = beam_search(m, None, beam=beam, max_len=4)
        assert h.tokens == seq
        assert h.score == pytest.approx(score, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_never_worse_than_greedy(self, seed):
        m = ToyModel(seed, sharp=0.7)
        g = greedy_search(m, None, 6)
        for beam in (2, 3, 5):
            assert beam_search(m, None, beam, 6).score >= g.score - 1e-12

    def test_beam_one_is_greedy(self):
        cfg = DecoderConfig(num_layers=1, d_model=16, n_heads=2, d_ffn=32, state_size=4, vocab_size=5,
                            src_vocab_size=5, dropout=0.0, stochastic_depth_p=0.0)
        model = Seq2SeqModel(cfg, seed=3)
        rng = np.random.default_rng(0)
        for p in model.parameters():
            if p.name and p.name.startswith("head.proj"):
                p.data[...] = rng.normal(size=p.shape)
        for _ in range(5):
            src = rng.integers(0, 5, (1, 7))
            enc = model.encode(src)
            assert list(beam_search(model, enc, 1, 7).tokens) == greedy_decode(model, src, np.ones_like(src, bool))[0]

    def test_invalid_beam(self):
        with pytest.raises(ValueError):
            beam_search(ToyModel(0), None, 0, 3)

    def test_score_normalization(self):
        assert sequence_score(-4.0, 2) == -2.0
        assert sequence_score(-4.0, 2, length_penalty=False) == -4.0


def _ckpt(rng, scale=1.0):
    return Checkpoint({"a.w": rng.normal(size=(3, 4)) * scale, "b": rng.normal(size=5)}, {"x": 1}, 7, 0.5)


class TestCheckpoint:
    def test_roundtrip_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        _ckpt(rng).save(tmp_path / "c1")
        ck = load_checkpoint(tmp_path / "c1")
        ck.save(tmp_path / "c2")
        for ext in (".bin",):
            assert (tmp_path / f"c1{ext}").read_bytes() == (tmp_path / f"c2{ext}").read_bytes()
        m1 = json.loads((tmp_path / "c1.json").read_text())
        m2 = json.loads((tmp_path / "c2.json").read_text())
        m1.pop("blob"), m2.pop("blob")
        assert m1 == m2

    def test_manifest_fields_and_blob_length(self, tmp_path):
        rng = np.random.default_rng(1)
        path = save_checkpoint(tmp_path / "x", {"w": rng.normal(size=(2, 3))}, {"k": "v"}, step=4, metric=0.25)
        man = json.loads(path.read_text())
        assert {"format_version", "config_hash", "step", "metric", "tensors"} <= set(man)
        assert man["tensors"] == [{"name": "w", "shape": [2, 3], "dtype": "float32"}]
        assert (tmp_path / "x.bin").stat().st_size == 6 * 4

    def test_little_endian_blob(self, tmp_path):
        save_checkpoint(tmp_path / "le", {"w": np.array([1.0])}, {})
        assert (tmp_path / "le.bin").read_bytes() == np.array([1.0], dtype="<f4").tobytes()

    def test_truncated_blob(self, tmp_path):
        save_checkpoint(tmp_path / "t", {"w": np.ones(4)}, {})
        (tmp_path / "t.bin").write_bytes(b"\0" * 8)
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(tmp_path / "t")

    def test_average_identical_is_byte_equal(self, tmp_path):
        ck = _ckpt(np.random.default_rng(2))
        ck.save(tmp_path / "one")
        average_checkpoints([ck, ck, ck]).save(tmp_path / "avg")
        assert (tmp_path / "one.bin").read_bytes() == (tmp_path / "avg.bin").read_bytes()

    def test_average_opposites_is_zero(self):
        a = _ckpt(np.random.default_rng(3))
        b = Checkpoint({k: -v for k, v in a.tensors.items()}, a.config, a.step, a.metric)
        avg = average_checkpoints([a, b])
        assert all(np.all(v == 0) for v in avg.tensors.values())

    def test_average_matches_mean_oracle(self, tmp_path):
        rng = np.random.default_rng(4)
        cks = [_ckpt(rng) for _ in range(3)]
        paths = [c.save(tmp_path / f"c{i}") for i, c in enumerate(cks)]
        avg = average_checkpoints(paths)
        for name in cks[0].tensors:
            oracle = np.mean(np.stack([c.tensors[name].astype(np.float64) for c in cks]), axis=0)
            np.testing.assert_allclose(avg.tensors[name], oracle.astype(np.float32), rtol=0, atol=0)

    def test_layout_mismatch(self):
        rng = np.random.default_rng(5)
        a = _ckpt(rng)
        b = Checkpoint({"a.w": rng.normal(size=(4, 3)), "b": rng.normal(size=5)})
        with pytest.raises(ManifestMismatchError):
            average_checkpoints([a, b])
        with pytest.raises(ManifestMismatchError):
            average_checkpoints([])
