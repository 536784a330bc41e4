import numpy as np
import pytest

from s4dec import autodiff as ad
from s4dec.autodiff import Tape, Tensor
from s4dec.exceptions import DimensionMismatchError, LengthMismatchError, OddStateSizeError
from s4dec.s4_layer import (
    SSM_PARAM_NAMES,
    DPLRParams,
    S4Layer,
    dplr_to_dense,
    glu,
    init_dplr,
    s4_forward_conv,
    s4_forward_step,
)
from s4dec.ssm_core import discretize_bilinear, run_recurrent

from conftest import assert_grad_close, numeric_grad


def random_layer(H, N, seed, dtype=np.float64, H_out=None, low_rank=True):
    layer = S4Layer(H, N, H_out, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 1)
    if low_rank:
        layer.params["p_re"].data[...] = 0.3 * rng.normal(size=(H, N))
        layer.params["p_im"].data[...] = 0.3 * rng.normal(size=(H, N))
    layer.params["out_bias"].data[...] = 0.1 * rng.normal(size=layer.params["out_bias"].shape)
    layer.params["log_delta"].data[...] = rng.uniform(np.log(1e-3), 0, size=H)
    return layer


def run_steps(layer, U):
    state = layer.init_state()
    cols = []
    for t in range(U.shape[1]):
        state, y = s4_forward_step(layer, state, U[:, t])
        cols.append(y)
    return np.stack(cols, axis=1)


class TestInit:
    def test_n2_values(self):
        p = init_dplr(2, seed=5)
        np.testing.assert_array_equal(p.lam.real, [-0.5, -0.5])
        np.testing.assert_allclose(p.lam.imag, [0, np.pi])
        assert np.all(p.p == 0) and np.all(p.B == 1)

    def test_deterministic(self):
        a, b = init_dplr(8, 3), init_dplr(8, 3)
        assert np.array_equal(a.C, b.C) and a.log_delta == b.log_delta

    def test_delta_range(self):
        for s in range(20):
            assert 1e-3 <= init_dplr(4, s).delta <= 1e-1

    def test_state_size_64_stable(self):
        p = init_dplr(64, 0)
        assert np.all(p.lam.real < 0)
        assert dplr_to_dense(p).is_stable()

    @pytest.mark.parametrize("N", [0, 3, 7])
    def test_odd_rejected(self, N):
        with pytest.raises(OddStateSizeError):
            init_dplr(N, 0)


class TestDense:
    def test_zero_low_rank(self):
        s = dplr_to_dense(DPLRParams.from_lambda([-1], [0], [1], [1]))
        np.testing.assert_array_equal(s.A, [[-1]])

    def test_zero_diagonal_minus_outer(self):
        # lambda = 0 is outside the stable parameterization; build directly
        p = DPLRParams(np.array([-np.inf]), np.array([0.0]), np.array([1 + 0j]), np.ones(1), np.ones(1), 0.0)
        np.testing.assert_array_equal(dplr_to_dense(p).A, [[-1]])

    def test_two_by_two(self):
        s = dplr_to_dense(DPLRParams.from_lambda([-1, -2], [1, 1j], [1, 1], [1, 1]))
        np.testing.assert_allclose(s.A, [[-2, 1j], [-1j, -3]], atol=1e-15)
        lr = np.diag([-1, -2]) - s.A
        np.testing.assert_allclose(lr, lr.conj().T)


class TestGLU:
    def test_half(self):
        np.testing.assert_allclose(glu([3.0, -4.0], [0.0, 0.0]), [1.5, -2.0])

    def test_zero_a(self):
        assert np.all(glu(np.zeros(3), np.array([1.0, -5, 9])) == 0)

    def test_saturation(self):
        assert glu([2.0], [50.0])[0] == pytest.approx(2.0, abs=1e-9)

    def test_mismatch(self):
        with pytest.raises(LengthMismatchError):
            glu(np.ones(2), np.ones(3))


class TestForward:
    def test_zero_input_zero_output(self):
        layer = S4Layer(4, 8, seed=0, dtype=np.float64)
        assert np.all(s4_forward_conv(layer, np.zeros((4, 10))) == 0)

    def test_scalar_fixture_through_glu(self):
        # Re(lambda) = -1, delta = 1 -> A_bar = 1/3, B_bar = 2/3; use N=2 with a dead second mode
        layer = S4Layer(1, 2, seed=0, dtype=np.float64)
        layer.set_channel(0, DPLRParams.from_lambda([-1, -1], [0, 0], [1, 0], [1, 0], 0.0))
        layer.params["D"].data[:] = 0
        layer.params["out_linear"].data[...] = [[1.0], [0.0]]
        layer.params["out_bias"].data[...] = 0
        y = s4_forward_conv(layer, np.array([[1.0, 0.0, 0.0]]))
        np.testing.assert_allclose(y[0], 0.5 * np.array([2 / 3, 2 / 9, 2 / 27]), rtol=1e-12)

    def test_zero_state_zero_input_is_bias_path(self):
        layer = random_layer(3, 4, 0)
        _, y = layer.forward_step(layer.init_state(), np.zeros(3))
        b = layer.params["out_bias"].data
        np.testing.assert_allclose(y, glu(b[:3], b[3:]))

    def test_wrong_channel_count(self):
        layer = S4Layer(4, 2, seed=0)
        with pytest.raises(DimensionMismatchError):
            s4_forward_conv(layer, np.zeros((3, 5)))
        with pytest.raises(DimensionMismatchError):
            layer.forward_step(layer.init_state(), np.zeros(5))

    def test_dense_agreement(self):
        layer = random_layer(3, 4, 7)
        U = np.random.default_rng(0).uniform(-1, 1, (3, 40))
        Y = layer.ssm_conv(Tensor(U.T)).data.T
        for h in range(3):
            ch = layer.channel(h)
            d = discretize_bilinear(dplr_to_dense(ch, layer.params["D"].data[h]), ch.delta)
            np.testing.assert_allclose(Y[h], run_recurrent(d, U[h]), atol=1e-9)


class TestConvStepEquivalence:
    @pytest.mark.parametrize("H,N,L", [(1, 2, 1), (4, 8, 16), (16, 2, 128), (4, 64, 16), (1, 8, 128)])
    def test_double(self, H, N, L):
        layer = random_layer(H, N, H * 100 + N)
        U = np.random.default_rng(L).uniform(-1, 1, (H, L))
        np.testing.assert_allclose(run_steps(layer, U), s4_forward_conv(layer, U), atol=1e-9)

    def test_single(self):
        layer = random_layer(4, 8, 3, dtype=np.float32)
        U = np.random.default_rng(0).uniform(-1, 1, (4, 32))
        np.testing.assert_allclose(run_steps(layer, U), s4_forward_conv(layer, U), atol=1e-5)

    def test_state_splicing(self):
        layer = random_layer(2, 4, 11)
        U = np.random.default_rng(5).uniform(-1, 1, (2, 20))
        state = layer.init_state()
        outs = []
        for t in range(20):
            state, y = layer.forward_step(state, U[:, t])
            outs.append(y)
            if t == 9:
                # hand the state over to a fresh cache, as a new decoding call would
                state = type(state)(state.x.copy(), None)
        np.testing.assert_allclose(np.stack(outs, 1), run_steps(layer, U), atol=1e-12)

    def test_future_inputs_do_not_leak(self):
        layer = random_layer(2, 4, 2)
        rng = np.random.default_rng(1)
        U = rng.uniform(-1, 1, (2, 12))
        V = U.copy()
        V[:, 7:] = rng.uniform(-1, 1, (2, 5))
        a, b = s4_forward_conv(layer, U), s4_forward_conv(layer, V)
        assert np.array_equal(a[:, :7], b[:, :7])

    def test_batched_step(self):
        layer = random_layer(3, 4, 9)
        U = np.random.default_rng(2).uniform(-1, 1, (5, 6, 3))  # (B, L, H)
        conv = layer.forward_conv(Tensor(U)).data
        state = layer.init_state((5,))
        for t in range(6):
            state, y = layer.forward_step(state, U[:, t])
            np.testing.assert_allclose(y, conv[:, t], atol=1e-9)


class TestGradients:
    def test_every_parameter_group(self):
        layer = random_layer(2, 4, 21)
        U = Tensor(np.random.default_rng(3).uniform(-1, 1, (8, 2)))
        w = np.random.default_rng(4).normal(size=(8, 2))

        def loss():
            return float((layer.forward_conv(U).data * w).sum())

        with Tape() as tape:
            out = (layer.forward_conv(U) * Tensor(w)).sum()
        g = ad.backward(tape, out)
        for name in SSM_PARAM_NAMES + ("log_delta", "D", "out_linear", "out_bias"):
            t = layer.params[name]
            idx, num = numeric_grad(loss, t)
            assert_grad_close(g[t], idx, num, rtol=1e-4)

    def test_stability_after_updates(self):
        layer = S4Layer(4, 8, seed=0, dtype=np.float64)
        params = list(layer.params.values())
        opt = ad.AdamW(params, lr=0.5)
        rng = np.random.default_rng(0)
        U = Tensor(rng.normal(size=(16, 4)))
        for _ in range(100):
            with Tape() as tape:
                loss = (layer.forward_conv(U) * Tensor(rng.normal(size=(16, 4)) * 100)).sum()
            opt.step(ad.backward(tape, loss))
            for h in range(4):
                assert np.all(layer.channel(h).lam.real < 0)
