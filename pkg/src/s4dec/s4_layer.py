"""Trainable S4 layer: diagonal-plus-low-rank state matrices, one SISO system per channel.

Each of the ``H`` feature channels owns an ``N``-dimensional state space with

    A = diag(lambda) - p p^H,   Re(lambda) = -exp(r) < 0

so the Hermitian part of ``A`` is negative definite and every eigenvalue sits in
the open left half-plane for any parameter values.  The layer has two forward
paths that compute the same function:

* convolutional (training): discretize, materialize the length-``L`` kernel,
  causally convolve the whole sequence at once;
* recurrent (inference): advance the discretized recurrence one sample at a time.

Both are followed by the block's output stage, a linear map to ``2 * H_out``
features and a GLU.

Complex parameters are stored as separate real and imaginary tensors so the
differentiation engine stays real-valued.  The kernel is a single fused op
(``ssm_kernel``) whose backward pass is written out by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, register_op
from .exceptions import DimensionMismatchError, LengthMismatchError, OddStateSizeError
from .ssm_core import ContinuousSSM

__all__ = [
    "DPLRParams",
    "S4Layer",
    "S4State",
    "DiscretizedS4",
    "init_dplr",
    "dplr_to_dense",
    "s4_forward_conv",
    "s4_forward_step",
    "glu",
    "ssm_kernel",
]

SSM_PARAM_NAMES = ("lambda_re", "lambda_im", "p_re", "p_im", "B_re", "B_im", "C_re", "C_im")


@dataclass
class DPLRParams:
    """Structured parameters of one channel.

    ``log_neg_re`` holds ``r`` with ``Re(lambda) = -exp(r)``; this is what keeps
    the diagonal strictly stable without clipping.
    """

    log_neg_re: np.ndarray
    lambda_im: np.ndarray
    p: np.ndarray
    B: np.ndarray
    C: np.ndarray
    log_delta: float

    @property
    def N(self) -> int:
        return int(np.size(self.lambda_im))

    @property
    def lam(self) -> np.ndarray:
        return -np.exp(np.asarray(self.log_neg_re, dtype=np.float64)) + 1j * np.asarray(self.lambda_im)

    @property
    def delta(self) -> float:
        return float(np.exp(self.log_delta))

    @classmethod
    def from_lambda(cls, lam, p, B, C, log_delta=0.0) -> "DPLRParams":
        lam = np.asarray(lam, dtype=np.complex128)
        if np.any(lam.real >= 0):
            raise ValueError("Re(lambda) must be strictly negative")
        return cls(np.log(-lam.real), lam.imag.copy(), np.asarray(p, dtype=np.complex128),
                   np.asarray(B, dtype=np.complex128), np.asarray(C, dtype=np.complex128),
                   float(log_delta))


def init_dplr(N: int, seed: int, dt_min: float = 1e-3, dt_max: float = 1e-1) -> DPLRParams:
    """Deterministic diagonal-line initialization.

    ``lambda_n = -1/2 + i*pi*n``, ``p = 0``, ``B = 1``, ``C ~ CN(0, 1)/sqrt(N)``
    (real and imaginary parts unit normal), ``delta`` log-uniform in
    ``[dt_min, dt_max]``.
    """
    if N < 1 or N % 2:
        raise OddStateSizeError(f"state size must be a positive even integer, got {N}")
    rng = np.random.default_rng(seed)
    n = np.arange(N)
    C = (rng.standard_normal(N) + 1j * rng.standard_normal(N)) / np.sqrt(N)
    log_delta = rng.uniform(np.log(dt_min), np.log(dt_max))
    return DPLRParams(
        log_neg_re=np.full(N, np.log(0.5)),
        lambda_im=np.pi * n.astype(np.float64),
        p=np.zeros(N, dtype=np.complex128),
        B=np.ones(N, dtype=np.complex128),
        C=C,
        log_delta=float(log_delta),
    )


def dplr_to_dense(params: DPLRParams, D: float = 0.0) -> ContinuousSSM:
    """Dense ``A = diag(lambda) - p p^H`` with ``B``, ``C`` copied."""
    p = np.asarray(params.p, dtype=np.complex128)
    A = np.diag(params.lam) - np.outer(p, p.conj())
    return ContinuousSSM(A, params.B.copy(), params.C.copy(), D)


# ---------------------------------------------------------------------------
# batched numerics, complex128 throughout
# ---------------------------------------------------------------------------

def _dense_A(r, lam_im, p):
    lam = -np.exp(r) + 1j * lam_im
    H, N = lam.shape
    A = -p[:, :, None] * p.conj()[:, None, :]
    A[:, np.arange(N), np.arange(N)] += lam
    return A


def _bilinear(A, B, delta):
    """Batched bilinear discretization; returns ``(A_bar, B_bar, M, X)``."""
    H, N, _ = A.shape
    eye = np.eye(N)
    half = 0.5 * delta[:, None, None] * A
    M = eye - half
    R = np.concatenate([eye + half, (delta[:, None] * B)[:, :, None]], axis=2)
    X = np.linalg.solve(M, R)
    return X[:, :, :N], X[:, :, N], M, X


def _unpack(r, lam_im, p_re, p_im, B_re, B_im, C_re, C_im, log_delta):
    f = lambda a: np.asarray(a, dtype=np.float64)  # noqa: E731
    p = f(p_re) + 1j * f(p_im)
    B = f(B_re) + 1j * f(B_im)
    C = f(C_re) + 1j * f(C_im)
    delta = np.exp(f(log_delta))
    return f(r), f(lam_im), p, B, C, delta


@register_op("ssm_kernel")
def _ssm_kernel(r, lam_im, p_re, p_im, B_re, B_im, C_re, C_im, log_delta, length):
    """Kernel ``K[h, k] = Re(C_h A_bar_h^k B_bar_h)`` for ``k < length``, all channels at once."""
    dtype = r.dtype
    r64, li, p, B, C, delta = _unpack(r, lam_im, p_re, p_im, B_re, B_im, C_re, C_im, log_delta)
    A = _dense_A(r64, li, p)
    Abar, Bbar, M, X = _bilinear(A, B, delta)
    H, N = B.shape
    V = np.empty((length, H, N), dtype=np.complex128)
    v = Bbar
    for k in range(length):
        V[k] = v
        v = np.einsum("hij,hj->hi", Abar, v)
    K = np.einsum("hn,lhn->hl", C, V).real

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        Cc = C.conj()
        gC = np.einsum("hl,lhn->hn", g, V.conj())
        # adjoint sweep over v_{k+1} = A_bar v_k
        w = Cc * g[:, length - 1, None]
        gAbar = np.zeros_like(Abar)
        AbarH = np.conj(np.swapaxes(Abar, 1, 2))
        for k in range(length - 1, 0, -1):
            gAbar += w[:, :, None] * V[k - 1].conj()[:, None, :]
            w = Cc * g[:, k - 1, None] + np.einsum("hij,hj->hi", AbarH, w)
        gBbar = w
        # X = M^{-1} [I + d/2 A | d B]
        gX = np.concatenate([gAbar, gBbar[:, :, None]], axis=2)
        gR = np.linalg.solve(np.conj(np.swapaxes(M, 1, 2)), gX)
        gM = -gR @ np.conj(np.swapaxes(X, 1, 2))
        gP = gR[:, :, :N]
        gdB = gR[:, :, N]
        d2 = 0.5 * delta[:, None, None]
        gA = d2 * (gP - gM)
        g_delta = (np.sum(np.conj(gP - gM) * (0.5 * A), axis=(1, 2)).real
                   + np.sum(np.conj(gdB) * B, axis=1).real)
        gB = delta[:, None] * gdB
        glam = np.diagonal(gA, axis1=1, axis2=2)
        gp = -np.einsum("hij,hj->hi", gA + np.conj(np.swapaxes(gA, 1, 2)), p)
        out = (
            glam.real * -np.exp(r64),
            glam.imag,
            gp.real, gp.imag,
            gB.real, gB.imag,
            gC.real, gC.imag,
            g_delta * delta,
        )
        return tuple(o.astype(dtype) for o in out)

    return K.astype(dtype), vjp


def ssm_kernel(params: dict, length: int) -> Tensor:
    return ad.record("ssm_kernel", [params[k] for k in SSM_PARAM_NAMES + ("log_delta",)], length=length)


def glu(a, b):
    """Gated linear unit ``a * sigmoid(b)`` (numpy arrays or tensors)."""
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        if a.shape != b.shape:
            raise LengthMismatchError(f"GLU halves differ: {a.shape} vs {b.shape}")
        return a * ad.record("sigmoid", (b,))
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatchError(f"GLU halves differ: {a.shape} vs {b.shape}")
    return a * (0.5 * (np.tanh(0.5 * b) + 1.0))


@dataclass
class DiscretizedS4:
    """Per-channel discrete system, cached for one inference session."""

    A_bar: np.ndarray  # (H, N, N)
    B_bar: np.ndarray  # (H, N)
    C: np.ndarray  # (H, N)
    D: np.ndarray  # (H,)


@dataclass
class S4State:
    """Recurrent state ``x`` of shape ``(*batch, H, N)``; starts at zero."""

    x: np.ndarray
    cache: DiscretizedS4 | None = field(default=None, repr=False)


class S4Layer:
    """``H`` independent DPLR state spaces followed by ``Linear(H, 2*H_out)`` and a GLU.

    Parameters are :class:`~s4dec.autodiff.Tensor` objects in ``self.params``
    (names match the checkpoint keys).  ``lambda_re`` stores ``log(-Re lambda)``.
    """

    def __init__(self, H: int, N: int, H_out: int | None = None, seed: int = 0,
                 dtype=np.float32):
        self.H = int(H)
        self.N = int(N)
        self.H_out = int(H_out if H_out is not None else H)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        chans = [init_dplr(self.N, int(s)) for s in rng.integers(0, 2**31 - 1, size=self.H)]
        bound = 1.0 / np.sqrt(self.H)
        self.params: dict[str, Tensor] = {}
        self._set_channels(chans)
        self._add("D", rng.standard_normal(self.H), "s4")
        self._add("out_linear", rng.uniform(-bound, bound, (2 * self.H_out, self.H)), "weight")
        self._add("out_bias", np.zeros(2 * self.H_out), "bias")

    def _add(self, name, value, tag):
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, tag=tag, name=name)

    def _set_channels(self, chans):
        stack = lambda f: np.stack([f(c) for c in chans])  # noqa: E731
        self._add("lambda_re", stack(lambda c: c.log_neg_re), "s4")
        self._add("lambda_im", stack(lambda c: c.lambda_im), "s4")
        self._add("p_re", stack(lambda c: c.p.real), "s4")
        self._add("p_im", stack(lambda c: c.p.imag), "s4")
        self._add("B_re", stack(lambda c: c.B.real), "s4")
        self._add("B_im", stack(lambda c: c.B.imag), "s4")
        self._add("C_re", stack(lambda c: c.C.real), "s4")
        self._add("C_im", stack(lambda c: c.C.imag), "s4")
        self._add("log_delta", np.array([c.log_delta for c in chans]), "s4")

    def set_channel(self, h: int, params: DPLRParams) -> None:
        P = self.params
        P["lambda_re"].data[h] = params.log_neg_re
        P["lambda_im"].data[h] = params.lambda_im
        P["p_re"].data[h], P["p_im"].data[h] = params.p.real, params.p.imag
        P["B_re"].data[h], P["B_im"].data[h] = params.B.real, params.B.imag
        P["C_re"].data[h], P["C_im"].data[h] = params.C.real, params.C.imag
        P["log_delta"].data[h] = params.log_delta

    def channel(self, h: int) -> DPLRParams:
        P = {k: v.data[h].astype(np.float64) for k, v in self.params.items() if k in SSM_PARAM_NAMES}
        return DPLRParams(
            log_neg_re=P["lambda_re"],
            lambda_im=P["lambda_im"],
            p=P["p_re"] + 1j * P["p_im"],
            B=P["B_re"] + 1j * P["B_im"],
            C=P["C_re"] + 1j * P["C_im"],
            log_delta=float(self.params["log_delta"].data[h]),
        )

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + k: v for k, v in self.params.items()}

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    # -- convolutional path ------------------------------------------------
    def kernel(self, L: int) -> Tensor:
        return ssm_kernel(self.params, L)

    def ssm_conv(self, u: Tensor) -> Tensor:
        """State-space part only: ``(..., L, H) -> (..., L, H)``, before the linear/GLU stage."""
        if not isinstance(u, Tensor):
            u = Tensor(np.asarray(u, dtype=self.dtype))
        if u.shape[-1] != self.H:
            raise DimensionMismatchError(f"expected {self.H} channels, got {u.shape[-1]}")
        K = self.kernel(u.shape[-2])
        return ad.causal_conv(u, K) + u * self.params["D"]

    def output_stage(self, y: Tensor) -> Tensor:
        z = y @ self.params["out_linear"].T + self.params["out_bias"]
        return glu(z[..., : self.H_out], z[..., self.H_out:])

    def forward_conv(self, u: Tensor) -> Tensor:
        """Full-sequence forward, ``(..., L, H) -> (..., L, H_out)``."""
        return self.output_stage(self.ssm_conv(u))

    __call__ = forward_conv

    # -- recurrent path ----------------------------------------------------
    def discretize(self) -> DiscretizedS4:
        P = {k: self.params[k].data for k in SSM_PARAM_NAMES + ("log_delta",)}
        r, li, p, B, C, delta = _unpack(*(P[k] for k in SSM_PARAM_NAMES), P["log_delta"])
        Abar, Bbar, _, _ = _bilinear(_dense_A(r, li, p), B, delta)
        return DiscretizedS4(Abar, Bbar, C, self.params["D"].data.astype(np.float64))

    def init_state(self, batch_shape=()) -> S4State:
        x = np.zeros(tuple(batch_shape) + (self.H, self.N), dtype=np.complex128)
        return S4State(x, self.discretize())

    def ssm_step(self, state: S4State, u_t) -> tuple[S4State, np.ndarray]:
        u_t = np.asarray(u_t.data if isinstance(u_t, Tensor) else u_t, dtype=np.float64)
        if u_t.shape[-1] != self.H or state.x.shape[-2:] != (self.H, self.N):
            raise DimensionMismatchError(
                f"state {state.x.shape} / input {u_t.shape} do not match H={self.H}, N={self.N}")
        cache = state.cache if state.cache is not None else self.discretize()
        x = np.einsum("hij,...hj->...hi", cache.A_bar, state.x) + cache.B_bar * u_t[..., None]
        y = np.einsum("hn,...hn->...h", cache.C, x).real + cache.D * u_t
        return S4State(x, cache), y.astype(self.dtype)

    def forward_step(self, state: S4State, u_t) -> tuple[S4State, np.ndarray]:
        """One recurrent step, ``(..., H) -> (..., H_out)``; returns the new state."""
        state, y = self.ssm_step(state, u_t)
        out = self.output_stage(Tensor(np.atleast_2d(y))).data
        return state, out.reshape(y.shape[:-1] + (self.H_out,))


def s4_forward_conv(layer: S4Layer, U, train_mode: bool = False) -> np.ndarray:
    """Convolutional forward on a single ``H x L`` input; returns ``H_out x L``.

    ``train_mode`` is accepted for interface symmetry; the layer has no
    stochastic parts of its own (dropout lives in the enclosing block).
    """
    U = np.asarray(U)
    if U.ndim != 2 or U.shape[0] != layer.H:
        raise DimensionMismatchError(f"expected input of shape ({layer.H}, L), got {U.shape}")
    out = layer.forward_conv(Tensor(U.T.astype(layer.dtype)))
    return out.data.T


def s4_forward_step(layer: S4Layer, state: S4State, u_t) -> tuple[S4State, np.ndarray]:
    return layer.forward_step(state, u_t)
