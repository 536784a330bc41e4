"""Dense reference implementation of a single-input single-output linear state space layer.

The continuous system is

    x'(t) = A x(t) + B u(t)
    y(t)  = C x(t) + D u(t)

and its bilinear (Tustin) discretization with step ``delta`` is

    A_bar = (I - delta/2 A)^-1 (I + delta/2 A)
    B_bar = (I - delta/2 A)^-1 delta B
    C_bar = C,  D_bar = D

Everything here runs in double precision and is deliberately unstructured: the
structured S4 path in :mod:`s4dec.s4_layer` is tested against these functions.
States are complex; outputs are projected to their real part at the output map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import (
    DimensionMismatchError,
    EmptyInputError,
    LengthMismatchError,
    NonPositiveDeltaError,
    SingularMatrixError,
)

__all__ = [
    "ContinuousSSM",
    "DiscreteSSM",
    "discretize_bilinear",
    "step",
    "run_recurrent",
    "materialize_kernel",
    "causal_convolve",
    "causal_convolve_direct",
    "causal_convolve_fft",
    "RCOND_THRESHOLD",
]

# reciprocal condition number below which (I - delta/2 A) counts as singular
RCOND_THRESHOLD = 1e-12


def _as_col(x, n, name):
    arr = np.asarray(x, dtype=np.complex128)
    if arr.size != n:
        raise DimensionMismatchError(f"{name} has {arr.size} entries, expected {n}")
    return arr.reshape(n, 1)


def _as_row(x, n, name):
    return _as_col(x, n, name).reshape(1, n)


@dataclass(frozen=True)
class ContinuousSSM:
    """Continuous-time system ``(A, B, C, D)`` with state size ``N``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: complex = 0.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.complex128))
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionMismatchError(f"A must be square, got shape {A.shape}")
        n = A.shape[0]
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", _as_col(self.B, n, "B"))
        object.__setattr__(self, "C", _as_row(self.C, n, "C"))
        object.__setattr__(self, "D", complex(self.D))

    @property
    def N(self) -> int:
        return self.A.shape[0]

    def is_stable(self) -> bool:
        """True when every eigenvalue of ``A`` has non-positive real part."""
        return bool(np.max(np.linalg.eigvals(self.A).real) <= 0.0)


@dataclass(frozen=True)
class DiscreteSSM:
    A_bar: np.ndarray
    B_bar: np.ndarray
    C_bar: np.ndarray
    D_bar: complex = 0.0
    delta: float = 1.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A_bar, dtype=np.complex128))
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionMismatchError(f"A_bar must be square, got shape {A.shape}")
        n = A.shape[0]
        object.__setattr__(self, "A_bar", A)
        object.__setattr__(self, "B_bar", _as_col(self.B_bar, n, "B_bar"))
        object.__setattr__(self, "C_bar", _as_row(self.C_bar, n, "C_bar"))
        object.__setattr__(self, "D_bar", complex(self.D_bar))
        object.__setattr__(self, "delta", float(self.delta))

    @property
    def N(self) -> int:
        return self.A_bar.shape[0]

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A_bar))))


def discretize_bilinear(ssm: ContinuousSSM, delta: float) -> DiscreteSSM:
    """Bilinear discretization of ``ssm`` with step ``delta``.

    The inverse is never formed; ``(I - delta/2 A)`` is LU-factored once and
    solved against ``[I + delta/2 A | delta B]``.

    Raises
    ------
    NonPositiveDeltaError
        If ``delta <= 0`` (or is not finite).
    SingularMatrixError
        If the reciprocal condition number of ``I - delta/2 A`` is below
        :data:`RCOND_THRESHOLD`.
    """
    delta = float(delta)
    if not np.isfinite(delta) or delta <= 0.0:
        raise NonPositiveDeltaError(f"delta must be positive, got {delta}")
    n = ssm.N
    eye = np.eye(n, dtype=np.complex128)
    half = 0.5 * delta * ssm.A
    lhs = eye - half
    cond = np.linalg.cond(lhs, 1)
    if not np.isfinite(cond) or 1.0 / cond < RCOND_THRESHOLD:
        raise SingularMatrixError(f"I - delta/2 A is singular (cond={cond:.3g})")
    rhs = np.concatenate([eye + half, delta * ssm.B], axis=1)
    sol = np.linalg.solve(lhs, rhs)
    return DiscreteSSM(sol[:, :n], sol[:, n:], ssm.C.copy(), ssm.D, delta)


def step(dssm: DiscreteSSM, x_prev, u_k: float):
    """Advance the recurrence by one sample.

    Returns ``(x_k, y_k)`` with ``x_k = A_bar x_prev + B_bar u_k`` and
    ``y_k = Re(C_bar x_k + D_bar u_k)``.
    """
    x_prev = np.asarray(x_prev, dtype=np.complex128)
    if x_prev.size != dssm.N:
        raise DimensionMismatchError(f"state has {x_prev.size} entries, expected {dssm.N}")
    x_prev = x_prev.reshape(dssm.N)
    u_k = float(u_k)
    x_k = dssm.A_bar @ x_prev + dssm.B_bar[:, 0] * u_k
    y_k = (dssm.C_bar[0] @ x_k + dssm.D_bar * u_k).real
    return x_k, float(y_k)


def run_recurrent(dssm: DiscreteSSM, u) -> np.ndarray:
    """Run the recurrence from the zero state over the whole input sequence."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if u.size == 0:
        raise EmptyInputError("input sequence is empty")
    x = np.zeros(dssm.N, dtype=np.complex128)
    y = np.empty(u.size, dtype=np.float64)
    A, b, c, d = dssm.A_bar, dssm.B_bar[:, 0], dssm.C_bar[0], dssm.D_bar
    for k, uk in enumerate(u):
        x = A @ x + b * uk
        y[k] = (c @ x + d * uk).real
    return y


def materialize_kernel(dssm: DiscreteSSM, L: int) -> np.ndarray:
    """Impulse response ``Re(C_bar A_bar^k B_bar)`` for ``k = 0..L-1``.

    Built by repeated application of ``A_bar`` to ``B_bar``; no matrix powers.
    """
    L = int(L)
    if L < 1:
        raise EmptyInputError(f"kernel length must be >= 1, got {L}")
    A, c = dssm.A_bar, dssm.C_bar[0]
    v = dssm.B_bar[:, 0].copy()
    out = np.empty(L, dtype=np.float64)
    for k in range(L):
        out[k] = (c @ v).real
        v = A @ v
    return out


def _check_lengths(kernel, u):
    kernel = np.asarray(kernel, dtype=np.float64).reshape(-1)
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if kernel.size != u.size:
        raise LengthMismatchError(f"kernel length {kernel.size} != input length {u.size}")
    if u.size == 0:
        raise EmptyInputError("input sequence is empty")
    return kernel, u


def causal_convolve_direct(kernel, d_bar: float, u) -> np.ndarray:
    """O(L^2) causal convolution ``y_k = sum_{j<=k} K_j u_{k-j} + d_bar u_k``."""
    kernel, u = _check_lengths(kernel, u)
    L = u.size
    y = np.empty(L, dtype=np.float64)
    for k in range(L):
        y[k] = np.dot(kernel[: k + 1], u[k::-1])
    return y + float(np.real(d_bar)) * u


def causal_convolve_fft(kernel, d_bar: float, u) -> np.ndarray:
    """Same result as :func:`causal_convolve_direct`, via zero-padded real FFTs."""
    kernel, u = _check_lengths(kernel, u)
    L = u.size
    n = 1 << (2 * L - 1).bit_length()  # power of two >= 2L - 1
    y = np.fft.irfft(np.fft.rfft(kernel, n) * np.fft.rfft(u, n), n)[:L]
    return y + float(np.real(d_bar)) * u


def causal_convolve(kernel, d_bar: float, u, method: str = "auto") -> np.ndarray:
    """Causal convolution dispatcher; ``method`` is ``"direct"``, ``"fft"`` or ``"auto"``."""
    if method == "auto":
        method = "direct" if np.size(u) <= 64 else "fft"
    if method == "direct":
        return causal_convolve_direct(kernel, d_bar, u)
    if method == "fft":
        return causal_convolve_fft(kernel, d_bar, u)
    raise ValueError(f"unknown convolution method {method!r}")
