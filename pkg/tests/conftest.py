import numpy as np
import pytest

from s4dec.ssm_core import ContinuousSSM


def random_stable_ssm(rng, N, re_range=(-2.0, -0.1), D=None):
    """Dense system whose eigenvalues have real parts inside ``re_range``."""
    re = rng.uniform(*re_range, size=N)
    im = rng.normal(size=N) * 3
    Q, _ = np.linalg.qr(rng.normal(size=(N, N)) + 1j * rng.normal(size=(N, N)))
    A = Q @ np.diag(re + 1j * im) @ Q.conj().T
    B = rng.normal(size=N) + 1j * rng.normal(size=N)
    C = rng.normal(size=N) + 1j * rng.normal(size=N)
    return ContinuousSSM(A, B, C, rng.normal() if D is None else D)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(loss_fn, tensor, h=1e-5, max_entries=None, rng=None):
    """Central differences of ``loss_fn()`` w.r.t. entries of ``tensor.data`` (perturbed in place).

    Returns ``(indices, values)``; with ``max_entries`` a random subset is probed.
    """
    flat = tensor.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = float(loss_fn())
        flat[i] = old - h
        fm = float(loss_fn())
        flat[i] = old
        out[n] = (fp - fm) / (2 * h)
    return idx, out


def assert_grad_close(analytic, idx, numeric, rtol, atol=1e-8):
    a = np.asarray(analytic).reshape(-1)[idx]
    err = np.abs(a - numeric)
    scale = np.maximum(np.abs(a), np.abs(numeric))
    bad = err > rtol * scale + atol
    assert not bad.any(), f"max rel err {np.max(err / np.maximum(scale, 1e-300)):.3g} at {idx[bad][:5]}"


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
