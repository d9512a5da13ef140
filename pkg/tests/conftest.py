import numpy as np
import pytest

from slabgan import tensor as T


@pytest.fixture(autouse=True)
def _clean_tape():
    """Every test starts with an empty gradient tape."""
    T.active_tape().clear()
    T.active_tape().enabled = True
    yield
    T.active_tape().clear()


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Elementwise relative error with an absolute floor.

    The floor keeps near-zero gradients (where central differences return
    pure roundoff noise) checked in absolute terms at 64-bit FD precision.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float((np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-3)).max())


def gradcheck(op, arrays, h: float = 1e-5, tol: float = 1e-4) -> float:
    """FD-check gradients of ``op(*tensors) -> scalar Tensor`` w.r.t. every
    input array (float64). Returns the worst relative error."""
    tens = [T.Tensor(a.copy().astype(np.float64), requires_grad=True) for a in arrays]
    loss = op(*tens)
    T.backward(loss)
    worst = 0.0
    for k, (a, t) in enumerate(zip(arrays, tens)):
        def f(x, k=k):
            args = [T.Tensor(b.copy().astype(np.float64)) for b in arrays]
            args[k] = T.Tensor(x.astype(np.float64))
            return float(op(*args).data)
        assert t.grad is not None, f"no gradient on input {k}"
        worst = max(worst, rel_err(t.grad, finite_difference(f, a.astype(np.float64), h)))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3g}"
    return worst
