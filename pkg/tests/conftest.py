import numpy as np
import pytest

from audioscene import autodiff as ad


def numerical_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a float64 array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_grads(build, arrays, h: float = 1e-5) -> float:
    """Max relative error between autodiff and finite differences over all inputs.

    ``build`` maps a list of Tensors to a scalar Tensor.
    """
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    grads = ad.backward(build(leaves), inputs=leaves)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        def f(x, k=k):
            args = [ad.Tensor(x if j == k else a) for j, a in enumerate(arrays)]
            return build(args).item()

        worst = max(worst, rel_err(grads[leaf], numerical_grad(f, arrays[k], h)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> one PASS/FAIL line, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
