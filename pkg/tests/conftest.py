import numpy as np
import pytest

from clover import autodiff as ad


def rel_err(a, n):
    a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)


def check_param_grads(loss_fn, params: dict, h=1e-5, tol=1e-4):
    """Compare backward() with central differences for every entry of ``params``.

    ``loss_fn`` builds the loss from the parameter nodes; returns worst relative error.
    """
    for node in params.values():
        node.zero_grad()
    loss = loss_fn()
    ad.backward(loss)
    analytic = {k: n.grad.copy() for k, n in params.items()}
    worst = 0.0
    for k, node in params.items():
        num = ad.numeric_grad(lambda: float(loss_fn().value[0, 0]), node.value, h)
        err = rel_err(analytic[k], num).max() if num.size else 0.0
        worst = max(worst, float(err))
    assert worst < tol, f"worst relative gradient error {worst:.3e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
