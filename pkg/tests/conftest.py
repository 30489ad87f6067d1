import numpy as np
import pytest

from hydra_lstm.autodiff import Tensor


def finite_difference_check(loss_fn, params, step=1e-5, samples=None, rng=None):
    """Max relative error between backprop and central differences.

    ``loss_fn`` rebuilds the graph from ``params`` and returns a scalar
    Tensor. With ``samples`` only that many random coordinates per
    parameter are probed.
    """
    from hydra_lstm import autodiff as ad

    for p in params:
        p.grad = None
    ad.backward(loss_fn())
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if samples is not None and flat.size > samples:
            coords = rng.choice(flat.size, samples, replace=False)
        for k in coords:
            old = flat[k]
            flat[k] = old + step
            up = loss_fn().item()
            flat[k] = old - step
            down = loss_fn().item()
            flat[k] = old
            numeric = (up - down) / (2 * step)
            a = analytic.reshape(-1)[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


@pytest.fixture
def fd_check():
    return finite_difference_check


@pytest.fixture
def leaf():
    def make(shape, rng, low=-2.0, high=2.0):
        return Tensor(rng.uniform(low, high, shape), requires_grad=True)

    return make


_criteria = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" in report.nodeid and report.when == "call":
        _criteria[report.nodeid.split("::")[-1]] = "PASS" if report.passed else "FAIL"
    elif "test_acceptance.py::test_criterion_" in report.nodeid and report.when == "setup" and report.failed:
        _criteria[report.nodeid.split("::")[-1]] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria):
        number = int(name.split("_")[2])
        terminalreporter.write_line(f"criterion {number:2d}: {_criteria[name]}  ({name})")
