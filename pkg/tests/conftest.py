import numpy as np
import pytest

from sagate import autodiff as ad
from sagate.autodiff import Tensor


@pytest.fixture(autouse=True)
def _nan_tripwire():
    with ad.nan_check(True):
        yield


def fd_grads(fn, arrays, h=1e-4):
    """Central differences of ``fn(*tensors).item()`` with respect to each array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(*[Tensor(x) for x in arrays]).item()
            flat[i] = orig - h
            down = fn(*[Tensor(x) for x in arrays]).item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def ad_grads(fn, arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*ts).backward()
    return [t.grad for t in ts]


def max_rel_error(a, n, floor=1e-8):
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max())


def check_grads(fn, arrays, tol, h=1e-4, floor=1e-8):
    """Assert autodiff gradients of ``fn`` match central differences (float64)."""
    with ad.default_dtype(np.float64):
        arrays = [np.ascontiguousarray(a, dtype=np.float64).copy() for a in arrays]
        analytic = ad_grads(fn, arrays)
        numeric = fd_grads(fn, arrays, h)
    for a, n in zip(analytic, numeric):
        assert max_rel_error(a, n, floor) < tol


ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, ok: bool, detail: str) -> None:
    """Record one acceptance line; printed together at the end of the run."""
    line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
