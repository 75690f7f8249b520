import numpy as np
import pytest
import torch


def central_difference(f, x, eps=1e-6):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        g[i] = (up - down) / (2 * eps)
    return grad


def directional_error(fn, tensors, steps=(1e-3, 1e-4, 1e-5, 1e-6), seed=0):
    """Largest relative error between autograd and a central difference along a random direction.

    One random direction per tensor, so every parameter group is checked on
    its own. Each tensor takes the best of a few step sizes: large steps carry
    truncation error and small ones round-off, and which dominates depends on
    the gradient scale.
    """
    g = torch.Generator().manual_seed(seed)
    grads = torch.autograd.grad(fn(), tensors, allow_unused=True)
    worst = 0.0
    for t, gr in zip(tensors, grads):
        v = torch.randn(t.shape, dtype=t.dtype, generator=g)
        analytic = 0.0 if gr is None else float((gr * v).sum())
        best = float("inf")
        for eps in steps:
            with torch.no_grad():
                t.add_(eps * v)
                up = float(fn())
                t.sub_(2 * eps * v)
                down = float(fn())
                t.add_(eps * v)
            fd = (up - down) / (2 * eps)
            best = min(best, abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8))
        worst = max(worst, best)
    return worst


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


ACCEPTANCE = []


def verdict(name, ok, detail=""):
    """Record one acceptance criterion and echo its result line."""
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
