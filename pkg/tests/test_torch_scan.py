import numpy as np
import pytest
import torch

from dass.ssm import kernels
from dass.ssm.torch_scan import affine_scan, scan_states, selective_scan, selective_scan_reference


def random_inputs(B=2, G=3, L=9, D=4, N=3, seed=0, h0=False):
    g = torch.Generator().manual_seed(seed)
    opts = dict(dtype=torch.float64, generator=g)
    x = torch.randn(B, G, L, D, **opts)
    delta = torch.rand(B, G, L, D, **opts) + 0.05
    a_log = torch.randn(G, D, N, **opts) * 0.5
    b = torch.randn(B, G, L, N, **opts)
    c = torch.randn(B, G, L, N, **opts)
    state = torch.randn(B, G, D, N, **opts) if h0 else None
    return x, delta, a_log, b, c, state


@pytest.mark.parametrize("method", ["tree", "loop"])
@pytest.mark.parametrize("L", [1, 2, 3, 7, 16, 33])
def test_affine_scan_matches_numpy(method, L):
    rng = np.random.default_rng(L)
    a = rng.uniform(0.2, 1.0, (L, 5))
    b = rng.normal(size=(L, 5))
    pa, pb = affine_scan(torch.tensor(a), torch.tensor(b), method=method)
    ra, rb = kernels.associative_scan(a, b)
    np.testing.assert_allclose(pb.numpy(), rb, atol=1e-12)
    np.testing.assert_allclose(pa.numpy(), ra, atol=1e-12)


def test_affine_scan_other_dim():
    a = torch.rand(3, 10, dtype=torch.float64)
    b = torch.randn(3, 10, dtype=torch.float64)
    _, out = affine_scan(a, b, dim=1)
    _, ref = affine_scan(a.T, b.T, dim=0)
    assert torch.allclose(out, ref.T)
    with pytest.raises(ValueError):
        affine_scan(a, b, method="bogus")


@pytest.mark.parametrize("reverse", [False, True])
def test_scan_states_tree_equals_loop(reverse, monkeypatch):
    import dass.ssm.torch_scan as ts
    a = torch.rand(12, 3, dtype=torch.float64)
    b = torch.randn(12, 3, dtype=torch.float64)
    expect = torch.zeros_like(b)
    h = torch.zeros(3, dtype=torch.float64)
    order = range(11, -1, -1) if reverse else range(12)
    prev = None
    for t in order:
        if reverse:
            h = b[t] + (a[prev] * h if prev is not None else 0)
        else:
            h = a[t] * h + b[t]
        expect[t] = h
        prev = t
    for width in (0, 10 ** 9):
        monkeypatch.setattr(ts, "TREE_MAX_STEP_WIDTH", width)
        assert torch.allclose(scan_states(a, b, reverse=reverse), expect, atol=1e-12)


@pytest.mark.parametrize("h0", [False, True])
def test_forward_matches_numpy(h0):
    x, delta, a_log, b, c, state = random_inputs(h0=h0)
    y = selective_scan(x, delta, a_log, b, c, state)
    for bi in range(x.shape[0]):
        for g in range(x.shape[1]):
            ref = kernels.selective_scan(x[bi, g].numpy(), a_log[g].numpy(), delta[bi, g].numpy(),
                                         b[bi, g].numpy(), c[bi, g].numpy(),
                                         None if state is None else state[bi, g].numpy())
            np.testing.assert_allclose(y[bi, g].numpy(), ref, atol=1e-12)


@pytest.mark.parametrize("width", [0, 10 ** 9])
def test_gradcheck(width, monkeypatch):
    import dass.ssm.torch_scan as ts
    monkeypatch.setattr(ts, "TREE_MAX_STEP_WIDTH", width)
    inputs = [t.requires_grad_() for t in random_inputs(B=1, G=2, L=6, D=2, N=2, h0=True)]
    assert torch.autograd.gradcheck(selective_scan, inputs, eps=1e-6, atol=1e-7, rtol=1e-4)


def test_backward_matches_reference():
    inputs = [t.requires_grad_() for t in random_inputs(h0=True)]
    w = torch.randn(2, 3, 9, 4, dtype=torch.float64)
    g1 = torch.autograd.grad((selective_scan(*inputs) * w).sum(), inputs)
    g2 = torch.autograd.grad((selective_scan_reference(*inputs) * w).sum(), inputs)
    for u, v in zip(g1, g2):
        assert torch.allclose(u, v, atol=1e-10)


def test_shape_errors():
    x, delta, a_log, b, c, _ = random_inputs()
    with pytest.raises(ValueError):
        selective_scan(x[0], delta[0], a_log, b[0], c[0])
    with pytest.raises(ValueError):
        selective_scan(x, delta[:, :, :5], a_log, b, c)
    with pytest.raises(ValueError):
        selective_scan(x, delta, a_log[:, :2], b, c)


def test_float32_close_to_float64():
    x, delta, a_log, b, c, _ = random_inputs(L=64)
    y64 = selective_scan(x, delta, a_log, b, c)
    y32 = selective_scan(*(t.float() for t in (x, delta, a_log, b, c)))
    assert torch.allclose(y32.double(), y64, atol=1e-4)
