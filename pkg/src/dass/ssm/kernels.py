"""Reference state-space kernels in numpy.

Everything here works on diagonal systems with ``A = -exp(a_log)``. The
functions are pure and are written for clarity and 64-bit accuracy; the
batched torch kernel in :mod:`dass.ssm.torch_scan` is checked against them.

Shapes used throughout:

* ``N`` state size, ``D`` channels, ``L`` sequence length.
* selective inputs: ``x (L, D)``, ``delta (L, D)``, ``b (L, N)``, ``c (L, N)``,
  ``a_log (D, N)``, ``h0 (D, N)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

SERIES_THRESHOLD = 1e-6


class InvalidParameterError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class SsmParams:
    """Continuous diagonal SSM for one channel."""

    a_log: np.ndarray
    b: np.ndarray
    c: np.ndarray
    delta_bias: float = 0.0

    def __post_init__(self):
        a_log = np.asarray(self.a_log, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        c = np.asarray(self.c, dtype=np.float64)
        if a_log.ndim != 1 or a_log.size < 1:
            raise ShapeError("a_log must be a non-empty vector")
        if b.shape != a_log.shape or c.shape != a_log.shape:
            raise ShapeError(
                f"b {b.shape} and c {c.shape} must match a_log {a_log.shape}")
        for name, arr in (("a_log", a_log), ("b", b), ("c", c)):
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"{name} has non-finite entries")
        if not np.isfinite(self.delta_bias):
            raise InvalidParameterError("delta_bias is not finite")
        object.__setattr__(self, "a_log", a_log)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def state_size(self) -> int:
        return self.a_log.size

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.a_log)


@dataclass(frozen=True)
class DiscreteSsm:
    a_bar: np.ndarray
    b_bar: np.ndarray


@dataclass(frozen=True)
class ScanElement:
    """Affine map ``h -> a * h + b``."""

    a: float
    b: float

    def compose(self, earlier: "ScanElement") -> "ScanElement":
        # self after earlier
        return ScanElement(self.a * earlier.a, self.a * earlier.b + self.b)


def phi(z):
    """``(exp(z) - 1) / z`` with a Taylor branch near zero."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    series = 1.0 + z / 2.0 + z * z / 6.0
    return np.where(small, series, np.expm1(safe) / safe)


def dphi(z):
    """Derivative of :func:`phi`."""
    z = np.asarray(z, dtype=np.float64)
    # cancellation in the closed form is ~eps/z^2, so the series branch is wider
    small = np.abs(z) < 1e-3
    safe = np.where(small, 1.0, z)
    series = 0.5 + z / 3.0 + z * z / 8.0 + z ** 3 / 30.0
    closed = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    return np.where(small, series, closed)


def _check_finite(**arrays):
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise InvalidParameterError(f"{name} has non-finite entries")


def zoh_discretize_diag(A, b, delta):
    """Zero-order hold for diagonal ``A``; all arguments broadcast."""
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    z = delta * A
    return np.exp(z), phi(z) * delta * b


def zoh_discretize(params: SsmParams, delta: float) -> DiscreteSsm:
    if not np.isfinite(delta) or delta <= 0:
        raise InvalidParameterError(f"delta must be positive and finite, got {delta}")
    a_bar, b_bar = zoh_discretize_diag(params.A, params.b, delta)
    return DiscreteSsm(a_bar=a_bar, b_bar=b_bar)


def zoh_discretize_scalar(A: float, B: float, delta: float) -> DiscreteSsm:
    """Scalar ZOH that also accepts ``A = 0`` (handled by the series branch)."""
    _check_finite(A=np.asarray(A), B=np.asarray(B), delta=np.asarray(delta))
    if delta <= 0:
        raise InvalidParameterError(f"delta must be positive, got {delta}")
    a_bar, b_bar = zoh_discretize_diag(A, B, delta)
    return DiscreteSsm(a_bar=np.atleast_1d(a_bar), b_bar=np.atleast_1d(b_bar))


def recurrent_scan(disc: DiscreteSsm, c, x, h0=None) -> np.ndarray:
    """LTI recurrence ``h_t = a_bar*h_{t-1} + b_bar*x_t``, ``y_t = c.h_t``."""
    a_bar = np.asarray(disc.a_bar, dtype=np.float64)
    b_bar = np.asarray(disc.b_bar, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n = a_bar.size
    if b_bar.shape != (n,) or c.shape != (n,):
        raise ShapeError("a_bar, b_bar and c must all have length N")
    if x.ndim != 1 or x.size < 1:
        raise ShapeError("x must be a non-empty 1-D sequence")
    h = np.zeros(n) if h0 is None else np.asarray(h0, dtype=np.float64).copy()
    if h.shape != (n,):
        raise ShapeError(f"h0 must have length {n}")
    y = np.empty(x.size)
    for t, xt in enumerate(x):
        h = a_bar * h + b_bar * xt
        y[t] = c @ h
    return y


def conv_kernel(disc: DiscreteSsm, c, length: int) -> np.ndarray:
    """``K[k] = sum_n c[n] a_bar[n]**k b_bar[n]`` for ``k < length``."""
    if length < 1:
        raise ShapeError("kernel length must be >= 1")
    a_bar = np.asarray(disc.a_bar, dtype=np.float64)
    b_bar = np.asarray(disc.b_bar, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if not (a_bar.shape == b_bar.shape == c.shape):
        raise ShapeError("a_bar, b_bar and c must all have length N")
    powers = a_bar[None, :] ** np.arange(length)[:, None]
    return powers @ (c * b_bar)


def conv_apply(kernel, x) -> np.ndarray:
    """Causal convolution truncated to the input length."""
    kernel = np.asarray(kernel, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if kernel.ndim != 1 or kernel.shape != x.shape:
        raise ShapeError(f"kernel {kernel.shape} and x {x.shape} must be equal-length vectors")
    return np.convolve(x, kernel)[: x.size]


def _selective_inputs(x, a_log, delta, b, c, h0):
    x = np.asarray(x, dtype=np.float64)
    a_log = np.asarray(a_log, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"x must be (L, D), got {x.shape}")
    L, D = x.shape
    if a_log.ndim != 2 or a_log.shape[0] != D:
        raise ShapeError(f"a_log must be (D, N) with D={D}, got {a_log.shape}")
    N = a_log.shape[1]
    if delta.shape != (L, D):
        raise ShapeError(f"delta must be {(L, D)}, got {delta.shape}")
    if b.shape != (L, N) or c.shape != (L, N):
        raise ShapeError(f"b and c must be {(L, N)}, got {b.shape} and {c.shape}")
    h0 = np.zeros((D, N)) if h0 is None else np.asarray(h0, dtype=np.float64)
    if h0.shape != (D, N):
        raise ShapeError(f"h0 must be {(D, N)}, got {h0.shape}")
    _check_finite(x=x, a_log=a_log, delta=delta, b=b, c=c, h0=h0)
    if np.any(delta <= 0):
        raise InvalidParameterError("delta must be strictly positive")
    return x, a_log, delta, b, c, h0


def selective_scan(x, a_log, delta, b, c, h0=None, return_states=False):
    """Input-dependent scan.

    ``h_t = exp(delta_t A) h_{t-1} + b_bar_t x_t`` with ``b_bar_t`` the ZOH
    input matrix at ``(delta_t, b_t)``; ``y_t[d] = sum_n c_t[n] h_t[d, n]``.
    """
    x, a_log, delta, b, c, h = _selective_inputs(x, a_log, delta, b, c, h0)
    A = -np.exp(a_log)
    L, D = x.shape
    y = np.empty((L, D))
    states = np.empty((L,) + h.shape) if return_states else None
    for t in range(L):
        a_bar, b_bar = zoh_discretize_diag(A, b[t][None, :], delta[t][:, None])
        h = a_bar * h + b_bar * x[t][:, None]
        y[t] = h @ c[t]
        if return_states:
            states[t] = h
    if return_states:
        return y, states
    return y


def scan_backward(x, a_log, delta, b, c, dy, h0=None):
    """Analytic gradients of :func:`selective_scan`.

    States are recomputed from the inputs. Returns a dict with keys
    ``x, a_log, delta, b, c, h0`` holding gradients of ``sum(dy * y)``.
    """
    x, a_log, delta, b, c, h0 = _selective_inputs(x, a_log, delta, b, c, h0)
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != x.shape:
        raise ShapeError(f"dy must be {x.shape}, got {dy.shape}")
    _, states = selective_scan(x, a_log, delta, b, c, h0, return_states=True)
    A = -np.exp(a_log)
    L, D = x.shape

    dx = np.zeros_like(x)
    dA = np.zeros_like(A)
    ddelta = np.zeros_like(delta)
    db = np.zeros_like(b)
    dc = np.zeros_like(c)
    g_next = np.zeros_like(h0)       # dL/dh_{t+1}
    a_next = np.zeros_like(h0)       # a_bar_{t+1}
    for t in range(L - 1, -1, -1):
        h_prev = states[t - 1] if t > 0 else h0
        dc[t] = dy[t] @ states[t]
        g = dy[t][:, None] * c[t][None, :] + a_next * g_next
        z = delta[t][:, None] * A
        a_bar = np.exp(z)
        coef = phi(z) * delta[t][:, None]          # b_bar = coef * b
        dx[t] = (g * coef * b[t][None, :]).sum(axis=1)
        db[t] = (g * coef * x[t][:, None]).sum(axis=0)
        gu = g * x[t][:, None] * b[t][None, :]      # dL/d b_bar / b
        # d a_bar/d delta = A a_bar ; d b_bar/d delta = a_bar * b
        ddelta[t] = (g * h_prev * A * a_bar + gu * a_bar).sum(axis=1)
        # d a_bar/dA = delta a_bar ; d b_bar/dA = delta^2 phi'(z) b
        d2 = delta[t][:, None] ** 2
        dA += g * h_prev * delta[t][:, None] * a_bar + gu * d2 * dphi(z)
        g_next, a_next = g, a_bar
    dh0 = a_next * g_next
    return {"x": dx, "a_log": dA * A, "delta": ddelta, "b": db, "c": dc, "h0": dh0}


def lti_scan(params: SsmParams, delta: float, x, h0=None) -> np.ndarray:
    """Single-channel LTI scan driven by continuous parameters."""
    return recurrent_scan(zoh_discretize(params, delta), params.c, x, h0)


def lti_backward(params: SsmParams, delta: float, x, dy, h0=None):
    """Gradients of :func:`lti_scan` via the selective backward pass.

    Constant per-step parameters are broadcast over time, so their
    gradients are the time sums of the per-step ones.
    """
    x = np.asarray(x, dtype=np.float64)
    L = x.size
    n = params.state_size
    grads = scan_backward(
        x[:, None],
        params.a_log[None, :],
        np.full((L, 1), float(delta)),
        np.broadcast_to(params.b, (L, n)),
        np.broadcast_to(params.c, (L, n)),
        np.asarray(dy, dtype=np.float64)[:, None],
        None if h0 is None else np.asarray(h0, dtype=np.float64)[None, :],
    )
    return {
        "x": grads["x"][:, 0],
        "a_log": grads["a_log"][0],
        "delta": grads["delta"].sum(),
        "b": grads["b"].sum(axis=0),
        "c": grads["c"].sum(axis=0),
        "h0": grads["h0"][0],
    }


def associative_scan(a, b):
    """Inclusive scan of affine maps along axis 0.

    Returns ``(A_t, B_t)`` such that ``h_t = A_t * h_{-1} + B_t``. The work is
    done by pairwise reduction: combine neighbours, recurse on the half-length
    sequence, then fill in the even positions (Blelloch's up/down sweep).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"a {a.shape} and b {b.shape} differ")
    if a.ndim == 0 or a.shape[0] == 0:
        raise ValueError("scan input is empty")
    return _blelloch(a, b)


def _blelloch(a, b):
    n = a.shape[0]
    if n == 1:
        return a.copy(), b.copy()
    a_even, b_even = a[0::2], b[0::2]
    a_odd, b_odd = a[1::2], b[1::2]
    m = a_odd.shape[0]
    # pair (2k+1) o (2k)
    pa = a_odd * a_even[:m]
    pb = a_odd * b_even[:m] + b_odd
    sa, sb = _blelloch(pa, pb)
    out_a = np.empty_like(a)
    out_b = np.empty_like(b)
    out_a[1::2], out_b[1::2] = sa, sb
    out_a[0], out_b[0] = a[0], b[0]
    # even position 2k (k >= 1) = element 2k o prefix 2k-1
    k = (n + 1) // 2 - 1
    out_a[2::2] = a_even[1:] * sa[:k]
    out_b[2::2] = a_even[1:] * sb[:k] + b_even[1:]
    return out_a, out_b


def parallel_scan(elements: Sequence[ScanElement]) -> list[ScanElement]:
    """Prefix compositions ``elements[t] o ... o elements[0]``."""
    if len(elements) == 0:
        raise ValueError("parallel_scan needs at least one element")
    a = np.array([e.a for e in elements], dtype=np.float64)
    b = np.array([e.b for e in elements], dtype=np.float64)
    pa, pb = _blelloch(a, b)
    return [ScanElement(float(u), float(v)) for u, v in zip(pa, pb)]


def sequential_fold(elements: Sequence[ScanElement]) -> list[ScanElement]:
    if len(elements) == 0:
        raise ValueError("sequential_fold needs at least one element")
    out = [elements[0]]
    for e in elements[1:]:
        out.append(e.compose(out[-1]))
    return out
