"""State-space sequence math: discretization, scans, and kernels.

The time-invariant paths (``discretize_zoh``, ``recurrent_scan``,
``build_kernel``, ``conv_apply``) are plain-array reference implementations;
each is checkable against the others. The time-varying path
(``selective_scan``) runs on tape tensors through a work-efficient
``parallel_scan`` so the whole recurrence is differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .errors import DomainError, ShapeError
from .numkit import Tensor

# Below this magnitude of A*delta the discretized input gain uses its
# series limit B*delta; the exact form divides by A.
_ZOH_LIMIT = 1e-8


def _npval(v) -> np.ndarray:
    if isinstance(v, Tensor):
        return v.data
    return np.asarray(v, dtype=np.float64)


@dataclass
class SsmParams:
    """Continuous-time diagonal system: state gains a, input b, output c."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    delta: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.a.ndim != 1 or self.a.size < 1:
            raise ShapeError("state vector must be 1-D with N >= 1")
        if self.b.shape != self.a.shape or self.c.shape != self.a.shape:
            raise ShapeError(
                f"a, b, c lengths differ: {self.a.shape}, {self.b.shape}, {self.c.shape}")
        if not self.delta > 0:
            raise DomainError(f"step size must be positive, got {self.delta}")


@dataclass
class DiscreteSsm:
    """Discrete-time diagonal system: per-state multiplier and input gain."""

    a_bar: np.ndarray
    b_bar: np.ndarray

    def __post_init__(self):
        self.a_bar = np.asarray(self.a_bar, dtype=np.float64)
        self.b_bar = np.asarray(self.b_bar, dtype=np.float64)
        if self.a_bar.shape != self.b_bar.shape or self.a_bar.ndim != 1:
            raise ShapeError(
                f"a_bar, b_bar must be equal-length vectors: "
                f"{self.a_bar.shape} vs {self.b_bar.shape}")


@dataclass
class SelectiveSequence:
    """Per-timestep step sizes and input/output projections.

    Fields may be plain arrays (reference path) or tape tensors
    (differentiable path): delta (T,) or (T, 1), b (T, N), c (T, N).
    """

    delta: object
    b: object
    c: object

    def __post_init__(self):
        d, b, c = _npval(self.delta), _npval(self.b), _npval(self.c)
        if d.ndim == 2 and d.shape[1] == 1:
            d = d[:, 0]
        if d.ndim != 1 or d.size < 1:
            raise ShapeError(f"delta must be (T,) or (T,1), got {_npval(self.delta).shape}")
        if b.ndim != 2 or c.ndim != 2 or b.shape != c.shape or b.shape[0] != d.size:
            raise ShapeError(
                f"inconsistent shapes: delta {d.shape}, b {b.shape}, c {c.shape}")

    @property
    def length(self) -> int:
        d = _npval(self.delta)
        return d.shape[0]


@dataclass
class Kernel:
    """Causal convolution taps equivalent to a time-invariant recurrence."""

    k_bar: np.ndarray

    def __post_init__(self):
        self.k_bar = np.asarray(self.k_bar, dtype=np.float64)
        if self.k_bar.ndim != 1 or self.k_bar.size < 1:
            raise ShapeError("kernel must be a non-empty vector")


def _zoh_gain(u: np.ndarray) -> np.ndarray:
    """(exp(u) - 1) / u with its limit 1 at u -> 0."""
    small = np.abs(u) < _ZOH_LIMIT
    safe = np.where(small, 1.0, u)
    return np.where(small, 1.0, (np.exp(u) - 1.0) / safe)


def discretize_zoh(params: SsmParams) -> DiscreteSsm:
    """Zero-order-hold discretization of a diagonal continuous system.

    a_bar = exp(a*delta); b_bar = (exp(a*delta) - 1)/a * b, with the series
    limit b_bar = b*delta when |a*delta| < 1e-8.
    """
    if not params.delta > 0:
        raise DomainError(f"step size must be positive, got {params.delta}")
    u = params.a * params.delta
    a_bar = np.exp(u)
    b_bar = _zoh_gain(u) * params.delta * params.b
    return DiscreteSsm(a_bar=a_bar, b_bar=b_bar)


def recurrent_scan(seq, x, c=None, a=None) -> np.ndarray:
    """Sequential left-to-right evaluation of the state recurrence.

    Reference implementation on plain arrays, h_0 = 0 throughout.

    Time-invariant mode: ``seq`` is a DiscreteSsm, ``c`` its length-N output
    vector, ``x`` shape (T,); returns y shape (T,) with
    h_t = a_bar*h_{t-1} + b_bar*x_t and y_t = c.h_t.

    Time-varying mode: ``seq`` is a SelectiveSequence, ``a`` the diagonal
    state gains arranged (N,) shared or (D, N) per channel, ``x`` shape (T,)
    or (T, D); each step discretizes with delta_t before updating.
    """
    x = _npval(x)
    if isinstance(seq, DiscreteSsm):
        if c is None:
            raise ShapeError("time-invariant mode requires the output vector c")
        c = _npval(c)
        if x.ndim != 1 or c.shape != seq.a_bar.shape:
            raise ShapeError(f"expected x (T,), c {seq.a_bar.shape}; got {x.shape}, {c.shape}")
        h = np.zeros_like(seq.a_bar)
        y = np.empty(x.shape[0])
        for t in range(x.shape[0]):
            h = seq.a_bar * h + seq.b_bar * x[t]
            y[t] = c @ h
        return y
    if isinstance(seq, SelectiveSequence):
        if a is None:
            raise ShapeError("time-varying mode requires the diagonal state gains a")
        a = _npval(a)
        delta = _npval(seq.delta).reshape(-1)
        b, cs = _npval(seq.b), _npval(seq.c)
        squeeze = x.ndim == 1
        x2 = x[:, None] if squeeze else x
        if x2.shape[0] != delta.size:
            raise ShapeError(f"x length {x2.shape[0]} != delta length {delta.size}")
        if np.any(delta <= 0):
            raise DomainError("all step sizes must be positive")
        n = b.shape[1]
        d = x2.shape[1]
        a2 = np.broadcast_to(a if a.ndim == 2 else a[None, :], (d, n))
        if a2.shape != (d, n):
            raise ShapeError(f"state gains {a.shape} incompatible with D={d}, N={n}")
        h = np.zeros((d, n))
        y = np.empty((x2.shape[0], d))
        for t in range(x2.shape[0]):
            u = a2 * delta[t]
            a_bar = np.exp(u)
            bx = _zoh_gain(u) * delta[t] * b[t][None, :] * x2[t][:, None]
            h = a_bar * h + bx
            y[t] = h @ cs[t]
        return y[:, 0] if squeeze else y
    raise ShapeError(f"unsupported sequence description: {type(seq).__name__}")


def build_kernel(params: SsmParams, length: int) -> Kernel:
    """Convolution taps k[t] = sum_n c_n * a_bar_n^t * b_bar_n."""
    if length < 1:
        raise DomainError(f"kernel length must be >= 1, got {length}")
    disc = discretize_zoh(params)
    powers = disc.a_bar[None, :] ** np.arange(length)[:, None]
    return Kernel(k_bar=powers @ (disc.b_bar * params.c))


def conv_apply(kernel: Kernel, x) -> np.ndarray:
    """Causal convolution y_t = sum_{tau<=t} k[tau] * x_{t-tau}."""
    x = _npval(x)
    if x.ndim != 1 or x.shape[0] != kernel.k_bar.shape[0]:
        raise ShapeError(
            f"input length {x.shape} must match kernel length {kernel.k_bar.shape}")
    return np.convolve(x, kernel.k_bar)[: x.shape[0]]


def parallel_scan(a, b) -> Tensor:
    """First-order recurrence h_t = a_t*h_{t-1} + b_t with h_0 = 0.

    Built from tape primitives via pairwise composition
    (a2, b2) o (a1, b1) = (a2*a1, a2*b1 + b2), recursing on the paired
    sequence, so the result is differentiable and uses a fixed,
    deterministic combination order with log-depth.
    """
    a, b = nk.as_tensor(a), nk.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"multiplier and addend shapes differ: {a.shape} vs {b.shape}")
    t_len = a.shape[0] if a.data.ndim else 0
    if a.data.ndim == 0 or t_len == 0:
        raise DomainError("parallel_scan needs a non-empty leading time axis")
    if t_len == 1:
        return b
    half = t_len // 2
    lo = np.arange(0, 2 * half, 2)
    hi = lo + 1
    a_lo, b_lo = nk.take_time(a, lo), nk.take_time(b, lo)
    a_hi, b_hi = nk.take_time(a, hi), nk.take_time(b, hi)
    h_odd = parallel_scan(a_hi * a_lo, a_hi * b_lo + b_hi)
    even = np.arange(0, t_len, 2)
    a_ev, b_ev = nk.take_time(a, even), nk.take_time(b, even)
    prev = nk.take_time(nk.prepend_zero_time(h_odd), np.arange(even.size))
    return nk.interleave_time(a_ev * prev + b_ev, h_odd)


def selective_scan(a_diag, seq: SelectiveSequence, x) -> Tensor:
    """Time-varying recurrence over tape tensors, one state bank per channel.

    a_diag: (D, N) or shared (N,); seq carries delta (T,) or (T,1),
    b (T, N), c (T, N); x is (T, D). Discretization happens per timestep
    inside the graph, so gradients reach every projection. Returns (T, D).
    """
    a_diag, x = nk.as_tensor(a_diag), nk.as_tensor(x)
    delta = nk.as_tensor(seq.delta)
    b, c = nk.as_tensor(seq.b), nk.as_tensor(seq.c)
    if x.data.ndim != 2:
        raise ShapeError(f"x must be (T, D), got {x.shape}")
    t_len, d = x.shape
    n = b.shape[1]
    if delta.data.reshape(-1).shape[0] != t_len or b.shape[0] != t_len:
        raise ShapeError(f"sequence length mismatch: x {x.shape}, delta {delta.shape}")
    if np.any(delta.data <= 0):
        raise DomainError("all step sizes must be positive")
    if a_diag.data.ndim == 1:
        a3 = nk.reshape(a_diag, (1, 1, n))
    elif a_diag.shape == (d, n):
        a3 = nk.reshape(a_diag, (1, d, n))
    else:
        raise ShapeError(f"state gains {a_diag.shape} incompatible with D={d}, N={n}")
    delta3 = nk.reshape(delta, (t_len, 1, 1))
    u = delta3 * a3
    a_bar = nk.exp(u)
    small = np.abs(u.data) < _ZOH_LIMIT
    gain = nk.select(small, nk.Tensor(1.0), (a_bar - 1.0) / nk.select(small, nk.Tensor(1.0), u))
    bx = gain * delta3 * nk.reshape(b, (t_len, 1, n)) * nk.reshape(x, (t_len, d, 1))
    if a_bar.shape[1] == 1 and d > 1:
        a_bar = a_bar * nk.Tensor(np.ones((1, d, 1)))
    h = parallel_scan(a_bar, bx)
    return nk.tsum(h * nk.reshape(c, (t_len, 1, n)), axis=2)
