"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every trainable operation in the library is built from the primitives
registered here. Evaluating a primitive while a trace is recording appends
one node (inputs, output, local vector-Jacobian product); ``backward``
replays the nodes in reverse to accumulate gradients. Higher-level
operations (scans, layers, losses) are compositions of these primitives,
so they are differentiable without any extra code.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

_UIDS = itertools.count(1)

# Names of every registered primitive, populated by @_primitive.
PRIMITIVES: dict[str, Callable] = {}


class Tensor:
    """Dense array of float64 values.

    Operations never mutate their operands; optimizer steps rewrite ``data``
    in place between traces. ``trainable`` marks a leaf parameter; tensors
    produced by primitives are never trainable. Values arriving from
    external input are rejected if non-finite.
    """

    __slots__ = ("data", "trainable", "uid", "name")

    def __init__(self, data, trainable: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"tensor {name or ''} contains non-finite values")
        self.data = arr
        self.trainable = trainable
        self.uid = next(_UIDS)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __array__(self, dtype=None, copy=None):
        raise ContractError(
            "numpy functions do not record on the trace; use the registered primitives"
        )

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    # Operator sugar; scalars are wrapped as constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _fresh(data: np.ndarray) -> Tensor:
    """Internal constructor that skips the finite check."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.trainable = False
    t.uid = next(_UIDS)
    t.name = None
    return t


def as_tensor(x) -> Tensor:
    """Wrap a scalar or array as a constant tensor; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


@dataclass
class Node:
    """One recorded primitive application."""

    op: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class Trace:
    """Ordered record of primitive applications for one evaluation.

    Nodes are appended in evaluation order, which is a topological order by
    construction. ``parameters`` collects every trainable leaf that any node
    consumed.
    """

    nodes: list[Node] = field(default_factory=list)
    parameters: dict[int, Tensor] = field(default_factory=dict)
    output: Tensor | None = None


_ACTIVE: list[Trace] = []


class recording:
    """Context manager that records primitive applications onto a Trace."""

    def __enter__(self) -> Trace:
        tr = Trace()
        _ACTIVE.append(tr)
        return tr

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()


def _record(op: str, out: Tensor, inputs: Sequence[Tensor], vjp) -> None:
    if not _ACTIVE:
        return
    tr = _ACTIVE[-1]
    for t in inputs:
        if t.trainable:
            tr.parameters.setdefault(t.uid, t)
    tr.nodes.append(Node(op, tuple(t.uid for t in inputs), out.uid, vjp))


def _primitive(fn):
    PRIMITIVES[fn.__name__] = fn
    return fn


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast during the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --- elementwise arithmetic ---------------------------------------------


@_primitive
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = _fresh(a.data + b.data)
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e
    ash, bsh = a.shape, b.shape
    _record("add", out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))
    return out


@_primitive
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = _fresh(a.data - b.data)
    except ValueError as e:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from e
    ash, bsh = a.shape, b.shape
    _record("sub", out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))
    return out


@_primitive
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = _fresh(a.data * b.data)
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e
    ad, bd, ash, bsh = a.data, b.data, a.shape, b.shape
    _record("mul", out, (a, b),
            lambda g: (_unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh)))
    return out


@_primitive
def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = _fresh(a.data / b.data)
    except ValueError as e:
        raise ShapeError(f"div: {a.shape} vs {b.shape}") from e
    ad, bd, ash, bsh = a.data, b.data, a.shape, b.shape
    _record("div", out, (a, b),
            lambda g: (_unbroadcast(g / bd, ash),
                       _unbroadcast(-g * ad / (bd * bd), bsh)))
    return out


@_primitive
def pow_const(x, p: float) -> Tensor:
    """x ** p for a constant exponent."""
    x = as_tensor(x)
    out = _fresh(x.data ** p)
    xd = x.data
    _record("pow_const", out, (x,), lambda g: (g * p * xd ** (p - 1.0),))
    return out


@_primitive
def absolute(x) -> Tensor:
    x = as_tensor(x)
    out = _fresh(np.abs(x.data))
    sgn = np.sign(x.data)
    _record("absolute", out, (x,), lambda g: (g * sgn,))
    return out


# --- transcendental and activations --------------------------------------


@_primitive
def exp(x) -> Tensor:
    x = as_tensor(x)
    out = _fresh(np.exp(x.data))
    od = out.data
    _record("exp", out, (x,), lambda g: (g * od,))
    return out


@_primitive
def log(x) -> Tensor:
    x = as_tensor(x)
    out = _fresh(np.log(x.data))
    xd = x.data
    _record("log", out, (x,), lambda g: (g / xd,))
    return out


@_primitive
def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = _fresh(s)
    _record("sigmoid", out, (x,), lambda g: (g * s * (1.0 - s),))
    return out


@_primitive
def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = _fresh(x.data * s)
    xd = x.data
    _record("silu", out, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))
    return out


@_primitive
def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = _fresh(np.logaddexp(0.0, x.data))
    s = _sigmoid(x.data)
    _record("softplus", out, (x,), lambda g: (g * s,))
    return out


@_primitive
def softmax(x) -> Tensor:
    """Row-wise softmax over the last axis, shift-stabilized."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _fresh(s)
    _record("softmax", out, (x,),
            lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))
    return out


# --- linear algebra and reductions ---------------------------------------


@_primitive
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = _fresh(a.data @ b.data)
    ad, bd = a.data, b.data
    _record("matmul", out, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    return out


@_primitive
def tsum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = _fresh(x.data.sum(axis=axis, keepdims=keepdims))
    xsh = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xsh).copy(),)

    _record("tsum", out, (x,), vjp)
    return out


@_primitive
def tmean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = _fresh(x.data.mean(axis=axis, keepdims=keepdims))
    xsh = x.shape
    n = x.size if axis is None else xsh[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, xsh).copy(),)

    _record("tmean", out, (x,), vjp)
    return out


# --- selection and data movement ------------------------------------------


@_primitive
def select(mask: np.ndarray, a, b) -> Tensor:
    """Elementwise choice: mask ? a : b. The mask is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    try:
        out = _fresh(np.where(mask, a.data, b.data))
    except ValueError as e:
        raise ShapeError(f"select: mask {mask.shape}, {a.shape}, {b.shape}") from e
    ash, bsh = a.shape, b.shape
    _record("select", out, (a, b),
            lambda g: (_unbroadcast(np.where(mask, g, 0.0), ash),
                       _unbroadcast(np.where(mask, 0.0, g), bsh)))
    return out


@_primitive
def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = _fresh(x.data.reshape(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: {x.shape} -> {shape}") from e
    xsh = x.shape
    _record("reshape", out, (x,), lambda g: (g.reshape(xsh),))
    return out


@_primitive
def flip_time(x) -> Tensor:
    """Reverse along axis 0."""
    x = as_tensor(x)
    out = _fresh(np.flip(x.data, axis=0).copy())
    _record("flip_time", out, (x,), lambda g: (np.flip(g, axis=0).copy(),))
    return out


@_primitive
def take_time(x, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0 by a constant index array."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"take_time: index out of range for length {x.shape[0]}")
    out = _fresh(x.data[idx])
    xsh = x.shape

    def vjp(g):
        z = np.zeros(xsh)
        np.add.at(z, idx, g)
        return (z,)

    _record("take_time", out, (x,), vjp)
    return out


@_primitive
def prepend_zero_time(x) -> Tensor:
    """Insert one zero row before axis 0."""
    x = as_tensor(x)
    pad = np.zeros((1,) + x.shape[1:])
    out = _fresh(np.concatenate([pad, x.data], axis=0))
    _record("prepend_zero_time", out, (x,), lambda g: (g[1:],))
    return out


@_primitive
def interleave_time(a, b) -> Tensor:
    """Merge rows: out[0::2] = a, out[1::2] = b; len(a) - len(b) in {0, 1}."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1:] != b.shape[1:] or a.shape[0] - b.shape[0] not in (0, 1):
        raise ShapeError(f"interleave_time: {a.shape} with {b.shape}")
    n = a.shape[0] + b.shape[0]
    outd = np.empty((n,) + a.shape[1:])
    outd[0::2] = a.data
    outd[1::2] = b.data
    out = _fresh(outd)
    _record("interleave_time", out, (a, b),
            lambda g: (g[0::2].copy(), g[1::2].copy()))
    return out


@_primitive
def stack_time(parts: Sequence) -> Tensor:
    """Stack equal-shaped tensors along a new leading axis."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("stack_time: empty input")
    out = _fresh(np.stack([p.data for p in parts], axis=0))
    _record("stack_time", out, tuple(parts),
            lambda g: tuple(g[i] for i in range(len(parts))))
    return out


@_primitive
def causal_conv1d(x, w, b) -> Tensor:
    """Depthwise causal convolution along axis 0.

    x: (T, D); w: (D, K) taps; b: (D,).
    out[t, d] = b[d] + sum_k w[d, k] * x[t - k, d], with x[<0] = 0.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] \
            or b.shape != (x.shape[1],):
        raise ShapeError(f"causal_conv1d: x {x.shape}, w {w.shape}, b {b.shape}")
    T, _ = x.shape
    K = w.shape[1]
    y = np.broadcast_to(b.data, x.shape).copy()
    for k in range(min(K, T)):
        if k == 0:
            y += w.data[:, 0] * x.data
        else:
            y[k:] += w.data[:, k] * x.data[:-k]
    out = _fresh(y)
    xd, wd = x.data, w.data

    def vjp(g):
        gx = np.zeros_like(xd)
        gw = np.zeros_like(wd)
        for k in range(min(K, T)):
            if k == 0:
                gx += wd[:, 0] * g
                gw[:, 0] = (g * xd).sum(axis=0)
            else:
                gx[:-k] += wd[:, k] * g[k:]
                gw[:, k] = (g[k:] * xd[:-k]).sum(axis=0)
        return gx, gw, g.sum(axis=0)

    _record("causal_conv1d", out, (x, w, b), vjp)
    return out


# --- evaluation, backward, verification -----------------------------------


def forward_eval(graph_fn: Callable, inputs: Sequence[Tensor]) -> tuple[Tensor, Trace]:
    """Evaluate graph_fn(*inputs) while recording every primitive onto a Trace."""
    with recording() as tr:
        out = graph_fn(*inputs)
    if not isinstance(out, Tensor):
        raise ContractError("graph_fn must return a Tensor built from registered primitives")
    tr.output = out
    return out, tr


def backward(trace: Trace, seed, params: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-accumulate gradients through a recorded trace.

    Returns gradients keyed by parameter tensor for ``trace.parameters``, or
    for the explicit ``params`` list when given. Parameters off every path
    to the output receive zeros.
    """
    if trace.output is None:
        raise ContractError("trace has no recorded output")
    seed = as_tensor(seed)
    if seed.shape != trace.output.shape:
        raise ShapeError(f"seed shape {seed.shape} != output shape {trace.output.shape}")
    grads: dict[int, np.ndarray] = {trace.output.uid: np.asarray(seed.data, dtype=np.float64)}
    for node in reversed(trace.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        for uid, gpart in zip(node.inputs, node.vjp(g)):
            if gpart is None:
                continue
            acc = grads.get(uid)
            grads[uid] = gpart if acc is None else acc + gpart
    targets = list(trace.parameters.values()) if params is None else list(params)
    return {p: grads.get(p.uid, np.zeros(p.shape)) for p in targets}


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst: str = ""


def grad_check(graph_fn: Callable, params: Sequence[Tensor],
               epsilon: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    graph_fn(*params) must return a scalar tensor. Relative error per
    coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not (0.0 < epsilon <= 1e-2):
        raise DomainError(f"epsilon {epsilon} outside (0, 1e-2]")
    out, trace = forward_eval(graph_fn, params)
    if out.size != 1:
        raise ContractError("grad_check requires a scalar-valued graph_fn")
    analytic = backward(trace, Tensor(np.ones(out.shape)), params=params)

    worst = 0.0
    worst_at = ""
    for p in params:
        flat = p.data.reshape(-1)
        ana = analytic[p].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(graph_fn(*params).data)
            flat[i] = orig - epsilon
            f_minus = float(graph_fn(*params).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            rel = abs(ana[i] - numeric) / max(abs(ana[i]), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
                worst_at = f"{p.name or 'param'}[{i}]"
    return GradCheckReport(max_rel_err=worst, passed=worst <= tolerance, worst=worst_at)
