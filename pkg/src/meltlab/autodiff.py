"""Reverse-mode automatic differentiation over dense float64 tensors.

The graph is recorded implicitly: every operation that touches at least
one gradient-requiring input stores its parents and a backward closure on
the output tensor. backward() replays those closures in reverse creation
order, which is a valid topological order because an op's inputs always
exist before its output. Each training task builds its own graph from its
own leaves, so independent tasks share no mutable state.

Everything is float64. Ops raise DimensionError with the op name and the
offending shapes; they never silently broadcast beyond what the networks
in this package need (bias rows and scalar constants).
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import erf

from .errors import DegenerateInputError, DimensionError

LN_EPS = 1e-5           # inside the sqrt of layer_norm
COSINE_MIN_SQNORM = 1e-24   # squared-norm floor, i.e. norm >= 1e-12

_ids = itertools.count()

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_f64(x) -> np.ndarray:
    # ascontiguousarray would force ndmin=1 and destroy scalar shapes
    a = np.asarray(x, dtype=np.float64)
    if a.ndim and not a.flags["C_CONTIGUOUS"]:
        a = np.ascontiguousarray(a)
    return a


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_back", "_nid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._back = None
        self._nid = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar; scalars are treated as constant scale/shift
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0)) if isinstance(other, Tensor) else shift(self, -float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], back) -> Tensor:
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._back = back
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for every reachable leaf.

    loss must be a scalar recorded on the graph. Each node's closure runs
    exactly once, after all of its consumers, because creation ids are
    strictly increasing along every edge.
    """
    if loss.shape != ():
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DimensionError("backward: loss does not depend on any trainable tensor")
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    nodes.sort(key=lambda t: t._nid, reverse=True)
    loss.grad = np.ones((), dtype=np.float64)
    for t in nodes:
        if t._back is not None and t.grad is not None:
            t._back(t.grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g back down to `shape` (inverse of the forward broadcast)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ts) in enumerate(zip(g.shape, shape)):
        if ts == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not align") from None


# -- elementwise and shape ops ----------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out = _record(a.data + b.data, (a, b), None)
    if out.requires_grad:
        def back(g):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(g, b.shape))
        out._back = back
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    out = _record(a.data * b.data, (a, b), None)
    if out.requires_grad:
        def back(g):
            _accum(a, _unbroadcast(g * b.data, a.shape))
            _accum(b, _unbroadcast(g * a.data, b.shape))
        out._back = back
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _record(a.data * s, (a,), None)
    if out.requires_grad:
        out._back = lambda g: _accum(a, g * s)
    return out


def shift(a: Tensor, c: float) -> Tensor:
    out = _record(a.data + float(c), (a,), None)
    if out.requires_grad:
        out._back = lambda g: _accum(a, g)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError(f"matmul: only 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = _record(a.data @ b.data, (a, b), None)
    if out.requires_grad:
        def back(g):
            if a.ndim == 2 and b.ndim == 2:
                _accum(a, g @ b.data.T)
                _accum(b, a.data.T @ g)
            elif a.ndim == 1 and b.ndim == 2:
                _accum(a, g @ b.data.T)
                _accum(b, np.outer(a.data, g))
            elif a.ndim == 2 and b.ndim == 1:
                _accum(a, np.outer(g, b.data))
                _accum(b, a.data.T @ g)
            else:  # 1-D @ 1-D -> scalar
                _accum(a, g * b.data)
                _accum(b, g * a.data)
        out._back = back
    return out


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expects 2-D, got {a.shape}")
    out = _record(a.data.T.copy(), (a,), None)
    if out.requires_grad:
        out._back = lambda g: _accum(a, g.T)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of the last axis."""
    n = a.shape[-1]
    if not (0 <= start < stop <= n):
        raise DimensionError(f"slice_cols: [{start}:{stop}) out of range for last dim {n}")
    out = _record(a.data[..., start:stop].copy(), (a,), None)
    if out.requires_grad:
        def back(g):
            full = np.zeros_like(a.data)
            full[..., start:stop] = g
            _accum(a, full)
        out._back = back
    return out


def concat(parts: list[Tensor]) -> Tensor:
    """Concatenate along the last axis. All other dims must match."""
    if not parts:
        raise DimensionError("concat: empty input list")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise DimensionError(f"concat: leading dims differ: {[p.shape for p in parts]}")
    widths = [p.shape[-1] for p in parts]
    out = _record(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), None)
    if out.requires_grad:
        offs = np.cumsum([0] + widths)
        def back(g):
            for p, i0, i1 in zip(parts, offs[:-1], offs[1:]):
                _accum(p, g[..., i0:i1])
        out._back = back
    return out


def tile_rows(v: Tensor, m: int) -> Tensor:
    """Repeat a vector as m identical rows."""
    if v.ndim != 1:
        raise DimensionError(f"tile_rows: expects 1-D, got {v.shape}")
    if m < 1:
        raise DimensionError(f"tile_rows: m must be >= 1, got {m}")
    out = _record(np.tile(v.data, (m, 1)), (v,), None)
    if out.requires_grad:
        out._back = lambda g: _accum(v, g.sum(axis=0))
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a (V, d) table; repeated ids accumulate gradient."""
    ids = np.asarray(ids)
    if table.ndim != 2 or ids.ndim != 1:
        raise DimensionError(f"embedding: table {table.shape}, ids {ids.shape}")
    if ids.size == 0:
        raise DimensionError("embedding: empty id sequence")
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise DimensionError(f"embedding: id out of range for table with {table.shape[0]} rows")
    out = _record(table.data[ids].copy(), (table,), None)
    if out.requires_grad:
        def back(g):
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            _accum(table, full)
        out._back = back
    return out


# -- nonlinearities and normalizers -----------------------------------------

def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU: x * Phi(x)."""
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = _record(x * phi_cdf, (a,), None)
    if out.requires_grad:
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        out._back = lambda g: _accum(a, g * (phi_cdf + x * pdf))
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, numerically stabilized."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _record(y, (a,), None)
    if out.requires_grad:
        def back(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(a, y * (g - dot))
        out._back = back
    return out


def logsumexp(a: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis, numerically stabilized.

    Reduces the last axis away: (B, K) -> (B,), (K,) -> scalar. The
    gradient is the softmax of the input, so cross-entropy built as
    logsumexp(z) - z[label] stays stable for any logit magnitude.
    """
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    y = np.asarray((m + np.log(s)).squeeze(-1))
    out = _record(y, (a,), None)
    if out.requires_grad:
        def back(g):
            _accum(a, (e / s) * np.expand_dims(np.asarray(g), -1))
        out._back = back
    return out


def layer_norm(a: Tensor) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (eps inside sqrt).

    A zero-variance row maps to zeros. Affine gain/bias live outside as
    ordinary mul/add parameters.
    """
    x = a.data
    if x.shape[-1] < 1:
        raise DimensionError(f"layer_norm: empty last axis in {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    y = xc * inv
    out = _record(y, (a,), None)
    if out.requires_grad:
        def back(g):
            # d/dx of (x - mu)/sqrt(var + eps), var over the same axis
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            _accum(a, inv * (g - gm - y * gy))
        out._back = back
    return out


def mean_pool(a: Tensor) -> Tensor:
    """Mean over the sequence axis: (L, d) -> (d,)."""
    if a.ndim != 2 or a.shape[0] < 1:
        raise DimensionError(f"mean_pool: expects non-empty (L, d), got {a.shape}")
    L = a.shape[0]
    out = _record(a.data.mean(axis=0), (a,), None)
    if out.requires_grad:
        out._back = lambda g: _accum(a, np.tile(g / L, (L, 1)))
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _record(np.asarray(a.data.sum()), (a,), None)
    if out.requires_grad:
        out._back = lambda g: _accum(a, np.full_like(a.data, float(g)))
    return out


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of two 1-D vectors.

    Computed as <a,b> / sqrt(<a,a><b,b>) so identical vectors give exactly
    1.0. Raises DegenerateInputError when either norm is below 1e-12.
    """
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: expects equal 1-D shapes, got {a.shape}, {b.shape}")
    saa = float(a.data @ a.data)
    sbb = float(b.data @ b.data)
    if saa < COSINE_MIN_SQNORM or sbb < COSINE_MIN_SQNORM:
        raise DegenerateInputError("cosine_similarity: input norm below 1e-12")
    sab = float(a.data @ b.data)
    denom = math.sqrt(saa * sbb)
    c = sab / denom
    out = _record(np.asarray(c), (a, b), None)
    if out.requires_grad:
        def back(g):
            g = float(g)
            _accum(a, g * (b.data / denom - (c / saa) * a.data))
            _accum(b, g * (a.data / denom - (c / sbb) * b.data))
        out._back = back
    return out


def gradcheck(build, tensors: list[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    build() must rebuild the scalar loss from the tensors' current values.
    Relative error uses max(|analytic|, |numeric|, 1e-3) as the scale so
    near-zero gradients compare on an absolute footing.
    """
    for t in tensors:
        t.grad = None
    loss = build()
    backward(loss)
    worst = 0.0
    for t in tensors:
        ana = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = build().item()
            flat[i] = orig - h
            fm = build().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(num - ana[i]) / max(abs(num), abs(ana[i]), 1e-3))
    for t in tensors:
        t.grad = None
    return worst


# -- Adam --------------------------------------------------------------------

class AdamState:
    """Per-parameter-vector Adam moments. step strictly increases by 1."""

    __slots__ = ("m", "v", "step", "lr", "beta1", "beta2", "eps")

    def __init__(self, size: int, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size, dtype=np.float64)
        self.v = np.zeros(size, dtype=np.float64)
        self.step = 0
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameter vector."""
    if params.shape != grads.shape or params.ndim != 1:
        raise DimensionError(f"adam_step: params {params.shape} vs grads {grads.shape}")
    if params.size != state.m.size:
        raise DimensionError(f"adam_step: state sized {state.m.size}, params {params.size}")
    state.step += 1
    t = state.step
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** t)
    v_hat = state.v / (1.0 - state.beta2 ** t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Adam over a list of Tensors, one moment buffer per tensor."""

    def __init__(self, tensors: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.tensors = list(tensors)
        self.states = [AdamState(t.data.size, lr, beta1, beta2, eps) for t in self.tensors]

    def step(self) -> None:
        for t, st in zip(self.tensors, self.states):
            if t.grad is None:
                continue
            flat = adam_step(t.data.reshape(-1), t.grad.reshape(-1), st)
            t.data = flat.reshape(t.data.shape)

    def set_lr(self, lr: float) -> None:
        """Update the learning rate of every parameter's state (for schedules)."""
        for st in self.states:
            st.lr = float(lr)

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.grad = None
