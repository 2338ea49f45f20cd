"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array and records the operations applied to
it; :func:`backward` walks the recorded graph in reverse topological order
and accumulates gradients into ``.grad``. Float64 is the default dtype,
float32 is available on request. The op set is deliberately small and every
op is certified against central finite differences (see
:func:`finite_diff_check`).

Discrete choices made inside forward passes (e.g. hard cluster assignment)
are routed through :func:`discrete_choice` so a finite-difference run can
record them once and replay them as constants for every perturbed
evaluation.
"""

from __future__ import annotations

from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf as _erf

from .rng import Rng

DEFAULT_DTYPE = np.float64

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """An operation was handed tensors whose shapes do not fit."""


class UnknownOpError(ValueError):
    """``forward_op`` was asked for an op kind outside the catalog."""


# ---------------------------------------------------------------------------
# grad mode
# ---------------------------------------------------------------------------

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad}{tag})"

    # -- graph handles ---------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _scalar_err(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """Build an op output node; record graph edges only when grads can flow."""
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    """Recorded forward graph, nodes in topological order (leaves first)."""

    nodes: list = field(default_factory=list)


def build_graph(root: Tensor) -> Graph:
    # iterative post-order DFS; recursion would overflow on deep chains
    nodes: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            nodes.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return Graph(nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``.grad``.

    Repeated calls without zeroing keep accumulating, which is what batch
    gradient accumulation relies on.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = build_graph(loss)
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# frozen discrete choices
# ---------------------------------------------------------------------------


class _ChoiceTape:
    __slots__ = ("recording", "items", "pos")

    def __init__(self):
        self.recording = True
        self.items: list = []
        self.pos = 0

    def rewind(self, replay: bool = True) -> None:
        self.recording = not replay
        self.pos = 0


_ACTIVE_TAPE: _ChoiceTape | None = None


@contextmanager
def frozen_choices():
    """Record discrete choices on first pass, replay them on later passes.

    The finite-difference harness uses this to keep argmax-style decisions
    constant while parameters are perturbed.
    """
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    tape = _ChoiceTape()
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = prev


def discrete_choice(compute):
    """Run ``compute()`` (returning plain numpy/ints), honoring an active tape."""
    tape = _ACTIVE_TAPE
    if tape is None:
        return compute()
    if tape.recording:
        value = compute()
        tape.items.append(value)
        return value
    if tape.pos >= len(tape.items):
        raise RuntimeError("choice tape replay ran past the recorded choices")
    value = tape.items[tape.pos]
    tape.pos += 1
    return value


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def back(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), back)


def neg(x: Tensor) -> Tensor:
    return mul(_wrap(x), _wrap(-1.0))


def clamp(x: Tensor, min_=None, max_=None) -> Tensor:
    x = _wrap(x)
    data = np.clip(x.data, min_, max_)
    lo = -np.inf if min_ is None else min_
    hi = np.inf if max_ is None else max_
    inside = (x.data >= lo) & (x.data <= hi)

    def back(g):
        _accum(x, g * inside)

    return _make(data, (x,), back)


def exp(x: Tensor) -> Tensor:
    x = _wrap(x)
    data = np.exp(x.data)

    def back(g):
        _accum(x, g * data)

    return _make(data, (x,), back)


def log(x: Tensor) -> Tensor:
    x = _wrap(x)
    data = np.log(x.data)

    def back(g):
        _accum(x, g / x.data)

    return _make(data, (x,), back)


def sqrt(x: Tensor) -> Tensor:
    x = _wrap(x)
    data = np.sqrt(x.data)

    def back(g):
        _accum(x, g * 0.5 / data)

    return _make(data, (x,), back)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    data = _sigmoid_np(x.data)

    def back(g):
        _accum(x, g * data * (1.0 - data))

    return _make(data, (x,), back)


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    data = np.maximum(x.data, 0.0)

    def back(g):
        _accum(x, g * (x.data > 0))

    return _make(data, (x,), back)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _wrap(x)
    cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    data = x.data * cdf

    def back(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accum(x, g * (cdf + x.data * pdf))

    return _make(data, (x,), back)


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    x = _wrap(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(x, data * (g - dot))

    return _make(data, (x,), back)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _axis_tuple(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _make(data, (x,), back)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _axis_tuple(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    data = x.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(g, x.shape) / count)

    return _make(data, (x,), back)


def reduce_max(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max along an axis; gradient routes to the first maximum (deterministic)."""
    x = _wrap(x)
    if axis is None:
        data = x.data.max()
        flat_idx = int(np.argmax(x.data))

        def back(g):
            gx = np.zeros_like(x.data)
            gx.reshape(-1)[flat_idx] = g if np.ndim(g) == 0 else g.reshape(-1)[0]
            _accum(x, gx)

        return _make(np.asarray(data), (x,), back)

    ax = axis % x.ndim
    data = x.data.max(axis=ax, keepdims=keepdims)
    idx = np.argmax(x.data, axis=ax)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, ax), g, axis=ax)
        _accum(x, gx)

    return _make(data, (x,), back)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(data, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """w @ x (+ b); x is (d_in, n), w is (d_out, d_in), b is (d_out, 1)."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 2 or w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"linear: weight {w.shape} does not match input {x.shape}")
    data = w.data @ x.data
    if b is not None:
        data = data + b.data

    def back(g):
        _accum(w, g @ x.data.T)
        _accum(x, w.data.T @ g)
        if b is not None:
            _accum(b, _unbroadcast(g, b.shape))

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, back)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = _wrap(x)
    data = x.data.reshape(shape)

    def back(g):
        _accum(x, g.reshape(x.shape))

    return _make(data, (x,), back)


def permute(x: Tensor, axes) -> Tensor:
    x = _wrap(x)
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def back(g):
        _accum(x, np.transpose(g, inv))

    return _make(data, (x,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(data, tuple(tensors), back)


def split(x: Tensor, sections: int, axis: int = 0) -> list[Tensor]:
    """Split into `sections` equal parts along `axis`."""
    x = _wrap(x)
    if x.shape[axis] % sections:
        raise ShapeError(f"split: axis {axis} of {x.shape} not divisible by {sections}")
    step = x.shape[axis] // sections
    outs = []
    for i in range(sections):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(i * step, (i + 1) * step)
        sl = tuple(sl)
        piece = x.data[sl]

        def back(g, sl=sl):
            if x.requires_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                x.grad[sl] += g

        outs.append(_make(piece.copy(), (x,), back))
    return outs


def pad2d(x: Tensor, pad: int | tuple) -> Tensor:
    """Zero-pad the two trailing axes; pad is int or (top, bottom, left, right)."""
    x = _wrap(x)
    if isinstance(pad, int):
        pt = pb = pl = pr = pad
    else:
        pt, pb, pl, pr = pad
    width = [(0, 0)] * (x.ndim - 2) + [(pt, pb), (pl, pr)]
    data = np.pad(x.data, width)
    sl = tuple([slice(None)] * (x.ndim - 2) + [slice(pt, pt + x.shape[-2]), slice(pl, pl + x.shape[-1])])

    def back(g):
        _accum(x, g[sl])

    return _make(data, (x,), back)


def pad1d(x: Tensor, pad: int | tuple) -> Tensor:
    """Zero-pad the trailing axis."""
    x = _wrap(x)
    pl, pr = (pad, pad) if isinstance(pad, int) else pad
    width = [(0, 0)] * (x.ndim - 1) + [(pl, pr)]
    data = np.pad(x.data, width)
    sl = tuple([slice(None)] * (x.ndim - 1) + [slice(pl, pl + x.shape[-1])])

    def back(g):
        _accum(x, g[sl])

    return _make(data, (x,), back)


# ---------------------------------------------------------------------------
# gather / scatter
# ---------------------------------------------------------------------------


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    """np.take semantics: output shape x.shape[:axis] + indices.shape + x.shape[axis+1:]."""
    x = _wrap(x)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    data = np.take(x.data, idx, axis=ax)

    def back(g):
        gx = np.zeros_like(x.data)
        gx_front = np.moveaxis(gx, ax, 0)
        g_front = np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(gx_front, idx, g_front)
        _accum(x, gx)

    return _make(data, (x,), back)


def scatter_add(base: Tensor, indices, updates: Tensor, axis: int = 0) -> Tensor:
    """out = base.copy(); out[..., indices, ...] += updates (duplicates accumulate)."""
    base, updates = _wrap(base), _wrap(updates)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % base.ndim
    expect = base.shape[:ax] + idx.shape + base.shape[ax + 1 :]
    if updates.shape != expect:
        raise ShapeError(f"scatter_add: updates shape {updates.shape}, expected {expect}")
    data = base.data.copy()
    data_front = np.moveaxis(data, ax, 0)
    upd_front = np.moveaxis(updates.data, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
    np.add.at(data_front, idx, upd_front)

    def back(g):
        _accum(base, g)
        g_take = np.take(g, idx, axis=ax)
        _accum(updates, g_take)

    return _make(data, (base, updates), back)


# ---------------------------------------------------------------------------
# pooling / resampling
# ---------------------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    """(C, H, W) -> (C, 1, 1) spatial mean."""
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool expects (C, H, W), got {x.shape}")
    return reduce_mean(x, axis=(1, 2), keepdims=True)


def avg_pool_grid(x: Tensor, grid: int) -> Tensor:
    """(C, H, W) -> (C, grid, grid): mean over non-overlapping cells."""
    x = _wrap(x)
    c, h, w = x.shape
    if h % grid or w % grid:
        raise ShapeError(f"avg_pool_grid: {h}x{w} not divisible by grid {grid}")
    ch, cw = h // grid, w // grid
    data = x.data.reshape(c, grid, ch, grid, cw).mean(axis=(2, 4))

    def back(g):
        gx = np.broadcast_to(g[:, :, None, :, None], (c, grid, ch, grid, cw)) / (ch * cw)
        _accum(x, gx.reshape(c, h, w))

    return _make(data, (x,), back)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """(C, H, W) -> (C, H*f, W*f) by pixel replication."""
    x = _wrap(x)
    c, h, w = x.shape
    data = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def back(g):
        _accum(x, g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)))

    return _make(data, (x,), back)


def bilinear_sample(map_t: Tensor, coords: Tensor) -> Tensor:
    """Sample (C, H, W) at continuous pixel coords (N, 2) as (x, y) -> (C, N).

    Out-of-bounds corner reads are zero; gradients flow to both the map and
    the coordinates.
    """
    map_t, coords = _wrap(map_t), _wrap(coords)
    if map_t.ndim != 3 or coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: map {map_t.shape}, coords {coords.shape}")
    c, h, w = map_t.shape
    xs = coords.data[:, 0]
    ys = coords.data[:, 1]
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx = xs - x0
    fy = ys - y0

    def read(yy, xx):
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = map_t.data[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return vals * ok, ok

    v00, m00 = read(y0, x0)
    v01, m01 = read(y0, x0 + 1)
    v10, m10 = read(y0 + 1, x0)
    v11, m11 = read(y0 + 1, x0 + 1)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    data = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def back(g):
        if map_t.requires_grad:
            gm = np.zeros_like(map_t.data)
            for (yy, xx, ww, mm) in (
                (y0, x0, w00, m00),
                (y0, x0 + 1, w01, m01),
                (y0 + 1, x0, w10, m10),
                (y0 + 1, x0 + 1, w11, m11),
            ):
                contrib = g * ww * mm
                np.add.at(gm, (slice(None), np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)), contrib)
            _accum(map_t, gm)
        if coords.requires_grad:
            # d/dfx and d/dfy of the interpolation weights
            dfx = ((1 - fy) * (v01 - v00) + fy * (v11 - v10)) * 1.0
            dfy = ((1 - fx) * (v10 - v00) + fx * (v11 - v01)) * 1.0
            gc = np.zeros_like(coords.data)
            gc[:, 0] = (g * dfx).sum(axis=0)
            gc[:, 1] = (g * dfy).sum(axis=0)
            _accum(coords, gc)

    return _make(data, (map_t, coords), back)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def _rows_normalize(x: Tensor, rows_shape, eps: float) -> Tensor:
    """Normalize each leading-axis row of a (R, M) view to zero mean, unit var."""
    orig_shape = x.shape
    v = x.data.reshape(rows_shape)
    mu = v.mean(axis=1, keepdims=True)
    d = v - mu
    var = (d * d).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = d * inv
    data = y.reshape(orig_shape)

    def back(g):
        gr = g.reshape(rows_shape)
        gm = gr.mean(axis=1, keepdims=True)
        gym = (gr * y).mean(axis=1, keepdims=True)
        gx = inv * (gr - gm - y * gym)
        _accum(x, gx.reshape(orig_shape))

    return _make(data, (x,), back)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over spatial dims, no affine terms."""
    x = _wrap(x)
    if x.ndim != 3:
        raise ShapeError(f"instance_norm expects (C, H, W), got {x.shape}")
    c = x.shape[0]
    return _rows_normalize(x, (c, x.shape[1] * x.shape[2]), eps)


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize per channel-group over (channels-in-group, spatial), no affine."""
    x = _wrap(x)
    if x.ndim != 3:
        raise ShapeError(f"group_norm expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    return _rows_normalize(x, (groups, (c // groups) * h * w), eps)


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------


def cosine_similarity(a: Tensor, b: Tensor, axis: int = 0, eps: float = 1e-12) -> Tensor:
    """Cosine of same-shaped tensors along `axis`; exact 1.0 for parallel vectors."""
    a, b = _wrap(a), _wrap(b)
    dot = reduce_sum(mul(a, b), axis=axis)
    na = sqrt(reduce_sum(mul(a, a), axis=axis))
    nb = sqrt(reduce_sum(mul(b, b), axis=axis))
    return div(dot, clamp(mul(na, nb), min_=eps))


def cosine_pairwise(centers: Tensor, points: Tensor, eps: float = 1e-12) -> Tensor:
    """All-pairs cosine similarity: (d, M) x (d, n) -> (M, n)."""
    centers, points = _wrap(centers), _wrap(points)
    if centers.shape[0] != points.shape[0]:
        raise ShapeError(f"cosine_pairwise: dims {centers.shape} vs {points.shape}")
    nc = sqrt(reduce_sum(mul(centers, centers), axis=0, keepdims=True))
    cn = div(centers, clamp(nc, min_=eps))
    np_ = sqrt(reduce_sum(mul(points, points), axis=0, keepdims=True))
    pn = div(points, clamp(np_, min_=eps))
    return matmul(permute(cn, (1, 0)), pn)


# ---------------------------------------------------------------------------
# convolution (im2col gather + matmul, so gradients reuse tested primitives)
# ---------------------------------------------------------------------------

_IM2COL_CACHE: dict[tuple, np.ndarray] = {}


def _im2col_indices(hp, wp, kh, kw, stride, dilation):
    key = (hp, wp, kh, kw, stride, dilation)
    idx = _IM2COL_CACHE.get(key)
    if idx is None:
        oh = (hp - dilation * (kh - 1) - 1) // stride + 1
        ow = (wp - dilation * (kw - 1) - 1) // stride + 1
        oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
        ky, kx = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
        rows = ky.reshape(-1, 1) * dilation + (oy.reshape(-1) * stride)[None, :]
        cols = kx.reshape(-1, 1) * dilation + (ox.reshape(-1) * stride)[None, :]
        idx = (rows * wp + cols).astype(np.intp)  # (kh*kw, oh*ow)
        _IM2COL_CACHE[key] = idx
    return idx


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    """2-D convolution of (Cin, H, W) with (Cout, Cin/groups, kh, kw)."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, weight {w.shape}")
    cin, _, _ = x.shape
    cout, cin_g, kh, kw = w.shape
    if cin != cin_g * groups or cout % groups:
        raise ShapeError(f"conv2d: {cin} in-channels vs weight {w.shape} with groups={groups}")
    if groups == 1:
        out = _conv2d_single(x, w, stride, padding, dilation)
    else:
        xs = split(x, groups, axis=0)
        ws = split(w, groups, axis=0)
        out = concat([_conv2d_single(xi, wi, stride, padding, dilation) for xi, wi in zip(xs, ws)], axis=0)
    if b is not None:
        out = add(out, reshape(b, (cout, 1, 1)))
    return out


def _conv2d_single(x: Tensor, w: Tensor, stride, padding, dilation):
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = pad2d(x, padding) if padding else x
    hp, wp = h + 2 * padding, wd + 2 * padding
    oh = (hp - dilation * (kh - 1) - 1) // stride + 1
    ow = (wp - dilation * (kw - 1) - 1) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} (dilation {dilation}) exceeds padded input {hp}x{wp}")
    idx = _im2col_indices(hp, wp, kh, kw, stride, dilation)
    cols = gather(reshape(xp, (cin, hp * wp)), idx, axis=1)  # (cin, kh*kw, L)
    cols = reshape(cols, (cin * kh * kw, oh * ow))
    out = matmul(reshape(w, (cout, cin * kh * kw)), cols)
    return reshape(out, (cout, oh, ow))


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """1-D single-channel convolution: (L,) * (k,) -> (L + 2p - k + 1,)."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 1 or w.ndim != 1:
        raise ShapeError(f"conv1d: input {x.shape}, kernel {w.shape}")
    k = w.shape[0]
    xp = pad1d(x, padding) if padding else x
    lp = xp.shape[0]
    lo = lp - k + 1
    if lo <= 0:
        raise ShapeError(f"conv1d: kernel {k} exceeds padded length {lp}")
    idx = np.arange(lo)[:, None] + np.arange(k)[None, :]
    windows = gather(xp, idx, axis=0)  # (lo, k)
    out = matmul(windows, reshape(w, (k, 1)))
    out = reshape(out, (lo,))
    if b is not None:
        out = add(out, b)
    return out


# ---------------------------------------------------------------------------
# op catalog dispatch
# ---------------------------------------------------------------------------

_CATALOG = {
    "add": lambda ins, at: add(*ins),
    "sub": lambda ins, at: sub(*ins),
    "mul": lambda ins, at: mul(*ins),
    "div": lambda ins, at: div(*ins),
    "matmul": lambda ins, at: matmul(*ins),
    "linear": lambda ins, at: linear(*ins),
    "conv2d": lambda ins, at: conv2d(*ins, **at),
    "conv1d": lambda ins, at: conv1d(*ins, **at),
    "sigmoid": lambda ins, at: sigmoid(*ins),
    "relu": lambda ins, at: relu(*ins),
    "gelu": lambda ins, at: gelu(*ins),
    "softmax": lambda ins, at: softmax(*ins, **at),
    "group_norm": lambda ins, at: group_norm(*ins, **at),
    "instance_norm": lambda ins, at: instance_norm(*ins, **at),
    "global_avg_pool": lambda ins, at: global_avg_pool(*ins),
    "avg_pool": lambda ins, at: avg_pool_grid(*ins, **at),
    "upsample_nearest": lambda ins, at: upsample_nearest(*ins, **at),
    "concat": lambda ins, at: concat(ins, **at),
    "split": lambda ins, at: split(*ins, **at),
    "permute": lambda ins, at: permute(*ins, **at),
    "reshape": lambda ins, at: reshape(*ins, **at),
    "gather": lambda ins, at: gather(*ins, **at),
    "scatter_add": lambda ins, at: scatter_add(*ins, **at),
    "cosine_similarity": lambda ins, at: cosine_similarity(*ins, **at),
    "bilinear_sample": lambda ins, at: bilinear_sample(*ins),
    "reduce_sum": lambda ins, at: reduce_sum(*ins, **at),
    "reduce_mean": lambda ins, at: reduce_mean(*ins, **at),
    "reduce_max": lambda ins, at: reduce_max(*ins, **at),
    "clamp": lambda ins, at: clamp(*ins, **at),
    "exp": lambda ins, at: exp(*ins),
    "log": lambda ins, at: log(*ins),
    "sqrt": lambda ins, at: sqrt(*ins),
    "pad2d": lambda ins, at: pad2d(*ins, **at),
    "pad1d": lambda ins, at: pad1d(*ins, **at),
}


def op_catalog() -> tuple[str, ...]:
    return tuple(_CATALOG)


def forward_op(op_kind: str, inputs, attrs: dict | None = None):
    """Dispatch an operation by name; unknown kinds raise :class:`UnknownOpError`."""
    fn = _CATALOG.get(op_kind)
    if fn is None:
        raise UnknownOpError(f"unknown op kind {op_kind!r}")
    return fn(list(inputs), dict(attrs or {}))


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


@dataclass
class FdFailure:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class FdReport:
    max_rel_err: float
    per_param: dict
    failures: list
    n_coords: int

    @property
    def passed(self) -> bool:
        return not self.failures


def finite_diff_check(fn, params, eps: float = 1e-5, tol: float = 1e-4,
                      max_coords: int = 40, seed: int = 0,
                      freeze: bool = True) -> FdReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` evaluates the scalar loss from the current values in ``params``
    (a dict name -> Tensor); it is re-run for every +/- eps perturbation.
    rel_err = |analytic - numeric| / max(1, |analytic|, |numeric|). With
    ``freeze`` set, discrete choices inside ``fn`` are recorded on the first
    evaluation and replayed verbatim afterwards.
    """
    if isinstance(params, (list, tuple)):
        params = {f"p{i}": t for i, t in enumerate(params)}
    rng = Rng(seed, stream=7)

    ctx = frozen_choices() if freeze else nullcontext(None)
    with ctx as tape:
        for t in params.values():
            t.zero_grad()
        loss = fn()
        backward(loss)
        grads = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                 for k, t in params.items()}

        def evaluate():
            if tape is not None:
                tape.rewind(replay=True)
            return fn().item()

        per_param: dict[str, float] = {}
        failures: list[FdFailure] = []
        total = 0
        for name, t in params.items():
            n = t.size
            if n <= max_coords:
                coords = np.arange(n)
            else:
                coords = np.unique(rng.raw(2 * max_coords) % np.uint64(n)).astype(np.intp)[:max_coords]
            worst = 0.0
            flat = t.data.reshape(-1)
            gflat = grads[name].reshape(-1)
            for ci in coords:
                ci = int(ci)
                orig = flat[ci]
                flat[ci] = orig + eps
                f_plus = evaluate()
                flat[ci] = orig - eps
                f_minus = evaluate()
                flat[ci] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                analytic = float(gflat[ci])
                rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
                worst = max(worst, rel)
                if rel > tol:
                    failures.append(FdFailure(name, np.unravel_index(ci, t.shape), analytic, numeric, rel))
                total += 1
            per_param[name] = worst
    max_rel = max(per_param.values()) if per_param else 0.0
    return FdReport(max_rel, per_param, failures, total)
