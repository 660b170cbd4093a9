"""Dense float64 tensors with a minimal reverse-mode differentiation engine.

Operations record themselves in the active `Graph` when any operand belongs
to it; outside a `Graph.record()` block they only compute values. Only the
operations the layout pipeline needs are provided, and broadcasting is
limited to tensor-scalar arithmetic: every other alignment goes through an
explicit operation such as `broadcast_to`.
"""

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .common import NonFiniteError

__all__ = [
    'Tensor', 'Graph', 'Gradients', 'GradCheck', 'tensor', 'as_tensor',
    'add', 'sub', 'mul', 'div', 'scale', 'add_scalar', 'matmul', 'transpose',
    'reshape', 'broadcast_to', 'take', 'stack', 'conv2d', 'relu', 'hinge',
    'square', 'l2_normalize', 'cosine_similarity', 'softmax', 'sum_', 'mean',
    'masked_mean', 'backward', 'grad_check',
]

_log = logging.getLogger(__name__)

NORM_EPS = 1e-12
COSINE_EPS = 1e-8

Scalar = Union[int, float, np.integer, np.floating]
Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_active: ContextVar[Optional['Graph']] = ContextVar('active_graph', default=None)


def _is_scalar(value) -> bool:
    return (isinstance(value, (int, float, np.integer, np.floating))
            and not isinstance(value, bool))


@dataclass
class _Node:
    """An operation record; `parents` holds node indices or None for constants."""
    op: str
    parents: tuple
    vjp: Optional[Vjp] = None


class Graph:
    """Records operations for a single backward pass.

    Nodes are appended as operations execute, so the append order is a
    topological order. Not thread safe; build one graph per thread.
    """
    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray] = []
        self.kinks: int = 0

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def order(self) -> range:
        """Node indices in topological order (parents first)."""
        return range(len(self.nodes))

    @contextmanager
    def record(self) -> Iterator['Graph']:
        """Make this the active graph within the context."""
        token = _active.set(self)
        try:
            yield self
        finally:
            _active.reset(token)

    def leaf(self, data) -> 'Tensor':
        """Register a differentiable input."""
        value = np.array(data.data if isinstance(data, Tensor) else data,
                         dtype=np.float64)
        _check_finite('leaf', value)
        return Tensor._wrap(value, self, self._append('leaf', value, (), None))

    def _append(self, op: str, value: np.ndarray, parents: tuple,
                vjp: Optional[Vjp]) -> int:
        self.nodes.append(_Node(op, parents, vjp))
        self.values.append(value)
        return len(self.nodes) - 1


class Tensor:
    """An immutable float64 array, optionally attached to a `Graph` node."""
    __slots__ = ('_data', '_graph', '_node')
    __array_ufunc__ = None   # defer numpy scalar operators to Tensor

    def __init__(self, data) -> None:
        value = np.array(data, dtype=np.float64)
        _check_finite('tensor', value)
        value.setflags(write=False)
        self._data = value
        self._graph: Optional[Graph] = None
        self._node: Optional[int] = None

    @classmethod
    def _wrap(cls, value: np.ndarray, graph: Optional[Graph] = None,
              node: Optional[int] = None) -> 'Tensor':
        obj = cls.__new__(cls)
        value.setflags(write=False)
        obj._data = value
        obj._graph = graph
        obj._node = node
        return obj

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the values."""
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def tracked(self) -> bool:
        return self._graph is not None

    @property
    def T(self) -> 'Tensor':
        return transpose(self)

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ValueError('Only single-element tensors convert to float')
        return float(self._data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f', node={self._node}' if self._graph is not None else ''
        return f'Tensor(shape={self.shape}{tag})'

    def __add__(self, other):
        if _is_scalar(other):
            return add_scalar(self, other)
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if _is_scalar(other):
            return add_scalar(self, -other)
        return sub(self, other)

    def __rsub__(self, other):
        if _is_scalar(other):
            return add_scalar(scale(self, -1.0), other)
        return sub(other, self)

    def __mul__(self, other):
        if _is_scalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if _is_scalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data) -> Tensor:
    """Create an untracked (constant) tensor from a copy of `data`."""
    return Tensor(data)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(op: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f'{op} produced non-finite values')


def _result(op: str, value: np.ndarray, operands: Sequence[Tensor],
            vjp: Vjp) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    _check_finite(op, value)
    graph = _active.get()
    if graph is not None:
        parents = tuple(t._node if t._graph is graph else None
                        for t in operands)
        if any(p is not None for p in parents):
            return Tensor._wrap(value, graph,
                                graph._append(op, value, parents, vjp))
    return Tensor._wrap(value)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f'{op}: shape mismatch {a.shape} vs {b.shape}')


# Elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape('add', a, b)
    return _result('add', a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape('sub', a, b)
    return _result('sub', a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape('mul', a, b)
    av, bv = a.data, b.data
    return _result('mul', av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape('div', a, b)
    av, bv = a.data, b.data
    if np.any(bv == 0):
        raise NonFiniteError('div: division by zero')
    return _result('div', av / bv, (a, b),
                   lambda g: (g / bv, -g * av / (bv * bv)))


def scale(a, factor: Scalar) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _result('scale', a.data * factor, (a,), lambda g: (g * factor,))


def add_scalar(a, value: Scalar) -> Tensor:
    a = as_tensor(a)
    return _result('add_scalar', a.data + float(value), (a,), lambda g: (g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _result('square', av * av, (a,), lambda g: (2.0 * av * g,))


def relu(a) -> Tensor:
    """Clamp at zero; the subgradient at exactly zero is 0."""
    a = as_tensor(a)
    av = a.data
    graph = _active.get()
    if graph is not None and a._graph is graph:
        graph.kinks += int(np.count_nonzero(av == 0))
    active = (av > 0).astype(np.float64)
    return _result('relu', av * active, (a,), lambda g: (g * active,))


hinge = relu


# Linear algebra and shape

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f'matmul: shape mismatch {a.shape} @ {b.shape}')
    av, bv = a.data, b.data
    return _result('matmul', av @ bv, (a, b),
                   lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError('transpose expects a matrix')
    return _result('transpose', a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ValueError(f'reshape: cannot view {a.shape} as {shape}')
    source = a.shape
    return _result('reshape', a.data.reshape(shape), (a,),
                   lambda g: (g.reshape(source),))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    """Repeat `a` over new leading axes; `a.shape` must equal the trailing axes."""
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    lead = len(shape) - a.ndim
    if lead < 0 or shape[lead:] != a.shape:
        raise ValueError(f'broadcast_to: {a.shape} is not a suffix of {shape}')
    axes = tuple(range(lead))
    value = np.broadcast_to(a.data, shape).copy()
    return _result('broadcast_to', value, (a,), lambda g: (g.sum(axis=axes),))


def take(a, index) -> Tensor:
    """Gather rows (axis 0) of `a`; indices may repeat."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError('take expects a 1-D index')
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError('take: index out of range')
    source = a.shape

    def vjp(g):
        out = np.zeros(source)
        np.add.at(out, idx, g)
        return (out,)

    return _result('take', a.data[idx], (a,), vjp)


def stack(tensors: Sequence) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    items = [as_tensor(t) for t in tensors]
    if not items:
        raise ValueError('stack needs at least one tensor')
    for t in items[1:]:
        _same_shape('stack', items[0], t)
    return _result('stack', np.stack([t.data for t in items]), items,
                   lambda g: tuple(g[i] for i in range(len(items))))


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    height, width, channels = x.shape
    xp = np.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))   # H, W, C, kh, kw
    return win.transpose(0, 1, 3, 4, 2).reshape(height * width,
                                                  kh * kw * channels)


def conv2d(x, kernel, bias=None) -> Tensor:
    """Stride-1, zero-padded 2D cross-correlation of an H×W×C grid.

    Args:
        x: Input of shape (H, W, C_in).
        kernel: Weights of shape (kh, kw, C_in, C_out) with odd extents.
        bias: Optional (C_out,) bias.

    Returns:
        Output of shape (H, W, C_out).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[2] != x.shape[2]:
        raise ValueError(f'conv2d: shape mismatch {x.shape} * {kernel.shape}')
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError('conv2d: kernel extents must be odd')
    height, width, _ = x.shape
    cols = _im2col(x.data, kh, kw)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = cols @ kmat
    operands = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f'conv2d: bias shape {bias.shape} != ({cout},)')
        out = out + bias.data
        operands.append(bias)
    ph, pw = kh // 2, kw // 2

    def vjp(g):
        g2 = g.reshape(height * width, cout)
        gk = (cols.T @ g2).reshape(kernel.shape)
        gcols = (g2 @ kmat.T).reshape(height, width, kh, kw, cin)
        gxp = np.zeros((height + 2 * ph, width + 2 * pw, cin))
        for dy in range(kh):
            for dx in range(kw):
                gxp[dy:dy + height, dx:dx + width] += gcols[:, :, dy, dx, :]
        grads = [gxp[ph:ph + height, pw:pw + width], gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result('conv2d', out.reshape(height, width, cout), operands, vjp)


# Normalization and similarity (last axis)

def l2_normalize(a, eps: float = NORM_EPS) -> Tensor:
    """Scale each last-axis vector to unit norm; norms are floored at `eps`."""
    a = as_tensor(a)
    av = a.data
    raw = np.linalg.norm(av, axis=-1, keepdims=True)
    norm = np.maximum(raw, eps)
    active = raw > eps
    y = av / norm

    def vjp(g):
        proj = np.where(active, np.sum(y * g, axis=-1, keepdims=True) * y, 0.0)
        return ((g - proj) / norm,)

    return _result('l2_normalize', y, (a,), vjp)


def cosine_similarity(a, b, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity of paired last-axis vectors; norms floored at `eps`."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape('cosine_similarity', a, b)
    av, bv = a.data, b.data
    ra = np.linalg.norm(av, axis=-1, keepdims=True)
    rb = np.linalg.norm(bv, axis=-1, keepdims=True)
    na, nb = np.maximum(ra, eps), np.maximum(rb, eps)
    c = np.sum(av * bv, axis=-1, keepdims=True) / (na * nb)

    def vjp(g):
        gk = g[..., None]
        ga = bv / (na * nb) - np.where(ra > eps, c * av / (na * na), 0.0)
        gb = av / (na * nb) - np.where(rb > eps, c * bv / (nb * nb), 0.0)
        return (gk * ga, gk * gb)

    return _result('cosine_similarity', c[..., 0], (a, b), vjp)


def softmax(a, tau: float = 1.0, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax of `a / tau` along the last axis.

    Args:
        a: Logits.
        tau: Positive temperature.
        mask: Optional boolean array shaped like `a`; False entries are
            excluded (probability 0). Every row needs a True entry.
    """
    a = as_tensor(a)
    if tau <= 0:
        raise ValueError('softmax: temperature must be positive')
    z = a.data / tau
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ValueError('softmax: mask shape mismatch')
        if not np.all(mask.any(axis=-1)):
            raise ValueError('softmax: a row is fully masked')
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)) / tau,)

    return _result('softmax', p, (a,), vjp)


# Reductions

def sum_(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    source = a.shape
    if axis is None:
        return _result('sum', np.asarray(a.data.sum()), (a,),
                       lambda g: (np.full(source, float(g)),))
    ax = axis % a.ndim

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, ax), source).copy(),)

    return _result('sum', a.data.sum(axis=ax), (a,), vjp)


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ValueError('mean of an empty tensor')
    return scale(sum_(a, axis), 1.0 / count)


def masked_mean(a, mask: np.ndarray, axis: Optional[int] = None) -> Tensor:
    """Mean over masked entries.

    With `axis=None` the mask has the shape of `a` and the result is a
    scalar. With `axis=0` the mask selects rows and the result keeps the
    remaining axes.
    """
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if axis is None:
        if mask.shape != a.shape:
            raise ValueError('masked_mean: mask shape mismatch')
    elif axis == 0:
        if mask.shape != (a.shape[0],):
            raise ValueError('masked_mean: row mask length mismatch')
    else:
        raise ValueError('masked_mean supports axis None or 0')
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise ValueError('masked_mean: empty mask')
    source = a.shape
    if axis is None:
        weight = mask / count
        return _result('masked_mean', np.asarray(np.sum(a.data[mask]) / count),
                       (a,), lambda g: (weight * float(g),))

    def vjp(g):
        out = np.zeros(source)
        out[mask] = g / count
        return (out,)

    return _result('masked_mean', a.data[mask].sum(axis=0) / count, (a,), vjp)


# Backward pass and gradient checking

class Gradients:
    """Per-node gradient buffers of one backward pass."""
    def __init__(self, graph: Graph, buffers: list[np.ndarray]) -> None:
        self._graph = graph
        self._buffers = buffers

    def __len__(self) -> int:
        return len(self._buffers)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t._graph is not self._graph or t._node is None:
            raise KeyError('Tensor is not part of this graph')
        return self._buffers[t._node]

    def node(self, index: int) -> np.ndarray:
        return self._buffers[index]

    def leaves(self) -> dict[int, np.ndarray]:
        return {i: self._buffers[i] for i, n in enumerate(self._graph.nodes)
                if n.op == 'leaf'}


def backward(graph: Graph, root: Tensor) -> Gradients:
    """Reverse-mode pass from a scalar root.

    Returns:
        Gradients with one buffer per node shaped like its value; nodes the
            root does not depend on keep zero gradients.
    """
    if root._graph is not graph or root._node is None:
        raise ValueError('Root is not recorded in this graph')
    if root.size != 1:
        raise ValueError('Backward requires a scalar root')
    pending: list[Optional[np.ndarray]] = [None] * len(graph)
    pending[root._node] = np.ones(root.shape)
    for i in reversed(range(root._node + 1)):
        g = pending[i]
        node = graph.nodes[i]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None or pg is None:
                continue
            if pending[parent] is None:
                pending[parent] = np.array(pg, dtype=np.float64)
            else:
                pending[parent] = pending[parent] + pg
    buffers = [p if p is not None else np.zeros(v.shape)
               for p, v in zip(pending, graph.values)]
    return Gradients(graph, buffers)


@dataclass
class GradCheck:
    """Outcome of a finite-difference gradient check.

    Attributes:
        max_rel_error: Largest per-coordinate relative error.
        non_smooth: True if a hinge was evaluated exactly at its kink.
    """
    max_rel_error: float
    non_smooth: bool = False


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
               rel_floor: float = 1e-3) -> GradCheck:
    """Compare the analytic gradient of scalar `f` at `x` to central differences.

    The relative error of a coordinate is
    `|analytic - numeric| / max(floor, |analytic| + |numeric|)`, with the
    floor at `rel_floor` times the largest gradient magnitude (and no lower
    than 1e-8). Coordinates far below the gradient scale are then measured
    against that scale instead of against their own rounding noise.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    graph = Graph()
    with graph.record():
        leaf = graph.leaf(base)
        out = f(leaf)
    if out.size != 1:
        raise ValueError('grad_check requires a scalar function')
    analytic = backward(graph, out)[leaf] if out._graph is graph \
        else np.zeros(base.shape)
    numeric = np.empty(base.size)
    flat = base.ravel()
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += eps
        minus[i] -= eps
        fp = f(tensor(plus.reshape(base.shape))).item()
        fm = f(tensor(minus.reshape(base.shape))).item()
        numeric[i] = (fp - fm) / (2.0 * eps)
    a = analytic.ravel()
    scale = max(float(np.abs(a).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)))
    floor = max(1e-8, rel_floor * scale)
    rel = np.abs(a - numeric) / np.maximum(floor, np.abs(a) + np.abs(numeric))
    result = GradCheck(float(rel.max()) if rel.size else 0.0, graph.kinks > 0)
    if result.non_smooth:
        _log.debug('Gradient check passed through %d kink(s)', graph.kinks)
    return result
