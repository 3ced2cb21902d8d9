"""Dense tensors with reverse-mode automatic differentiation.

The graph is rebuilt on every forward pass: each op returns a Tensor that
remembers its inputs and a closure mapping the output gradient to input
gradients. `backward()` orders the reachable nodes topologically and runs
the closures in reverse.
"""
import contextlib
import contextvars
import itertools
import logging
from dataclasses import dataclass

import numpy as np

from app.errors import ConfigError, ContractError, NumericError, ShapeError

logger = logging.getLogger(__name__)

_default_dtype = contextvars.ContextVar('default_dtype', default=np.dtype(np.float32))
_grad_enabled = contextvars.ContextVar('grad_enabled', default=True)
_node_ids = itertools.count(1)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype new tensors are created with (float64 for gradient checks)."""
    token = _default_dtype.set(np.dtype(dtype))
    try:
        yield
    finally:
        _default_dtype.reset(token)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them in a graph."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def current_dtype():
    return _default_dtype.get()


class Tensor:
    """A node in the computation graph holding a dense float array."""

    def __init__(self, data, requires_grad=False, name=None, _inputs=(), _op='leaf', _backward=None):
        if _op == 'leaf':
            array = np.array(data, dtype=_default_dtype.get())
        else:
            array = np.asarray(data)
            if array.dtype.kind != 'f':
                array = array.astype(_default_dtype.get())
        self.data = array
        self.grad = None
        self.grad_mask = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node_id = next(_node_ids)
        self._inputs = tuple(_inputs)
        self._op = _op
        self._backward = _backward

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
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ''
        return f'<Tensor shape={self.shape} op={self._op}{label}>'

    # Arithmetic sugar
    def __add__(self, other):
        return op_add(self, other)

    def __radd__(self, other):
        return op_add(other, self)

    def __sub__(self, other):
        return op_sub(self, other)

    def __rsub__(self, other):
        return op_sub(other, self)

    def __mul__(self, other):
        return op_mul(self, other)

    def __rmul__(self, other):
        return op_mul(other, self)

    def __truediv__(self, other):
        return op_div(self, other)

    def __neg__(self):
        return op_neg(self)

    def __matmul__(self, other):
        return op_matmul(self, other)

    def __getitem__(self, index):
        return op_index(self, index)

    def sum(self, axis=None, keepdims=False):
        return op_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return op_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return op_reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return op_transpose(self, axes or None)

    @property
    def T(self):
        return op_transpose(self, None)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A trainable leaf tensor registered with a model."""

    def __init__(self, data, name=None, decay_exempt=False):
        super().__init__(data, requires_grad=True, name=name)
        self.decay_exempt = decay_exempt


def as_tensor(value):
    """Wrap constants so ops can treat every operand uniformly."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(data, inputs, op, backward_fn):
    if _grad_enabled.get() and any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True, _inputs=inputs, _op=op, _backward=backward_fn)
    return Tensor(data, _op=op)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(array, op):
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite values in {op} input")


@dataclass(frozen=True)
class GraphNode:
    op: str
    input_ids: tuple
    output: Tensor


class ComputationGraph:
    """Topologically ordered nodes reachable from one output."""

    def __init__(self, nodes):
        self.nodes = list(nodes)
        self._index = {node.output.node_id: k for k, node in enumerate(self.nodes)}

    @classmethod
    def from_output(cls, root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if tensor.node_id in visited:
                continue
            visited.add(tensor.node_id)
            stack.append((tensor, True))
            for parent in tensor._inputs:
                if parent.requires_grad and parent.node_id not in visited:
                    stack.append((parent, False))
        nodes = [
            GraphNode(t._op, tuple(p.node_id for p in t._inputs if p.requires_grad), t)
            for t in order
        ]
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def validate(self):
        """Check every input of node k was produced by an earlier node."""
        for k, node in enumerate(self.nodes):
            for input_id in node.input_ids:
                position = self._index.get(input_id)
                if position is None or position >= k:
                    raise ContractError(f"graph node {k} ({node.op}) reads node {input_id} out of order")
        return True


def backward(loss, graph=None):
    """
    Fill gradient buffers of every requires_grad tensor reachable from `loss`.

    Gradients accumulate into existing `.grad` buffers; leaves carrying a
    `grad_mask` only receive the masked part.

    Args:
        loss (Tensor): Scalar loss
        graph (ComputationGraph): Optional pre-built graph for `loss`

    Returns:
        ComputationGraph: The graph that was traversed
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = ComputationGraph.from_output(loss)
    if not loss.requires_grad:
        return graph

    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        tensor = node.output
        grad = grads.pop(tensor.node_id, None)
        if grad is None:
            continue
        if tensor.grad_mask is not None:
            grad = grad * tensor.grad_mask
        grad = grad.astype(tensor.data.dtype, copy=False)
        tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
        if tensor.is_leaf:
            continue
        for parent, parent_grad in zip(tensor._inputs, tensor._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            previous = grads.get(parent.node_id)
            grads[parent.node_id] = parent_grad if previous is None else previous + parent_grad
    return graph


# Elementwise and broadcasting ops

def op_add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), 'add', _backward)


def op_sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), 'sub', _backward)


def op_mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), 'mul', _backward)


def op_div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def _backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _make(out, (a, b), 'div', _backward)


def op_neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), 'neg', lambda g: (-g,))


def op_tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), 'tanh', lambda g: (g * (1.0 - out * out),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def op_gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    cubic = x.data + 0.044715 * x.data ** 3
    t = np.tanh(_GELU_C * cubic)
    out = 0.5 * x.data * (1.0 + t)

    def _backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * dt),)

    return _make(out, (x,), 'gelu', _backward)


def op_log(x, floor=1e-12):
    """Natural log with inputs clamped at `floor` (zero gradient below it)."""
    x = as_tensor(x)
    clamped = np.maximum(x.data, floor)
    out = np.log(clamped)

    def _backward(g):
        return (np.where(x.data > floor, g / clamped, 0.0).astype(x.data.dtype),)

    return _make(out, (x,), 'log', _backward)


# Reductions and shape ops

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def op_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), 'sum', _backward)


def op_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return op_sum(x, axis=axes, keepdims=keepdims) * (1.0 / max(count, 1))


def op_reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _make(out, (x,), 'reshape', lambda g: (g.reshape(x.shape),))


def op_transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _make(out, (x,), 'transpose', lambda g: (g.transpose(inverse),))


def op_index(x, index):
    """Basic or advanced indexing; duplicate indices accumulate in backward."""
    x = as_tensor(x)
    out = np.array(x.data[index])

    def _backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (x,), 'index', _backward)


# Linear algebra and normalisation

def op_matmul(a, b):
    """
    Matrix product over the last two axes (leading axes broadcast).

    Args:
        a (Tensor): [..., M, K]
        b (Tensor): [..., K, N]

    Returns:
        Tensor: [..., M, N]
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def _backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if grad_a is None else _unbroadcast(grad_a, a.shape),
            None if grad_b is None else _unbroadcast(grad_b, b.shape),
        )

    return _make(out, (a, b), 'matmul', _backward)


def op_softmax_rows(x):
    """Softmax over the last axis, max-subtracted."""
    x = as_tensor(x)
    _check_finite(x.data, 'softmax')
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), 'softmax', _backward)


def op_log_softmax_rows(x):
    x = as_tensor(x)
    _check_finite(x.data, 'log_softmax')
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - log_norm

    def _backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), 'log_softmax', _backward)


def op_layer_norm(x, gain, bias, eps=1e-5):
    """
    Layer normalisation over the last axis.

    A constant row normalises to zeros before the affine transform.

    Args:
        x (Tensor): [..., d]
        gain (Tensor): [d]
        bias (Tensor): [d]
        eps (float): Variance floor, must be positive

    Returns:
        Tensor: Same shape as x
    """
    if eps <= 0:
        raise ConfigError(f"layer norm eps must be positive, got {eps}", field='eps')
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    constant_rows = np.ptp(x.data, axis=-1, keepdims=True) == 0
    x_hat = np.where(constant_rows, 0.0, x_hat).astype(x.data.dtype)
    out = x_hat * gain.data + bias.data

    def _backward(g):
        d_hat = g * gain.data
        grad_x = inv_std * (
            d_hat
            - d_hat.mean(axis=-1, keepdims=True)
            - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        return (
            grad_x,
            _unbroadcast(g * x_hat, gain.shape),
            _unbroadcast(g, bias.shape),
        )

    return _make(out, (x, gain, bias), 'layer_norm', _backward)


def op_embedding_gather(table, ids):
    """
    Look up rows of `table`; backward scatters into the touched rows only.

    Args:
        table (Tensor): [V, d]
        ids (array-like of int): any shape

    Returns:
        Tensor: ids.shape + (d,)
    """
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    vocab_size = table.shape[0]
    out_of_range = ids[(ids < 0) | (ids >= vocab_size)]
    if out_of_range.size:
        raise IndexError(f"token id {int(out_of_range[0])} out of range [0, {vocab_size})")
    out = table.data[ids]

    def _backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(out, (table,), 'embedding', _backward)


def numerical_gradient(fn, tensor, step=1e-3, indices=None):
    """
    Central finite-difference gradient of scalar `fn()` w.r.t. `tensor.data`.

    Args:
        fn (callable): Zero-argument function returning a scalar Tensor
        tensor (Tensor): Tensor whose entries are perturbed in place
        step (float): Finite-difference step
        indices (list): Flat entry indices to estimate (all when None; others stay 0)

    Returns:
        numpy.ndarray: Estimated gradient, same shape as tensor
    """
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    with no_grad():
        for i in (range(flat.size) if indices is None else indices):
            original = flat[i]
            flat[i] = original + step
            plus = fn().item()
            flat[i] = original - step
            minus = fn().item()
            flat[i] = original
            grad.reshape(-1)[i] = (plus - minus) / (2 * step)
    return grad
