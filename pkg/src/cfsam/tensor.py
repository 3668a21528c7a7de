"""Dense tensor engine with reverse-mode automatic differentiation.

A ``Tensor`` wraps a contiguous numpy array (float32 or float64) and,
when gradient tracking is requested, participates in a define-by-run
graph. Each operation records its parents and a backward closure;
``backward(loss)`` replays the recorded graph in reverse topological
order and accumulates gradients into every tracked leaf.

The op set is exactly what the attention module needs: conv2d, matmul,
softmax, layer_norm, relu, concat/slice/reshape/transpose glue, strided
gather (``take``), and align-corners linear interpolation along a
sequence axis. Every op validates shapes and rejects non-finite results.
"""

from __future__ import annotations

import math

import numpy as np

from cfsam import backend

DTYPES = {"f32": np.float32, "f64": np.float64}


class TensorError(ValueError):
    """Shape or domain violation in a tensor operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _tracked(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data: np.ndarray, op: str, parents, backward) -> Tensor:
    _check_finite(data, op)
    if _tracked(*parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# -- elementwise and reductions ---------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        out = a.data + b

        def bwd(g):
            _accum(a, g)

        return _make(out, "add", (a,), bwd)
    if a.shape != b.shape:
        raise TensorError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make(out, "add", (a, b), bwd)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        out = a.data * s

        def bwd(g):
            _accum(a, g * s)

        return _make(out, "mul", (a,), bwd)
    if a.shape != b.shape:
        raise TensorError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data * b.data

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(out, "mul", (a, b), bwd)


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-C vector to every row of an ...×C tensor."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise TensorError(f"add_rowvec: {x.shape} vs {b.shape}")
    out = x.data + b.data

    def bwd(g):
        _accum(x, g)
        _accum(b, g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(out, "add_rowvec", (x, b), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=x.dtype))

    def bwd(g):
        _accum(x, np.full_like(x.data, g))

    return _make(out, "sum_all", (x,), bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g):
        _accum(x, g * (x.data > 0))

    return _make(out, "relu", (x,), bwd)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise TensorError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul: inner dims {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out, "matmul", (a, b), bwd)


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise TensorError("transpose2d expects a 2-D tensor")
    out = np.ascontiguousarray(x.data.T)

    def bwd(g):
        _accum(x, g.T)

    return _make(out, "transpose2d", (x,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(x, out * (g - dot))

    return _make(out, "softmax", (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale/shift per channel."""
    C = x.shape[-1]
    if C < 1:
        raise TensorError("layer_norm: empty channel axis")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise TensorError("layer_norm: gamma/beta must be length-C vectors")
    if eps <= 0:
        raise TensorError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def bwd(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))
        _accum(gamma, (g * xhat).reshape(-1, C).sum(axis=0))
        _accum(beta, g.reshape(-1, C).sum(axis=0))

    return _make(out, "layer_norm", (x, gamma, beta), bwd)


# -- shape glue --------------------------------------------------------------


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise TensorError("concat of zero tensors")
    ndim = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim:
            raise TensorError("concat: rank mismatch")
        for ax in range(ndim):
            if ax != axis % ndim and t.shape[ax] != tensors[0].shape[ax]:
                raise TensorError(f"concat: non-concat dim mismatch on axis {ax}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * ndim
            idx[axis % ndim] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(out, "concat", tuple(tensors), bwd)


def slice_axis(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    n = x.shape[axis]
    if start < 0 or length < 0 or start + length > n:
        raise TensorError(f"slice: [{start}:{start + length}] out of range for axis size {n}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])

    def bwd(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accum(x, full)

    return _make(out, "slice", (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != x.size:
        raise TensorError(f"reshape: cannot view {x.shape} as {shape}")
    out = x.data.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(x.shape))

    return _make(out, "reshape", (x,), bwd)


def take(x: Tensor, axis: int, indices) -> Tensor:
    """Gather along one axis; backward scatter-adds into the source."""
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, indices, axis=axis)

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (slice(None),) * axis + (indices,), g)
        _accum(x, full)

    return _make(out, "take", (x,), bwd)


# -- interpolation -----------------------------------------------------------


def interp_matrix(lin: int, lout: int, dtype) -> np.ndarray:
    """Align-corners linear interpolation operator, shape (lout, lin)."""
    if lin < 1 or lout < 1:
        raise TensorError("interp: lengths must be positive")
    M = np.zeros((lout, lin), dtype=dtype)
    if lin == 1:
        M[:, 0] = 1.0
        return M
    if lout == 1:
        M[0, 0] = 1.0
        return M
    for i in range(lout):
        pos = i * (lin - 1) / (lout - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, lin - 1)
        frac = pos - lo
        M[i, lo] += 1.0 - frac
        if hi != lo:
            M[i, hi] += frac
    return M


def interp_linear_1d(x: Tensor, lout: int) -> Tensor:
    """Per-channel align-corners linear resampling of a C×Lin tensor."""
    if x.data.ndim != 2:
        raise TensorError("interp_linear_1d expects a C×L tensor")
    lin = x.shape[1]
    if lout == lin:
        # exact identity, no resampling arithmetic
        out = x.data.copy()

        def bwd_id(g):
            _accum(x, g)

        return _make(out, "interp_linear_1d", (x,), bwd_id)
    M = interp_matrix(lin, lout, x.dtype)
    out = x.data @ M.T

    def bwd(g):
        _accum(x, g @ M)

    return _make(out, "interp_linear_1d", (x,), bwd)


# -- convolution -------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0, stride: int = 1) -> Tensor:
    """2-D convolution on an H×W×Cin map with a k×k×Cin×Cout kernel."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise TensorError("conv2d expects H×W×Cin input and k×k×Cin×Cout kernel")
    k = kernel.shape[0]
    if kernel.shape[1] != k:
        raise TensorError("conv2d: kernel must be square")
    if kernel.shape[2] != x.shape[2]:
        raise TensorError(
            f"conv2d: input channels {x.shape[2]} != kernel Cin {kernel.shape[2]}"
        )
    if bias.shape != (kernel.shape[3],):
        raise TensorError("conv2d: bias length must equal Cout")
    H, W, _ = x.shape
    if (H + 2 * padding - k) < 0 or (W + 2 * padding - k) < 0:
        raise TensorError("conv2d: kernel larger than padded input")
    if stride < 1 or padding < 0:
        raise TensorError("conv2d: invalid stride/padding")
    out = backend.conv2d_forward(x.data, kernel.data, bias.data, padding, stride)

    def bwd(g):
        dx, dw, db = backend.conv2d_backward(x.data, kernel.data, g, padding, stride)
        _accum(x, dx)
        _accum(kernel, dw)
        _accum(bias, db)

    return _make(out, "conv2d", (x, kernel, bias), bwd)


# -- backward pass -----------------------------------------------------------


def _consumed_marker(_):
    raise TensorError("backward already ran through this node")


_CONSUMED = _consumed_marker


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Visits the recorded graph in reverse topological order exactly once
    and leaves gradients in ``.grad`` of every reachable tracked tensor.
    """
    if loss.size != 1:
        raise TensorError("backward requires a scalar loss")
    if loss._backward is _CONSUMED:
        raise TensorError("backward already ran for this loss; rebuild the graph")
    if loss._backward is None and not loss._parents:
        if loss.requires_grad:
            _accum(loss, np.ones_like(loss.data))
            return
        raise TensorError("backward called on a tensor with no recorded graph")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    _accum(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node._backward is not _CONSUMED:
            node._backward(node.grad)
            node._backward = _CONSUMED  # release closures and guard double backward


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()
