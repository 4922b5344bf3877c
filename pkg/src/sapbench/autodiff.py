"""Dense tensors with reverse-mode automatic differentiation.

The graph is built eagerly: each op returns a :class:`Tensor` that keeps
references to its inputs and a closure computing the input partials.
:func:`backward` walks that graph once in reverse topological order and then
frees it, so a second backward through the same graph raises
:class:`~sapbench.errors.StateError`.

Only one form of broadcasting exists: adding a 1-D bias along axis 1
(features for ``[N, D]``, channels for ``[N, C, H, W]``).
"""

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InputError, NumericError, StateError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32


def get_dtype():
    return _default_dtype


def set_precision(name):
    """Set the process-wide default float type (``"float32"`` or ``"float64"``)."""
    global _default_dtype
    if name in (32, "32"):
        name = "float32"
    elif name in (64, "64"):
        name = "float64"
    try:
        _default_dtype = _DTYPES[name]
    except KeyError:
        raise InputError(f"unknown precision {name!r}") from None


@contextmanager
def precision(name):
    prev = _default_dtype
    set_precision(name)
    try:
        yield
    finally:
        _set_raw(prev)


def _set_raw(dtype):
    global _default_dtype
    _default_dtype = dtype


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.op = None

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

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise InputError("division is only defined by a scalar")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.dtype)


def _result(data, parents, backward_fn, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op
    return out


def _result_dtype(*arrays):
    return np.result_type(*arrays)


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b):
    """``a + b`` for equal shapes, or a 1-D ``b`` broadcast along axis 1 of ``a``."""
    b = _as_tensor(b, a)
    a = _as_tensor(a, b)
    if a.shape == b.shape:
        bias_axes = None
    elif b.ndim == 0:
        bias_axes = tuple(range(a.ndim))
    elif b.ndim == 1 and a.ndim >= 2 and a.shape[1] == b.shape[0]:
        bias_axes = tuple(i for i in range(a.ndim) if i != 1)
    else:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")
    if bias_axes is None or b.ndim == 0:
        out = a.data + b.data
    else:
        view = [1] * a.ndim
        view[1] = b.shape[0]
        out = a.data + b.data.reshape(view)

    def _bw(g):
        gb = g if bias_axes is None else g.sum(axis=bias_axes)
        return g, gb

    return _result(out, (a, b), _bw, "add")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    """Elementwise product of equal-shape tensors, or scaling by a scalar."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = b

        return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def tsum(a):
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a):
    shape, n = a.shape, a.size
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def reshape(a, shape):
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _result(out, (a,), lambda g: (g.reshape(orig),), "reshape")


def flatten(a):
    """Collapse all axes after the first."""
    return reshape(a, (a.shape[0], -1))


def relu(a):
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# linear ops


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def conv2d_output_size(h, w, kh, kw, stride, padding):
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def conv2d(x, kernel, stride=1, padding=0):
    """2-D cross-correlation of ``[N, C, H, W]`` input with ``[F, C, Kh, Kw]`` kernels."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D operands, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise InputError("stride must be positive and padding non-negative")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"kernel expects {kc} channels, input has {c}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})")
    ho, wo = conv2d_output_size(h, w, kh, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [N, Ho, Wo, C, Kh, Kw] rows
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(f, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    padded_shape = xp.shape

    def _bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gk = (g2.T @ cols).reshape(kernel.shape)
        if not x.requires_grad:
            return None, gk
        gcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return _result(np.ascontiguousarray(out), (x, kernel), _bw, "conv2d")


def avgpool2d(x, size=2):
    """Non-overlapping average pooling; trailing rows/columns that do not fill a window are dropped."""
    if x.ndim != 4:
        raise DimensionError(f"avgpool2d expects a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise DimensionError(f"pool window {size} larger than input {h}x{w}")
    crop = x.data[:, :, :ho * size, :wo * size]
    out = crop.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))
    scale = 1.0 / (size * size)

    def _bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        spread = np.repeat(np.repeat(g * scale, size, axis=2), size, axis=3)
        gx[:, :, :ho * size, :wo * size] = spread
        return (gx,)

    return _result(out, (x,), _bw, "avgpool2d")


# ---------------------------------------------------------------------------
# loss


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [N, C], got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = int(np.flatnonzero((labels < 0) | (labels >= c))[0])
        raise InputError(f"label {labels[bad]} at index {bad} outside [0, {c})")
    labels = labels.astype(np.intp)
    lsm = log_softmax(logits.data)
    rows = np.arange(n)
    loss = np.asarray(-lsm[rows, labels].mean(), dtype=logits.dtype)

    def _bw(g):
        p = np.exp(lsm)
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _result(loss, (logits,), _bw, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# backward


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Fill ``.grad`` of every grad-requiring tensor reachable from scalar ``loss``.

    Leaf gradients accumulate across calls; the graph behind ``loss`` is
    released afterwards.
    """
    if loss._consumed:
        raise StateError("graph already consumed by a previous backward pass")
    if not loss.requires_grad:
        raise StateError("loss does not depend on any tensor requiring grad")
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")

    order = _toposort(loss)
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._consumed = True
