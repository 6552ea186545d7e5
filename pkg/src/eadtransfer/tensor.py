"""Dense tensors with tape-based reverse-mode differentiation.

Every operation in this module returns a new immutable :class:`Tensor`.  When a
:class:`GradientTape` is active and one of the inputs is tracked by it, the
operation is recorded together with its vector-Jacobian product so that
:func:`backward` can later push gradients from a scalar loss back to the
tracked tensors.

Arrays are stored row-major.  Convolutions use the cross-correlation
convention (no kernel flip).  Apart from :func:`add_bias` there is no
broadcasting: mismatched shapes raise :class:`DimensionError`.

Batched variants are accepted where it keeps the attack and training loops
vectorised: ``conv2d`` and ``maxpool2d`` take either ``C x H x W`` or
``N x C x H x W`` input, ``softmax_cross_entropy`` takes ``K`` logits or an
``N x K`` batch.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Operation parameters do not describe a valid computation."""


class TapeError(RuntimeError):
    """The tape was used incorrectly (e.g. the loss was not recorded on it)."""


class Tensor:
    """Immutable n-dimensional real array.

    ``data`` is a read-only numpy array.  ``requires_grad`` marks leaves that
    a tape should track without an explicit :meth:`GradientTape.watch`.
    """

    __slots__ = ("data", "requires_grad", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and not (isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating)):
            dtype = DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"all dimensions must be positive, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr):
        # internal fast path: takes ownership of a freshly computed array
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        """Return a writable copy of the underlying array."""
        return self.data.copy()

    def item(self):
        return self.data.item()

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})\n{self.data!r}"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# tape


_state = threading.local()


def _active_tapes():
    return getattr(_state, "tapes", ())


class _Node:
    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output, inputs, vjp):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class GradientTape:
    """Ordered record of the primitive operations run while it is active.

    Use as a context manager::

        with GradientTape() as tape:
            tape.watch(x)
            loss = tensor_sum(relu(x))
        grads = backward(tape, loss)

    Tapes are thread-local; several threads may record on separate tapes over
    shared read-only parameters.
    """

    def __init__(self):
        self.nodes = []
        self._tracked = set()
        self._leaves = []

    def watch(self, *tensors):
        for t in tensors:
            if id(t) not in self._tracked:
                self._tracked.add(id(t))
                self._leaves.append(t)

    def is_tracked(self, t):
        return id(t) in self._tracked

    @property
    def watched(self):
        return list(self._leaves)

    def _record(self, output, inputs, vjp):
        needs = tuple(self._tracks(t) for t in inputs)
        if not any(needs):
            return
        self._tracked.add(id(output))
        self.nodes.append(_Node(output, inputs, vjp))

    def _tracks(self, t):
        if id(t) in self._tracked:
            return True
        if t.requires_grad:
            self.watch(t)
            return True
        return False

    def __enter__(self):
        _state.tapes = _active_tapes() + (self,)
        return self

    def __exit__(self, *exc):
        tapes = list(_active_tapes())
        tapes.remove(self)
        _state.tapes = tuple(tapes)
        return False

    def gradient(self, loss, sources):
        """Gradients of ``loss`` with respect to each tensor in ``sources``."""
        grads = backward(self, loss)
        return [grads[s] if s in grads else Tensor._wrap(np.zeros_like(s.data)) for s in sources]


def backward(tape, loss):
    """Reverse sweep over ``tape`` from the scalar ``loss``.

    Returns a dict mapping every watched leaf tensor to its gradient.  Leaves
    that did not influence the loss get a zero tensor of matching shape.
    """
    if loss.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.is_tracked(loss):
        raise TapeError("loss was not produced under this tape")

    acc = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = acc.pop(id(node.output), None)
        if g is None:
            continue
        needs = tuple(tape.is_tracked(t) for t in node.inputs)
        in_grads = node.vjp(g, needs)
        for t, need, gi in zip(node.inputs, needs, in_grads):
            if not need or gi is None:
                continue
            key = id(t)
            if key in acc:
                acc[key] = acc[key] + gi
            else:
                acc[key] = gi

    out = {}
    for leaf in tape.watched:
        g = acc.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        out[leaf] = Tensor._wrap(np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape))
    return out


def apply_op(data, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` as the output of a primitive and record it on active tapes.

    ``vjp(grad_out, needs)`` must return one array (or None) per input; the
    ``needs`` flags say which input gradients are actually wanted.
    """
    out = Tensor._wrap(data)
    for tape in _active_tapes():
        tape._record(out, tuple(inputs), vjp)
    return out


def _result_dtype(*ts):
    return np.result_type(*[t.data.dtype for t in ts])


def _check_same_shape(opname, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _coerce_pair(a, b)
    if a.size == 1 and b.size != 1 or b.size == 1 and a.size != 1:
        return _add_scalar(a, b)
    _check_same_shape("add", a, b)
    return apply_op(a.data + b.data, (a, b), lambda g, n: (g, g))


def _add_scalar(a, b):
    big, small = (a, b) if b.size == 1 else (b, a)
    out = big.data + small.data.reshape(())

    def vjp(g, needs):
        gb = g
        gs = np.asarray(g.sum(dtype=np.float64), dtype=small.dtype).reshape(small.shape)
        return (gb, gs) if big is a else (gs, gb)

    return apply_op(out.astype(big.dtype, copy=False), (a, b), vjp)


def sub(a, b):
    a, b = _coerce_pair(a, b)
    return add(a, mul(b, -1.0))


def mul(a, b):
    """Elementwise product; either operand may be a Python scalar."""
    if not isinstance(b, Tensor):
        s = float(b)
        return apply_op(a.data * a.data.dtype.type(s), (a,), lambda g, n: (g * s,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_same_shape("mul", a, b)
    return apply_op(a.data * b.data, (a, b), lambda g, n: (g * b.data if n[0] else None, g * a.data if n[1] else None))


def _coerce_pair(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def square(a):
    return apply_op(a.data * a.data, (a,), lambda g, n: (2.0 * g * a.data,))


def relu(a):
    mask = a.data > 0
    return apply_op(a.data * mask, (a,), lambda g, n: (g * mask,))


def tensor_sum(a, axis=None):
    """Sum with 64-bit accumulation; result keeps the input dtype."""
    out = np.asarray(a.data.sum(axis=axis, dtype=np.float64), dtype=a.dtype)

    def vjp(g, needs):
        if axis is None:
            return (np.full(a.shape, g.reshape(()), dtype=a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype),)

    return apply_op(out, (a,), vjp)


def mean(a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    return mul(tensor_sum(a, axis=axis), 1.0 / n)


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return apply_op(out, (a,), lambda g, n: (g.reshape(a.shape),))


def flatten(a):
    """Collapse all but the leading (batch) axis."""
    return reshape(a, (a.shape[0], -1))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product of ``m x k`` and ``k x n`` tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def vjp(g, needs):
        ga = g @ b.data.T if needs[0] else None
        gb = a.data.T @ g if needs[1] else None
        return ga, gb

    return apply_op(a.data @ b.data, (a, b), vjp)


def add_bias(x, bias):
    """Add a per-feature bias along axis 1 (the only broadcast allowed)."""
    if bias.ndim != 1 or x.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    red = (0,) + tuple(range(2, x.ndim))

    def vjp(g, needs):
        gb = g.sum(axis=red, dtype=np.float64).astype(bias.dtype) if needs[1] else None
        return g, gb

    return apply_op(x.data + bias.data.reshape(view), (x, bias), vjp)


# ---------------------------------------------------------------------------
# convolution and pooling


def conv_output_size(size, k, stride, padding):
    span = size + 2 * padding - k
    if span < 0:
        raise ConfigurationError(f"kernel {k} larger than padded input {size + 2 * padding}")
    if span % stride:
        raise ConfigurationError(
            f"output size ({size} + 2*{padding} - {k})/{stride} + 1 is not an integer"
        )
    return span // stride + 1


def _im2col(xp, kh, kw, stride, ho, wo):
    """``N x C x Hp x Wp`` -> ``N x (C*kh*kw) x (ho*wo)`` patch matrix."""
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def _correlate(xd, kernel, stride, padding):
    n, c, h, w = xd.shape
    co, _, kh, kw = kernel.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = np.matmul(kernel.reshape(co, -1), cols).reshape(n, co, ho, wo)
    return out, cols


def conv2d(x, kernel, stride=1, padding=0):
    """2-D cross-correlation.

    ``x`` is ``C_in x H x W`` or ``N x C_in x H x W``; ``kernel`` is
    ``C_out x C_in x kH x kW``.  Output spatial size is
    ``(H + 2*padding - kH) / stride + 1`` and must be integral.
    """
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernel.ndim != 4 or xd.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    n, c, h, w = xd.shape
    co, _, kh, kw = kernel.shape
    out, cols = _correlate(xd, kernel.data, stride, padding)
    ho, wo = out.shape[2:]

    def vjp(g, needs):
        g4 = g[None] if single else g
        gk = gx = None
        if needs[1]:
            gm = g4.reshape(n, co, ho * wo)
            gk = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        if needs[0]:
            # col2im with the batch axis innermost, so each of the kh*kw
            # shifted accumulations walks contiguous memory
            gt = np.ascontiguousarray(g4.transpose(1, 2, 3, 0)).reshape(co, -1)
            dcols = (kernel.data.reshape(co, -1).T @ gt).reshape(c, kh, kw, ho, wo, n)
            hp, wp = h + 2 * padding, w + 2 * padding
            dxp = np.zeros((c, hp, wp, n), dtype=dcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += dcols[:, i, j]
            dxp = np.ascontiguousarray(dxp[:, padding : padding + h, padding : padding + w].transpose(3, 0, 1, 2))
            gx = dxp[0] if single else dxp
        return gx, gk

    return apply_op(out[0] if single else out, (x, kernel), vjp)


def maxpool2d(x, size=2):
    """Non-overlapping max pooling with a square ``size`` window.

    Ties route the gradient to the first maximal element in row-major order.
    """
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise DimensionError(f"maxpool2d expects 3-D or 4-D input, got {x.shape}")
    n, c, h, w = xd.shape
    if h % size or w % size:
        raise ConfigurationError(f"pool size {size} does not divide spatial dims {h}x{w}")
    views = [xd[:, :, i::size, j::size] for i in range(size) for j in range(size)]
    out = views[0]
    for v in views[1:]:
        out = np.maximum(out, v)

    def vjp(g, needs):
        g4 = g[None] if single else g
        gx = np.zeros(xd.shape, dtype=g4.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        k = 0
        for i in range(size):
            for j in range(size):
                hit = (views[k] == out) & ~taken
                taken |= hit
                gx[:, :, i::size, j::size] = g4 * hit
                k += 1
        return (gx[0] if single else gx,)

    return apply_op(out[0] if single else out, (x,), vjp)


# ---------------------------------------------------------------------------
# losses


def log_softmax(z):
    """Row-wise log-softmax of a ``K`` or ``N x K`` array (plain numpy)."""
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Cross-entropy ``-log softmax(logits)[label]``.

    Returns a scalar for a single ``K``-vector of logits, or one loss per row
    for an ``N x K`` batch.
    """
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    if z.ndim != 2 or z.shape[1] < 2:
        raise DimensionError(f"softmax_cross_entropy needs >= 2 classes, got {logits.shape}")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != z.shape[0]:
        raise DimensionError(f"{y.shape[0]} labels for {z.shape[0]} rows of logits")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise IndexError(f"label out of range for {z.shape[1]} classes: {y}")
    logp = log_softmax(z.astype(np.float64))
    rows = np.arange(z.shape[0])
    loss = np.maximum(-logp[rows, y], 0.0).astype(logits.dtype)
    if single:
        loss = loss[0]

    def vjp(g, needs):
        grad = np.exp(logp)
        grad[rows, y] -= 1.0
        grad = grad * np.asarray(g, dtype=np.float64).reshape(-1, 1)
        grad = grad.astype(logits.dtype)
        return (grad[0] if single else grad,)

    return apply_op(loss, (logits,), vjp)


def stack(tensors: Iterable[Tensor]):
    """Stack equally shaped tensors along a new leading axis."""
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: heterogeneous shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors])
    return apply_op(out, tuple(tensors), lambda g, n: tuple(g[i] for i in range(len(tensors))))
