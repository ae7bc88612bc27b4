"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every backward rule is written in terms of the same differentiable primitives,
so gradients computed with ``create_graph=True`` are themselves recorded on the
tape and can be differentiated again (double backward).

Recording only happens inside an active :class:`Tape`::

    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape():
        loss = (x * x).sum()
        (g,) = grad(loss, [x])
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from . import kernels

DIV_GUARD = 1e-300


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node:
    __slots__ = ("fn", "inputs", "output", "index")

    def __init__(self, fn, inputs, output, index):
        self.fn = fn
        self.inputs = inputs
        self.output = output
        self.index = index


class Tape:
    """Ordered record of primitive operations.

    ``record_backward`` is switched on while a ``create_graph`` backward pass
    runs, so the operations that build gradients land on this same tape.
    """

    def __init__(self):
        self.nodes = []
        self.record_backward = False
        self._recording = True

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    @property
    def recording(self):
        return self._recording

    def record(self, fn, inputs, output):
        node = Node(fn, inputs, output, len(self.nodes))
        self.nodes.append(node)
        output.tape_id = node.index
        output._tape = self
        return node

    @contextmanager
    def paused(self, record=False):
        prev = self._recording
        self._recording = record
        try:
            yield
        finally:
            self._recording = prev

    def signature(self):
        """Structural fingerprint: op names, input/output shapes and tape links."""
        sig = []
        for node in self.nodes:
            ins = tuple((t.tape_id if t._tape is self else None, t.shape) for t in node.inputs)
            sig.append((node.fn.name, ins, node.output.shape))
        return sig


@contextmanager
def no_grad():
    """Evaluate without recording, even inside an active tape."""
    tape = active_tape()
    if tape is None:
        yield
        return
    with tape.paused(False):
        yield


class Tensor:
    __slots__ = ("data", "requires_grad", "tape_id", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tape_id = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6, threshold=20)}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # arithmetic
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive machinery

PRIMITIVES = {}


def primitive(cls):
    PRIMITIVES[cls.name] = cls
    return cls


class Function:
    """One primitive: ``forward`` on arrays, ``backward`` on Tensors."""

    name = "?"

    def __init__(self, **attrs):
        self.__dict__.update(attrs)
        self.inputs = ()
        self.output = None

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, g, needs):
        raise NotImplementedError


def _apply(cls, *inputs, **attrs):
    fn = cls(**attrs)
    inputs = tuple(as_tensor(t) for t in inputs)
    out = Tensor(fn.forward(*[t.data for t in inputs]))
    tape = active_tape()
    if tape is not None and tape.recording and any(t.requires_grad for t in inputs):
        fn.inputs = inputs
        fn.output = out
        out.requires_grad = True
        tape.record(fn, inputs, out)
    return out


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return sum_to(g, shape)


@primitive
class Add(Function):
    name = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, g, needs):
        a, b = self.inputs
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )


@primitive
class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, g, needs):
        a, b = self.inputs
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(neg(g), b.shape) if needs[1] else None,
        )


@primitive
class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        return a * b

    def backward(self, g, needs):
        a, b = self.inputs
        return (
            _unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None,
        )


@primitive
class Div(Function):
    name = "div"

    def forward(self, a, b):
        if np.any(np.abs(b) < DIV_GUARD):
            raise ZeroDivisionError("div: denominator magnitude below 1e-300")
        return a / b

    def backward(self, g, needs):
        a, b = self.inputs
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g / b, a.shape)
        if needs[1]:
            gb = _unbroadcast(neg(g * self.output) / b, b.shape)
        return ga, gb


@primitive
class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, g, needs):
        return (neg(g),)


@primitive
class MatMul(Function):
    """``a[..., k] @ b[k, n]``, or ``a[m, k] @ b[k, n]``."""

    name = "matmul"

    def forward(self, a, b):
        if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return a @ b

    def backward(self, g, needs):
        a, b = self.inputs
        ga = gb = None
        if needs[0]:
            ga = g @ transpose(b, None)
        if needs[1]:
            a2 = a if a.ndim == 2 else reshape(a, (-1, a.shape[-1]))
            g2 = g if g.ndim == 2 else reshape(g, (-1, g.shape[-1]))
            if a.ndim == 1:
                a2 = reshape(a, (1, -1))
                g2 = reshape(g, (1, -1))
            gb = transpose(a2, None) @ g2
        return ga, gb


@primitive
class Reshape(Function):
    name = "reshape"

    def forward(self, a):
        try:
            return a.reshape(self.shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {self.shape}") from None

    def backward(self, g, needs):
        return (reshape(g, self.inputs[0].shape),)


@primitive
class Transpose(Function):
    name = "transpose"

    def forward(self, a):
        return np.transpose(a, self.axes)

    def backward(self, g, needs):
        if self.axes is None:
            return (transpose(g, None),)
        return (transpose(g, tuple(np.argsort(self.axes))),)


@primitive
class GetItem(Function):
    """Basic (slice/int/Ellipsis/None) indexing."""

    name = "getitem"

    def forward(self, a):
        return np.array(a[self.index])

    def backward(self, g, needs):
        return (embed(g, self.inputs[0].shape, self.index),)


@primitive
class Embed(Function):
    """Place ``a`` into a zero array of ``shape`` at ``index``; adjoint of getitem."""

    name = "embed"

    def forward(self, a):
        out = np.zeros(self.shape)
        out[self.index] = a
        return out

    def backward(self, g, needs):
        return (getitem(g, self.index),)


@primitive
class Concatenate(Function):
    name = "concatenate"

    def forward(self, *arrays):
        try:
            return np.concatenate(arrays, axis=self.axis)
        except ValueError:
            shapes = [x.shape for x in arrays]
            raise ShapeError(f"concatenate: incompatible shapes {shapes} on axis {self.axis}") from None

    def backward(self, g, needs):
        grads = []
        start = 0
        ndim = g.ndim
        axis = self.axis % ndim
        for t, need in zip(self.inputs, needs):
            stop = start + t.shape[axis]
            if need:
                idx = (slice(None),) * axis + (slice(start, stop),)
                grads.append(getitem(g, idx))
            else:
                grads.append(None)
            start = stop
        return tuple(grads)


@primitive
class Sum(Function):
    name = "sum"

    def forward(self, a):
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, g, needs):
        shape = self.inputs[0].shape
        if not self.keepdims and self.axis is not None:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            kept = list(g.shape)
            for ax in sorted(ax % len(shape) for ax in axes):
                kept.insert(ax, 1)
            g = reshape(g, tuple(kept))
        return (broadcast_to(g, shape),)


@primitive
class SumTo(Function):
    """Reduce a broadcast result back to ``shape``; adjoint of broadcast_to."""

    name = "sum_to"

    def forward(self, a):
        shape = self.shape
        lead = a.ndim - len(shape)
        axes = tuple(range(lead)) + tuple(
            i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
        )
        out = np.sum(a, axis=axes, keepdims=True)
        return out.reshape(shape)

    def backward(self, g, needs):
        return (broadcast_to(g, self.inputs[0].shape),)


@primitive
class BroadcastTo(Function):
    name = "broadcast_to"

    def forward(self, a):
        try:
            return np.array(np.broadcast_to(a, self.shape))
        except ValueError:
            raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {self.shape}") from None

    def backward(self, g, needs):
        return (sum_to(g, self.inputs[0].shape),)


@primitive
class Tanh(Function):
    name = "tanh"

    def forward(self, a):
        return np.tanh(a)

    def backward(self, g, needs):
        y = self.output
        return (g * (1.0 - y * y),)


@primitive
class Relu(Function):
    name = "relu"

    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, g, needs):
        return (g * Tensor((self.inputs[0].data > 0).astype(np.float64)),)


@primitive
class Exp(Function):
    name = "exp"

    def forward(self, a):
        return np.exp(a)

    def backward(self, g, needs):
        return (g * self.output,)


@primitive
class Log(Function):
    name = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise ValueError("log: non-positive argument")
        return np.log(a)

    def backward(self, g, needs):
        return (g / self.inputs[0],)


@primitive
class Sqrt(Function):
    name = "sqrt"

    def forward(self, a):
        if np.any(a < 0):
            raise ValueError("sqrt: negative argument")
        return np.sqrt(a)

    def backward(self, g, needs):
        y = self.output
        zero = y.data == 0
        if not zero.any():
            return (g * 0.5 / y,)
        # derivative at 0 is defined as 0
        keep = Tensor((~zero).astype(np.float64))
        safe = y + Tensor(zero.astype(np.float64))
        return (g * keep * 0.5 / safe,)


@primitive
class Power(Function):
    name = "power"

    def forward(self, a):
        return np.power(a, self.exponent)

    def backward(self, g, needs):
        p = self.exponent
        if p == 0:
            return (g * 0.0,)
        if p == 1:
            return (g,)
        if p == 2:
            return (g * 2.0 * self.inputs[0],)
        return (g * p * power(self.inputs[0], p - 1),)


@primitive
class Sin(Function):
    name = "sin"

    def forward(self, a):
        return np.sin(a)

    def backward(self, g, needs):
        return (g * cos(self.inputs[0]),)


@primitive
class Cos(Function):
    name = "cos"

    def forward(self, a):
        return np.cos(a)

    def backward(self, g, needs):
        return (neg(g * sin(self.inputs[0])),)


@primitive
class Max(Function):
    name = "max"

    def forward(self, a):
        self.argmax = np.argmax(a, axis=self.axis)
        return np.max(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, g, needs):
        x = self.inputs[0]
        axis = self.axis % x.ndim
        mask = np.zeros(x.shape)
        np.put_along_axis(mask, np.expand_dims(self.argmax, axis), 1.0, axis=axis)
        if not self.keepdims:
            g = reshape(g, tuple(1 if i == axis else s for i, s in enumerate(x.shape)))
        return (broadcast_to(g, x.shape) * Tensor(mask),)


@primitive
class Pad(Function):
    """Constant padding; ``widths`` as in ``np.pad``."""

    name = "pad"

    def forward(self, a):
        return np.pad(a, self.widths, mode="constant", constant_values=self.value)

    def backward(self, g, needs):
        idx = tuple(slice(lo, lo + n) for (lo, _), n in zip(self.widths, self.inputs[0].shape))
        return (getitem(g, idx),)


@primitive
class Flip(Function):
    name = "flip"

    def forward(self, a):
        return np.ascontiguousarray(np.flip(a, axis=self.axes))

    def backward(self, g, needs):
        return (flip(g, self.axes),)


@primitive
class Permute(Function):
    """Gather along ``axis`` with a permutation ``index``."""

    name = "permute"

    def forward(self, a):
        return np.take(a, self.index, axis=self.axis)

    def backward(self, g, needs):
        return (permute(g, np.argsort(self.index), self.axis),)


@primitive
class Conv2d(Function):
    """Valid stride-1 cross-correlation ``x[B,C,H,W] * w[O,C,kh,kw]``."""

    name = "conv2d"

    def forward(self, x, w):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
        if x.shape[2] < w.shape[2] or x.shape[3] < w.shape[3]:
            raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
        return kernels.correlate2d(x, w)

    def backward(self, g, needs):
        x, w = self.inputs
        kh, kw = w.shape[2], w.shape[3]
        gx = gw = None
        if needs[0]:
            gp = pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wf = transpose(flip(w, (2, 3)), (1, 0, 2, 3))
            gx = conv2d(gp, wf)
        if needs[1]:
            xt = transpose(x, (1, 0, 2, 3))
            gt = transpose(g, (1, 0, 2, 3))
            gw = transpose(conv2d(xt, gt), (1, 0, 2, 3))
        return gx, gw


@primitive
class AvgPool2(Function):
    name = "avgpool2"

    def forward(self, a):
        b, c, h, w = a.shape
        return a.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(self, g, needs):
        return (upsample2(g) * 0.25,)


@primitive
class Upsample2(Function):
    """Repeat each pixel into a 2x2 block; adjoint of 2x2 sum-pooling."""

    name = "upsample2"

    def forward(self, a):
        return np.repeat(np.repeat(a, 2, axis=2), 2, axis=3)

    def backward(self, g, needs):
        return (avgpool2(g) * 4.0,)


# ---------------------------------------------------------------------------
# public op functions


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _apply(Add, a, b)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _apply(Sub, a, b)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _apply(Mul, a, b)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    return _apply(Div, a, b)


def neg(a):
    return _apply(Neg, a)


def matmul(a, b):
    return _apply(MatMul, a, b)


def reshape(a, shape):
    return _apply(Reshape, a, shape=tuple(shape))


def transpose(a, axes=None):
    return _apply(Transpose, a, axes=None if axes is None else tuple(axes))


def getitem(a, index):
    return _apply(GetItem, a, index=index)


def embed(a, shape, index):
    return _apply(Embed, a, shape=tuple(shape), index=index)


def concatenate(tensors, axis=0):
    return _apply(Concatenate, *tensors, axis=axis)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concatenate(expanded, axis=axis)


def sum_(a, axis=None, keepdims=False):
    return _apply(Sum, a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) / float(n)


def sum_to(a, shape):
    return _apply(SumTo, a, shape=tuple(shape))


def broadcast_to(a, shape):
    return _apply(BroadcastTo, a, shape=tuple(shape))


def tanh(a):
    return _apply(Tanh, a)


def relu(a):
    return _apply(Relu, a)


def exp(a):
    return _apply(Exp, a)


def log(a):
    return _apply(Log, a)


def sqrt(a):
    return _apply(Sqrt, a)


def power(a, exponent):
    return _apply(Power, a, exponent=float(exponent))


def sin(a):
    return _apply(Sin, a)


def cos(a):
    return _apply(Cos, a)


def max_(a, axis=-1, keepdims=False):
    return _apply(Max, a, axis=axis, keepdims=keepdims)


def pad(a, widths, value=0.0):
    return _apply(Pad, a, widths=tuple(tuple(w) for w in widths), value=value)


def flip(a, axes):
    return _apply(Flip, a, axes=tuple(axes))


def permute(a, index, axis=-1):
    return _apply(Permute, a, index=np.asarray(index), axis=axis)


def conv2d(x, w):
    return _apply(Conv2d, x, w)


def avgpool2(a):
    a = as_tensor(a)
    if a.ndim != 4 or a.shape[2] % 2 or a.shape[3] % 2:
        raise ShapeError(f"avgpool2: expected [b, c, even h, even w], got {a.shape}")
    return _apply(AvgPool2, a)


def upsample2(a):
    return _apply(Upsample2, a)


# ---------------------------------------------------------------------------
# gradients


def grad(loss, leaves, create_graph=False, allow_unused=False):
    """Gradients of a scalar ``loss`` with respect to each tensor in ``leaves``.

    Returns a list aligned with ``leaves``. With ``create_graph`` the returned
    gradients are recorded on the tape and can be differentiated again. A leaf
    that the loss does not depend on through the tape raises ``GradientError``
    unless ``allow_unused`` is set, in which case it gets zeros.
    """
    if loss.size != 1:
        raise GradientError(f"grad: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    leaves = list(leaves)
    leaf_ids = {id(t) for t in leaves}
    if tape is None:
        if allow_unused:
            return [Tensor(np.zeros(t.shape)) for t in leaves]
        raise GradientError("grad: loss is not recorded on any tape")
    end = loss.tape_id + 1

    # forward sweep: outputs that depend on some requested leaf
    live = set()
    for node in tape.nodes[:end]:
        for t in node.inputs:
            if id(t) in leaf_ids or id(t) in live:
                live.add(id(node.output))
                break
    if id(loss) not in live and id(loss) not in leaf_ids:
        if allow_unused:
            return [Tensor(np.zeros(t.shape)) for t in leaves]
        raise GradientError("grad: loss does not depend on any requested leaf")

    grads = {id(loss): Tensor(np.ones(loss.shape))}
    with tape.paused(record=create_graph):
        tape.record_backward = create_graph
        try:
            for node in reversed(tape.nodes[:end]):
                key = id(node.output)
                if key not in live:
                    continue
                g = grads.get(key)
                if g is None:
                    continue
                if key not in leaf_ids:
                    del grads[key]
                needs = [id(t) in live or id(t) in leaf_ids for t in node.inputs]
                in_grads = node.fn.backward(g, needs)
                for t, gi, need in zip(node.inputs, in_grads, needs):
                    if not need or gi is None:
                        continue
                    k = id(t)
                    grads[k] = grads[k] + gi if k in grads else gi
        finally:
            tape.record_backward = False

    out = []
    for t in leaves:
        g = grads.get(id(t))
        if g is None:
            if not allow_unused:
                raise GradientError(f"grad: leaf of shape {t.shape} is unreachable from the loss")
            g = Tensor(np.zeros(t.shape))
        out.append(g)
    return out


def finite_diff_gradient(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("finite_diff_gradient: eps must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = out.reshape(-1)

    def call(arr):
        with no_grad():
            v = f(Tensor(arr))
        return float(v.data if isinstance(v, Tensor) else v)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = call(base)
        flat[i] = orig - eps
        fm = call(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return Tensor(out)


def rel_error(a, b):
    """Max absolute difference scaled by the larger infinity norm."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)
