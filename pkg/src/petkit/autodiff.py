"""Minimal reverse-mode automatic differentiation on numpy arrays.

Operations executed while a :class:`Tape` is active record backward closures
in execution order; ``Tape.backward`` replays them in reverse and accumulates
gradients into ``Tensor.grad``. A tape can be consumed once.

Only what the score network needs is implemented: elementwise arithmetic
with broadcasting, matmul, strided 2D convolution, slicing/concat/reshape,
reductions, a few pointwise nonlinearities, nearest-neighbor upsampling,
sparse matrix-vector products, and a straight-through wrapper for stages
that are intentionally not differentiated.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records the operations of a forward pass for one backward sweep."""

    def __init__(self):
        self._nodes: list = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _record(self, backward_fn) -> None:
        self._nodes.append(backward_fn)

    def backward(self, output: "Tensor", cotangent=None) -> None:
        """Seed the output with a cotangent and accumulate gradients.

        Raises if the tape has already been consumed.
        """
        if self.consumed:
            raise RuntimeError("tape already consumed; record a new forward pass")
        self.consumed = True
        if cotangent is None:
            cotangent = np.ones_like(output.data)
        output.grad = np.asarray(cotangent, dtype=np.float64)
        if output.grad.shape != output.data.shape:
            raise ValueError("cotangent shape does not match output shape")
        for fn in reversed(self._nodes):
            fn()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A numpy array plus an accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad")
    __array_priority__ = 100  # keep numpy from hijacking binary ops

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(data, parents_require) -> tuple[Tensor, Tape | None]:
    tape = _active_tape()
    requires = bool(parents_require) and tape is not None
    return Tensor(data, requires_grad=requires), (tape if requires else None)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out, tape = _make(a.data + b.data, a.requires_grad or b.requires_grad)
    if tape:
        def backward():
            if a.requires_grad:
                a.accumulate(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(out.grad, b.data.shape))
        tape._record(backward)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out, tape = _make(a.data - b.data, a.requires_grad or b.requires_grad)
    if tape:
        def backward():
            if a.requires_grad:
                a.accumulate(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(-out.grad, b.data.shape))
        tape._record(backward)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out, tape = _make(a.data * b.data, a.requires_grad or b.requires_grad)
    if tape:
        def backward():
            if a.requires_grad:
                a.accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(out.grad * a.data, b.data.shape))
        tape._record(backward)
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out, tape = _make(a.data / b.data, a.requires_grad or b.requires_grad)
    if tape:
        def backward():
            if a.requires_grad:
                a.accumulate(_unbroadcast(out.grad / b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(
                    -out.grad * a.data / (b.data * b.data), b.data.shape))
        tape._record(backward)
    return out


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out, tape = _make(a.data ** exponent, a.requires_grad)
    if tape:
        def backward():
            a.accumulate(out.grad * exponent * a.data ** (exponent - 1))
        tape._record(backward)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out, tape = _make(np.exp(a.data), a.requires_grad)
    if tape:
        def backward():
            a.accumulate(out.grad * out.data)
        tape._record(backward)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out, tape = _make(np.log(a.data), a.requires_grad)
    if tape:
        def backward():
            a.accumulate(out.grad / a.data)
        tape._record(backward)
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out, tape = _make(np.sqrt(a.data), a.requires_grad)
    if tape:
        def backward():
            a.accumulate(out.grad * 0.5 / out.data)
        tape._record(backward)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out, tape = _make(s, a.requires_grad)
    if tape:
        def backward():
            a.accumulate(out.grad * s * (1.0 - s))
        tape._record(backward)
    return out


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out, tape = _make(a.data * s, a.requires_grad)
    if tape:
        def backward():
            a.accumulate(out.grad * (s + a.data * s * (1.0 - s)))
        tape._record(backward)
    return out


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    out, tape = _make(np.maximum(a.data, lo), a.requires_grad)
    if tape:
        keep = a.data > lo
        def backward():
            a.accumulate(out.grad * keep)
        tape._record(backward)
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out, tape = _make(a.data.reshape(shape), a.requires_grad)
    if tape:
        def backward():
            a.accumulate(out.grad.reshape(a.data.shape))
        tape._record(backward)
    return out


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out, tape = _make(a.data[key], a.requires_grad)
    if tape:
        def backward():
            g = np.zeros_like(a.data)
            g[key] = out.grad
            a.accumulate(g)
        tape._record(backward)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out, tape = _make(np.concatenate([t.data for t in tensors], axis=axis),
                      any(t.requires_grad for t in tensors))
    if tape:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def backward():
            parts = np.split(out.grad, splits, axis=axis)
            for t, g in zip(tensors, parts):
                if t.requires_grad:
                    t.accumulate(g)
        tape._record(backward)
    return out


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out, tape = _make(a.data.sum(axis=axis, keepdims=keepdims),
                      a.requires_grad)
    if tape:
        def backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(g, a.data.shape))
        tape._record(backward)
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out, tape = _make(a.data.mean(axis=axis, keepdims=keepdims),
                      a.requires_grad)
    if tape:
        count = a.data.size // out.data.size
        def backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(g, a.data.shape) / count)
        tape._record(backward)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out, tape = _make(a.data @ b.data, a.requires_grad or b.requires_grad)
    if tape:
        def backward():
            if a.requires_grad:
                a.accumulate(out.grad @ b.data.T)
            if b.requires_grad:
                b.accumulate(a.data.T @ out.grad)
        tape._record(backward)
    return out


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution in NCHW layout with square kernels."""
    x, weight = as_tensor(x), as_tensor(weight)
    n, c, h, w = x.data.shape
    f, c_in, kh, kw = weight.data.shape
    if c_in != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {c_in}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding),
                         (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    oh, ow = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    w_mat = weight.data.reshape(f, -1)
    out_mat = cols @ w_mat.T
    if bias is not None:
        bias = as_tensor(bias)
        out_mat = out_mat + bias.data[None, :]
    out_data = out_mat.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    requires = x.requires_grad or weight.requires_grad or (
        bias is not None and bias.requires_grad)
    out, tape = _make(out_data, requires)
    if tape:
        def backward():
            cot = out.grad.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
            if weight.requires_grad:
                weight.accumulate((cot.T @ cols).reshape(weight.data.shape))
            if bias is not None and bias.requires_grad:
                bias.accumulate(cot.sum(axis=0))
            if x.requires_grad:
                gcols = (cot @ w_mat).reshape(n, oh, ow, c, kh, kw)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * oh:stride,
                            j:j + stride * ow:stride] += \
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                if padding:
                    gxp = gxp[:, :, padding:-padding, padding:-padding]
                x.accumulate(gxp)
        tape._record(backward)
    return out


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    out, tape = _make(out_data, x.requires_grad)
    if tape:
        def backward():
            x.accumulate(out.grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))
        tape._record(backward)
    return out


def spmv(matrix, x) -> Tensor:
    """Sparse matrix (constant) times a flat tensor."""
    x = as_tensor(x)
    out, tape = _make(matrix @ x.data, x.requires_grad)
    if tape:
        def backward():
            x.accumulate(matrix.T @ out.grad)
        tape._record(backward)
    return out


def passthrough(x, fn) -> Tensor:
    """Apply a non-differentiated stage; gradients pass through unchanged."""
    x = as_tensor(x)
    out, tape = _make(fn(x.data), x.requires_grad)
    if tape:
        if out.data.shape != x.data.shape:
            raise ValueError("passthrough stage must preserve shape")
        def backward():
            x.accumulate(out.grad)
        tape._record(backward)
    return out


def group_norm(x, num_groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Group normalization built from primitive ops (exact gradients)."""
    n, c, h, w = as_tensor(x).shape
    if c % num_groups:
        raise ValueError(f"{c} channels not divisible into {num_groups} groups")
    xg = reshape(x, (n, num_groups, (c // num_groups) * h * w))
    mu = tmean(xg, axis=2, keepdims=True)
    centered = sub(xg, mu)
    var = tmean(mul(centered, centered), axis=2, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    normed = reshape(normed, (n, c, h, w))
    return add(mul(normed, reshape(gamma, (1, c, 1, 1))),
               reshape(beta, (1, c, 1, 1)))


class Adam:
    """Adaptive moment optimizer (decay 0.9/0.999, epsilon 1e-8)."""

    def __init__(self, params: list[Tensor], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            m_hat = m / (1 - b1 ** self.step_count)
            v_hat = v / (1 - b2 ** self.step_count)
            p.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
