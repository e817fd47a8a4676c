"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation on a :class:`Tensor` returns a new tensor that remembers its
operands and a closure mapping the output gradient to operand gradients.  The
compute graph is the DAG reachable from a loss; :meth:`Tensor.backward` walks
it once in reverse topological order and then marks it consumed.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, DomainError, GraphStateError

DTYPE = np.float64


def _as_array(values) -> np.ndarray:
    return np.array(values, dtype=DTYPE, copy=True) if not isinstance(values, np.ndarray) \
        else np.ascontiguousarray(values, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """n-dimensional float64 array with an attached gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = _as_array(values)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    # -- construction -------------------------------------------------------
    @classmethod
    def _from_op(cls, values: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        for p in parents:
            if p._consumed:
                raise GraphStateError("operand belongs to a graph already consumed by backward()")
        out = cls.__new__(cls)
        out.values = values
        out.grad = None  # allocated lazily by backward()
        out.requires_grad = any(p.requires_grad for p in parents)
        out.name = None
        out._consumed = False
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def constant(values) -> "Tensor":
        """Wrap ``values`` without copying as a non-differentiable leaf."""
        t = Tensor.__new__(Tensor)
        t.values = np.asarray(values, dtype=DTYPE)
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._parents = ()
        t._backward = None
        t._consumed = False
        return t

    # -- introspection ------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def consumed(self) -> bool:
        return self._consumed

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- autodiff -----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable tensor."""
        if self._consumed:
            raise GraphStateError("backward() called twice on the same graph")
        if self.values.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")

        order = self._topological_order()
        self.grad = np.ones_like(self.values)
        for node in reversed(order):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=DTYPE, copy=True).reshape(parent.shape)
                elif parent.is_leaf:
                    parent.grad += g
                else:
                    parent.grad = parent.grad + g
        for node in order:
            if not node.is_leaf:
                node._consumed = True
                node._backward = None
                node._parents = ()

    def _topological_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            if not node.is_leaf:
                node.grad = None
            elif node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.values)
        return order

    # -- elementwise arithmetic --------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _wrap(other)
        a, b = self.shape, other.shape
        return Tensor._from_op(self.values + other.values, (self, other),
                               lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _wrap(other)
        a, b = self.shape, other.shape
        return Tensor._from_op(self.values - other.values, (self, other),
                               lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))

    def __rsub__(self, other) -> "Tensor":
        return _wrap(other) - self

    def __mul__(self, other) -> "Tensor":
        other = _wrap(other)
        x, y = self.values, other.values
        return Tensor._from_op(x * y, (self, other),
                               lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _wrap(other)
        x, y = self.values, other.values
        out = x / y
        return Tensor._from_op(out, (self, other),
                               lambda g: (_unbroadcast(g / y, x.shape),
                                          _unbroadcast(-g * out / y, y.shape)))

    def __rtruediv__(self, other) -> "Tensor":
        return _wrap(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.values, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise ContractError("only constant exponents are supported")
        x = self.values
        p = float(exponent)
        return Tensor._from_op(x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    # -- reductions and shape ----------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.values.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._from_op(np.asarray(out, dtype=DTYPE), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.values.reshape(shape)
        except ValueError as exc:
            raise DimensionError(str(exc)) from None
        return Tensor._from_op(out, (self,), lambda g: (g.reshape(src),))

    # -- unary functions ----------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.values)
        return Tensor._from_op(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        x = self.values
        return Tensor._from_op(np.log(x), (self,), lambda g: (g / x,))

    def relu(self) -> "Tensor":
        x = self.values
        keep = x > 0  # subgradient 0 at the kink
        # maximum (not where) so NaN propagates instead of being zeroed
        return Tensor._from_op(np.maximum(x, 0.0), (self,), lambda g: (g * keep,))

    def sigmoid(self) -> "Tensor":
        out = _sigmoid(self.values)
        return Tensor._from_op(out, (self,), lambda g: (g * out * (1.0 - out),))

    def softplus(self) -> "Tensor":
        x = self.values
        return Tensor._from_op(np.logaddexp(0.0, x), (self,), lambda g: (g * _sigmoid(x),))

    def abs(self) -> "Tensor":
        x = self.values
        return Tensor._from_op(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def clip(self, lo: float, hi: float) -> "Tensor":
        x = self.values
        inside = (x >= lo) & (x <= hi)
        return Tensor._from_op(np.clip(x, lo, hi), (self,), lambda g: (g * inside,))


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor.constant(value)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Special functions
# ---------------------------------------------------------------------------

EULER_GAMMA = 0.57721566490153286061


def _digamma_array(x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=DTYPE, copy=True)
    if np.any(x <= 0):
        raise DomainError("digamma is only defined here for x > 0")
    acc = np.zeros_like(x)
    while True:
        small = x < 10.0
        if not small.any():
            break
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (
        1.0 / 240 - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760))))))
    return acc + np.log(x) - 0.5 * inv - series


def _trigamma_array(x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=DTYPE, copy=True)
    acc = np.zeros_like(x)
    while True:
        small = x < 10.0
        if not small.any():
            break
        acc[small] += 1.0 / (x[small] * x[small])
        x[small] += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv + 0.5 * inv2 + inv * inv2 * (1.0 / 6 - inv2 * (1.0 / 30 - inv2 * (1.0 / 42 - inv2 * (1.0 / 30))))
    return acc + series


def digamma(x):
    """Digamma function for positive arguments.

    Accepts a float, an array or a :class:`Tensor`; tensors stay on the graph
    (the derivative is the trigamma function).
    """
    if isinstance(x, Tensor):
        v = x.values
        return Tensor._from_op(_digamma_array(v), (x,), lambda g: (g * _trigamma_array(v),))
    if np.ndim(x) == 0:
        return float(_digamma_array(np.array([x]))[0])
    return _digamma_array(np.asarray(x))


def trigamma(x):
    if np.ndim(x) == 0:
        return float(_trigamma_array(np.array([x]))[0])
    return _trigamma_array(np.asarray(x))


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------

def dense_forward(inp: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``inp @ weight + bias`` for ``inp`` [batch, in], ``weight`` [in, out]."""
    x, w, b = inp.values, weight.values, bias.values
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1 or x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(f"dense: input {x.shape}, weight {w.shape}, bias {b.shape} do not conform")

    def backward(g):
        return (g @ w.T if inp.requires_grad else None,
                x.T @ g if weight.requires_grad else None,
                g.sum(axis=0) if bias.requires_grad else None)

    return Tensor._from_op(x @ w + b, (inp, weight, bias), backward)


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(inp: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``inp`` [B, C_in, H, W] with ``kernel`` [C_out, C_in, k, k]."""
    x, w, b = inp.values, kernel.values, bias.values
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
        raise DimensionError(f"conv2d: bad ranks input {x.shape}, kernel {w.shape}, bias {b.shape}")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d: stride must be >= 1 and padding >= 0")
    n, c_in, h, wd = x.shape
    c_out, c_k, kh, kw = w.shape
    if c_k != c_in or b.shape[0] != c_out or kh != kw:
        raise DimensionError(f"conv2d: input {x.shape}, kernel {w.shape}, bias {b.shape} do not conform")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}+{padding}")
    k = kh
    xp = _pad(x, padding)
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    # windows: [B, C_in, Ho, Wo, k, k] -> columns [B*Ho*Wo, C_in*k*k]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * k * k)
    wmat = w.reshape(c_out, c_in * k * k)
    out = (cols @ wmat.T + b).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gx = gw = gb = None
        if kernel.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        if inp.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c_in, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw, gb

    return Tensor._from_op(np.ascontiguousarray(out), (inp, kernel, bias), backward)


def maxpool2d(inp: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max over ``window``x``window`` patches; ties route gradient to the first
    maximum in row-major order."""
    stride = window if stride is None else stride
    x = inp.values
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects [B, C, H, W], got {x.shape}")
    if window < 1 or stride < 1:
        raise ContractError("maxpool2d: window and stride must be positive")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise DimensionError(f"maxpool2d: window {window} exceeds input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x)
        for idx in range(window * window):
            i, j = divmod(idx, window)
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * (arg == idx)
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), (inp,), backward)


def log_softmax_array(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_per_example(logits: np.ndarray, labels) -> np.ndarray:
    """Per-row ``-log softmax(logits)[label]`` on plain arrays."""
    labels = _check_labels(labels, logits.shape)
    return -log_softmax_array(logits)[np.arange(len(labels)), labels]


def _check_labels(labels, shape) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(shape) != 2 or labels.shape[0] != shape[0]:
        raise DimensionError(f"logits {shape} and {labels.shape[0]} labels do not conform")
    if labels.size and (labels.min() < 0 or labels.max() >= shape[1]):
        raise IndexError(f"label out of range [0, {shape[1]})")
    return labels


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """``-log softmax(logits)[label]`` per row, averaged unless ``reduction="none"``."""
    z = logits.values
    labels = _check_labels(labels, z.shape)
    n = z.shape[0]
    rows = np.arange(n)
    logp = log_softmax_array(z)
    per_example = -logp[rows, labels]
    if reduction == "none":
        def backward(g):
            grad = np.exp(logp)
            grad[rows, labels] -= 1.0
            return (grad * g[:, None],)

        return Tensor._from_op(per_example, (logits,), backward)
    if reduction != "mean":
        raise ContractError(f"unknown reduction {reduction!r}")

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return Tensor._from_op(np.asarray(per_example.mean(), dtype=DTYPE), (logits,), backward)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def numerical_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar function ``f`` at ``x``."""
    x = np.array(x, dtype=DTYPE, copy=True)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(Tensor(x)).item()
        flat[i] = old - h
        down = f(Tensor(x)).item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``."""
    x = np.array(x, dtype=DTYPE, copy=True)
    leaf = Tensor(x, requires_grad=True)
    loss = f(leaf)
    if loss.requires_grad:
        loss.backward()
        analytic = leaf.grad.copy()
    else:
        analytic = np.zeros_like(x)
    numeric = numerical_gradient(f, x, h)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


__all__ = [
    "DTYPE", "EULER_GAMMA", "Tensor", "conv2d_forward", "cross_entropy_per_example", "dense_forward",
    "digamma", "grad_check", "log_softmax_array", "maxpool2d", "numerical_gradient",
    "softmax_cross_entropy", "trigamma",
]
