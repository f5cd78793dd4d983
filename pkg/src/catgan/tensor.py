"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array and records the operations applied to
it, so that calling :meth:`Tensor.backward` on a scalar result accumulates
gradients into every upstream tensor created with ``requires_grad=True``.
Tensors are treated as immutable values once constructed; every operation
returns a new tensor.

Only the operations needed by the GAN family live here (element-wise
arithmetic with broadcasting, matrix product, activations, reductions and
basic indexing).  Convolution, batch normalisation and the other structured
layer operations are built on top of this module in :mod:`catgan.layers`.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "set_default_dtype",
    "get_default_dtype",
    "set_finite_checks",
    "gradients",
    "no_grad",
]

_DEFAULT_DTYPE = np.float64
_FINITE_CHECKS = True
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Select the working precision for newly created tensors.

    64-bit is the default so gradient checks are decisive; 32-bit roughly
    doubles throughput for the large training runs.
    """
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf guard applied to every operation result.

    Enabled by default: a non-finite value anywhere in a forward pass raises
    immediately instead of silently propagating.
    """
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class no_grad:
    """Context manager that disables graph recording (forward only)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def _check_finite(data: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-dimensional array node in a reverse-mode differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents: tuple = ()
        self._backward = None
        _check_finite(self.data, "tensor")

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents, backward, op: str = "op") -> "Tensor":
        """Build a result tensor recording `parents` and a backward closure.

        `backward(grad)` must return one gradient array per parent (``None``
        for parents that do not require gradients).
        """
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def _lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    # -- basic properties -----------------------------------------------------

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        a, b = self, Tensor._lift(other)

        def backward(grad):
            return (_unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape))

        return Tensor._make(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, (a,), lambda grad: (-grad,), "neg")

    def __sub__(self, other):
        a, b = self, Tensor._lift(other)

        def backward(grad):
            return (_unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape))

        return Tensor._make(a.data - b.data, (a, b), backward, "sub")

    def __rsub__(self, other):
        return Tensor._lift(other).__sub__(self)

    def __mul__(self, other):
        a, b = self, Tensor._lift(other)

        def backward(grad):
            return (
                _unbroadcast(grad * b.data, a.shape),
                _unbroadcast(grad * a.data, b.shape),
            )

        return Tensor._make(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, Tensor._lift(other)

        def backward(grad):
            return (
                _unbroadcast(grad / b.data, a.shape),
                _unbroadcast(-grad * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._make(a.data / b.data, (a, b), backward, "div")

    def __rtruediv__(self, other):
        return Tensor._lift(other).__truediv__(self)

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        a = self
        out_data = a.data ** exponent

        def backward(grad):
            return (grad * exponent * a.data ** (exponent - 1),)

        return Tensor._make(out_data, (a,), backward, "pow")

    def __matmul__(self, other):
        a, b = self, Tensor._lift(other)
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(
                f"matmul expects 2-D operands, got {a.shape} @ {b.shape}"
            )
        if a.shape[1] != b.shape[0]:
            raise ValueError(
                f"matmul shape mismatch: {a.shape} @ {b.shape}"
            )

        def backward(grad):
            return (grad @ b.data.T, a.data.T @ grad)

        return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")

    # -- element-wise functions -------------------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)
        return Tensor._make(out_data, (a,), lambda grad: (grad * out_data,), "exp")

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda grad: (grad / a.data,), "log")

    def abs(self):
        a = self
        return Tensor._make(
            np.abs(a.data), (a,), lambda grad: (grad * np.sign(a.data),), "abs"
        )

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)
        return Tensor._make(
            out_data, (a,), lambda grad: (grad * 0.5 / out_data,), "sqrt"
        )

    def clip(self, lo: float, hi: float):
        """Clamp values to [lo, hi]; gradient passes through inside the range."""
        a = self
        out_data = np.clip(a.data, lo, hi)
        inside = (a.data >= lo) & (a.data <= hi)
        return Tensor._make(
            out_data, (a,), lambda grad: (grad * inside,), "clip"
        )

    def relu(self):
        a = self
        mask = a.data > 0
        return Tensor._make(
            a.data * mask, (a,), lambda grad: (grad * mask,), "relu"
        )

    def lrelu(self, a_coef: float = 0.54, b_coef: float = 0.4):
        """Leaky rectifier in the form a*x + b*|x|.

        The defaults match the coefficients used throughout the
        discriminator and generator stacks; (0.6, 0.4) recovers the
        conventional slope-0.2 leaky ReLU.
        """
        t = self
        local = a_coef + b_coef * np.sign(t.data)
        return Tensor._make(
            a_coef * t.data + b_coef * np.abs(t.data),
            (t,),
            lambda grad: (grad * local,),
            "lrelu",
        )

    def sigmoid(self):
        a = self
        # Stable on both tails: 1/(1+e^-x) for x>=0, e^x/(1+e^x) otherwise.
        out_data = np.empty_like(a.data)
        pos = a.data >= 0
        out_data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        ex = np.exp(a.data[~pos])
        out_data[~pos] = ex / (1.0 + ex)

        def backward(grad):
            return (grad * out_data * (1.0 - out_data),)

        return Tensor._make(out_data, (a,), backward, "sigmoid")

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)

        def backward(grad):
            return (grad * (1.0 - out_data * out_data),)

        return Tensor._make(out_data, (a,), backward, "tanh")

    def softmax(self):
        """Softmax over the last axis; rows sum to one."""
        a = self
        shifted = a.data - a.data.max(axis=-1, keepdims=True)
        ex = np.exp(shifted)
        out_data = ex / ex.sum(axis=-1, keepdims=True)

        def backward(grad):
            inner = (grad * out_data).sum(axis=-1, keepdims=True)
            return (out_data * (grad - inner),)

        return Tensor._make(out_data, (a,), backward, "softmax")

    # -- reductions and shaping -------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(grad):
            g = np.asarray(grad)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(np.asarray(out_data), (a,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        a = self
        if axis is None:
            count = a.size
        else:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            count = int(np.prod([a.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out_data = a.data.reshape(shape)

        def backward(grad):
            return (grad.reshape(a.shape),)

        return Tensor._make(out_data, (a,), backward, "reshape")

    def __getitem__(self, key):
        a = self
        out_data = a.data[key]

        def backward(grad):
            full = np.zeros_like(a.data)
            np.add.at(full, key, grad)
            return (full,)

        return Tensor._make(np.ascontiguousarray(out_data), (a,), backward, "getitem")

    # -- backward pass ----------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into every upstream tensor."""
        if self.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, pgrad in zip(node._parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                pgrad = np.asarray(pgrad, dtype=parent.data.dtype)
                if parent.grad is None:
                    parent.grad = pgrad.reshape(parent.shape).copy()
                else:
                    parent.grad += pgrad.reshape(parent.shape)


def gradients(loss: Tensor, params: dict) -> dict:
    """Run backward from `loss` and collect one gradient per named parameter.

    Parameters that do not influence the loss get a zero gradient of
    matching shape.
    """
    loss.backward()
    out = {}
    for name, tensor in params.items():
        if tensor.grad is None:
            out[name] = np.zeros_like(tensor.data)
        else:
            out[name] = tensor.grad
    return out
