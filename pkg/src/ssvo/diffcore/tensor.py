"""Reverse-mode autodiff over float64 numpy arrays.

Every op returns a new Tensor holding the forward value and, when gradients
are enabled, a closure computing vector-Jacobian products for its parents.
The tape is the implicit DAG of parent links; backward() walks it once in
reverse topological order. All arithmetic is 64-bit and single-threaded per
graph, so repeated backward passes are bitwise deterministic.
"""

from __future__ import annotations

import numpy as np

_grad_enabled = True
_debug_checks = False


def set_debug_checks(flag: bool) -> None:
    """Enable NaN/Inf detection on every op output (raises NumericalError)."""
    global _debug_checks
    _debug_checks = bool(flag)


class NumericalError(ArithmeticError):
    """A tensor produced by the graph contains NaN or Inf."""


class no_grad:
    """Context manager that disables tape construction."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def _check_finite(arr: np.ndarray) -> None:
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise NumericalError("non-finite value produced in graph")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        _check_finite(self.data)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents, vjp) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        _check_finite(data)
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- backward engine ------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from a scalar output.

        Populates .grad on every tensor with requires_grad=True that
        contributed to this output. Accumulation order is fixed by the
        construction order of the graph, so results are deterministic.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar output, got shape {self.data.shape}"
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
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    # -- elementwise arithmetic -----------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out_data = a.data + b.data
        return Tensor._from_op(
            out_data,
            (a, b),
            lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out_data = a.data - b.data
        return Tensor._from_op(
            out_data,
            (a, b),
            lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out_data = a.data * b.data
        return Tensor._from_op(
            out_data,
            (a, b),
            lambda g: (
                _unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out_data = a.data / b.data
        return Tensor._from_op(
            out_data,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
            ),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        a = self
        return Tensor._from_op(-a.data, (a,), lambda g: (-g,))

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are supported")
        a = self
        out_data = a.data**p
        return Tensor._from_op(
            out_data, (a,), lambda g: (g * p * a.data ** (p - 1),)
        )

    def abs(self):
        # subgradient at 0 is 0 (sign(0) == 0)
        a = self
        return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))

    def exp(self):
        a = self
        out_data = np.exp(a.data)
        return Tensor._from_op(out_data, (a,), lambda g: (g * out_data,))

    def log(self):
        a = self
        return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)
        return Tensor._from_op(out_data, (a,), lambda g: (g * 0.5 / out_data,))

    def sin(self):
        a = self
        return Tensor._from_op(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))

    def cos(self):
        a = self
        return Tensor._from_op(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))

    def sigmoid(self):
        a = self
        # overflow-safe for |x| up to float range
        x = a.data
        out_data = np.empty_like(x)
        pos = x >= 0
        out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out_data[~pos] = ex / (1.0 + ex)
        return Tensor._from_op(
            out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),)
        )

    def relu(self):
        a = self
        mask = a.data > 0
        return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, a.data.shape).copy(),)
            gx = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gx, a.data.shape).copy(),)

        return Tensor._from_op(np.asarray(out_data), (a,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[i] for i in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out_data = a.data.reshape(shape)
        return Tensor._from_op(
            out_data, (a,), lambda g: (g.reshape(a.data.shape),)
        )

    def transpose(self, axes):
        a = self
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        return Tensor._from_op(
            a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),)
        )

    def __getitem__(self, idx):
        # basic (slice/int/ellipsis) indexing only; regions never overlap
        a = self
        out_data = a.data[idx]

        def vjp(g):
            gx = np.zeros_like(a.data)
            gx[idx] += g
            return (gx,)

        # np.ascontiguousarray would promote 0-d results (integer indexing)
        # to shape (1,), desynchronizing the output shape from gx[idx].
        return Tensor._from_op(np.asarray(out_data, order="C"), (a,), vjp)

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")
        out_data = a.data @ b.data
        return Tensor._from_op(
            out_data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g)
        )


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for i in range(len(sizes)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return Tensor._from_op(out_data, tensors, vjp)


def gather_hw(source: Tensor, flat_idx: np.ndarray) -> Tensor:
    """Pick pixels from a [C, H, W] tensor by flat H*W index.

    Returns [C, P] for P indices. Backward scatter-adds per channel with
    bincount, which is deterministic.
    """
    source = as_tensor(source)
    c, h, w = source.data.shape
    flat_idx = np.asarray(flat_idx, dtype=np.intp)
    src2d = source.data.reshape(c, h * w)
    out_data = src2d[:, flat_idx]

    def vjp(g):
        gsrc = np.empty((c, h * w), dtype=np.float64)
        for ch in range(c):
            gsrc[ch] = np.bincount(flat_idx, weights=g[ch], minlength=h * w)
        return (gsrc.reshape(c, h, w),)

    return Tensor._from_op(out_data, (source,), vjp)


def eval_with_gradients(output: Tensor, leaves: dict | None = None) -> dict:
    """Backward pass from a scalar; returns a {name: gradient} map.

    `leaves` maps names to parameter tensors; disconnected leaves get a zero
    gradient rather than an error. With leaves=None an empty map is returned
    and gradients are read off the tensors' .grad fields directly.
    """
    output.backward()
    if leaves is None:
        return {}
    grads = {}
    for name, t in leaves.items():
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return grads
