"""Minimal reverse-mode automatic differentiation over numpy arrays.

The rendering and loss pipeline is differentiated with this engine instead
of an external framework. Tensors wrap ndarrays, record the operations that
produced them, and `backward()` accumulates vector-Jacobian products in
reverse topological order. Only the ops the pipeline needs are implemented.

Gradient conventions for the non-smooth pieces used by the renderer:
  * `clip` passes gradient only where the input is strictly inside the bounds
  * `abs` uses subgradient 0 at the origin
  * indices (sort orders, histogram bins, masks) are plain ndarrays computed
    from `.data` and treated as constants
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # sum leading axes added by broadcasting
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # sum axes that were size-1 in the original
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An ndarray node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjps: tuple = ()

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, vjps) -> "Tensor":
        """Create a result node; keeps only parents that need gradients."""
        out = Tensor(data)
        kept = [(p, v) for p, v in zip(parents, vjps) if p.requires_grad]
        if kept:
            out.requires_grad = True
            out._parents = tuple(p for p, _ in kept)
            out._vjps = tuple(v for _, v in kept)
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None) -> None:
        """Accumulate gradients of this node into every reachable leaf."""
        if grad is None:
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=self.data.dtype)

        # iterative topological sort (graphs can be thousands of nodes deep)
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        for node in reversed(topo):
            if node.grad is None:
                continue
            g = node.grad
            for parent, vjp in zip(node._parents, node._vjps):
                pg = vjp(g)
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
            # interior nodes are not reused; drop their grad to save memory
            if node._parents:
                node.grad = None if node is not self else self.grad

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x))


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return Tensor._make(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return Tensor._make(
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return Tensor._make(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return Tensor._make(
        a.data / b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def power(a, k: float) -> Tensor:
    a = astensor(a)
    kf = float(k)
    return Tensor._make(
        a.data**kf,
        (a,),
        (lambda g: g * kf * a.data ** (kf - 1.0),),
    )


def exp(a) -> Tensor:
    a = astensor(a)
    out_data = np.exp(a.data)
    return Tensor._make(out_data, (a,), (lambda g: g * out_data,))


def log(a) -> Tensor:
    a = astensor(a)
    return Tensor._make(np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a) -> Tensor:
    a = astensor(a)
    out_data = np.sqrt(a.data)
    return Tensor._make(out_data, (a,), (lambda g: g * (0.5 / out_data),))


def absolute(a) -> Tensor:
    a = astensor(a)
    return Tensor._make(np.abs(a.data), (a,), (lambda g: g * np.sign(a.data),))


def maximum(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    mask = a.data >= b.data
    return Tensor._make(
        np.maximum(a.data, b.data),
        (a, b),
        (
            lambda g: _unbroadcast(g * mask, a.data.shape),
            lambda g: _unbroadcast(g * ~mask, b.data.shape),
        ),
    )


def minimum(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    mask = a.data <= b.data
    return Tensor._make(
        np.minimum(a.data, b.data),
        (a, b),
        (
            lambda g: _unbroadcast(g * mask, a.data.shape),
            lambda g: _unbroadcast(g * ~mask, b.data.shape),
        ),
    )


def clip(a, lo, hi) -> Tensor:
    a = astensor(a)
    inside = (a.data > lo) & (a.data < hi) if hi is not None else (a.data > lo)
    return Tensor._make(np.clip(a.data, lo, hi), (a,), (lambda g: g * inside,))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select by a constant boolean mask (the mask itself carries no gradient)."""
    a, b = astensor(a), astensor(b)
    cond = np.asarray(cond, dtype=bool)
    return Tensor._make(
        np.where(cond, a.data, b.data),
        (a, b),
        (
            lambda g: _unbroadcast(g * cond, a.data.shape),
            lambda g: _unbroadcast(g * ~cond, b.data.shape),
        ),
    )


# -- linear algebra / shape ----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)

    def grad_a(g):
        if b.data.ndim == 1:
            ga = np.multiply.outer(g, b.data) if a.data.ndim > 1 else g * b.data
        else:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.data.ndim > 1 else np.matmul(b.data, g)
        return _unbroadcast(ga, a.data.shape)

    def grad_b(g):
        if a.data.ndim == 1:
            gb = np.multiply.outer(a.data, g) if b.data.ndim > 1 else g * a.data
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.data.ndim > 1 else np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(gb, b.data.shape)

    return Tensor._make(np.matmul(a.data, b.data), (a, b), (grad_a, grad_b))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)

    def grad(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, a.data.shape).copy()

    return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), (grad,))


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def cumprod(a, axis: int) -> Tensor:
    """Cumulative product; backward requires nonzero inputs along `axis`."""
    a = astensor(a)
    out_data = np.cumprod(a.data, axis=axis)

    def grad(g):
        gy = g * out_data
        rev = np.flip(np.cumsum(np.flip(gy, axis=axis), axis=axis), axis=axis)
        return rev / a.data

    return Tensor._make(out_data, (a,), (grad,))


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    return Tensor._make(a.data.reshape(shape), (a,), (lambda g: g.reshape(a.data.shape),))


def transpose(a, axes=None) -> Tensor:
    a = astensor(a)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._make(
        np.transpose(a.data, axes),
        (a,),
        (lambda g: np.transpose(g, inv),),
    )


def getitem(a, idx) -> Tensor:
    a = astensor(a)
    adv = isinstance(idx, np.ndarray) or (
        isinstance(idx, tuple) and any(isinstance(i, np.ndarray) for i in idx)
    )

    def grad(g):
        out = np.zeros_like(a.data)
        if adv:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return out

    return Tensor._make(a.data[idx], (a,), (grad,))


def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_grad(i):
        sl = [slice(None)] * tensors[0].data.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        tuple(make_grad(i) for i in range(len(tensors))),
    )


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [astensor(t) for t in tensors]

    def make_grad(i):
        return lambda g: np.take(g, i, axis=axis)

    return Tensor._make(
        np.stack([t.data for t in tensors], axis=axis),
        tuple(tensors),
        tuple(make_grad(i) for i in range(len(tensors))),
    )


def take_along_axis(a, indices: np.ndarray, axis: int, inverse: np.ndarray | None = None) -> Tensor:
    """Gather along `axis` with constant integer indices.

    When `indices` is a permutation along `axis`, pass its inverse for a fast
    gather-based backward; otherwise the adjoint falls back to scatter-add.
    """
    a = astensor(a)

    if inverse is not None:
        grad = lambda g: np.take_along_axis(g, inverse, axis=axis)  # noqa: E731
    else:

        def grad(g):
            out = np.zeros_like(a.data)
            mesh = list(np.meshgrid(*[np.arange(s) for s in indices.shape], indexing="ij"))
            mesh[axis] = indices
            np.add.at(out, tuple(mesh), g)
            return out

    return Tensor._make(np.take_along_axis(a.data, indices, axis=axis), (a,), (grad,))


def inverse_permutation(perm: np.ndarray, axis: int = -1) -> np.ndarray:
    """Inverse of a batch of permutations along `axis` (plain ndarray helper)."""
    inv = np.empty_like(perm)
    np.put_along_axis(inv, perm, np.broadcast_to(np.arange(perm.shape[axis]),
                                                 perm.shape).copy(), axis=axis)
    return inv


def bincount(weights, ids: np.ndarray, size: int) -> Tensor:
    """Scatter-add `weights` into `size` buckets keyed by constant `ids`."""
    weights = astensor(weights)
    flat_ids = ids.ravel()

    def grad(g):
        return g[flat_ids].reshape(weights.data.shape)

    out = np.bincount(flat_ids, weights=weights.data.ravel(), minlength=size)
    return Tensor._make(out.astype(weights.data.dtype), (weights,), (grad,))
