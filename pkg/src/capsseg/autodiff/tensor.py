"""Dense tensor with a define-by-run reverse-mode graph.

Every differentiable operation returns a new :class:`Tensor` whose
``_backward`` closure maps the output gradient to one gradient per parent.
The graph is rebuilt on each forward pass and never cached.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its contract."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional float array that records how it was computed.

    Leaves created with ``requires_grad=True`` receive ``.grad`` after
    :func:`backward`. Intermediate nodes keep only their parents and a
    backward closure.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, _copy: bool = False):
        arr = np.array(data, dtype=DTYPE) if _copy else np.asarray(data, dtype=DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    # basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar, implemented in functional ------------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __pow__(self, p):
        from . import functional as F
        return F.power(self, p)

    def __getitem__(self, idx):
        from . import functional as F
        return F.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``data`` as the output of an operation over ``parents``."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def create(shape: Sequence[int], init: str = "zeros", *, value: float = 0.0, seed: Optional[int] = None,
           low: float = 0.0, high: float = 1.0, mean: float = 0.0, std: float = 1.0,
           requires_grad: bool = False) -> Tensor:
    """Allocate a tensor with a deterministic initializer.

    ``init`` is one of ``zeros``, ``constant``, ``uniform``, ``normal``.
    The stochastic initializers require an explicit ``seed``.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: every extent must be >= 1")
    if init == "zeros":
        data = np.zeros(shape, dtype=DTYPE)
    elif init == "constant":
        data = np.full(shape, value, dtype=DTYPE)
    elif init in ("uniform", "normal"):
        if seed is None:
            raise ContractError(f"{init} initialization requires an explicit seed")
        rng = np.random.default_rng(seed)
        if init == "uniform":
            data = rng.uniform(low, high, size=shape)
        else:
            data = rng.normal(mean, std, size=shape)
    else:
        raise ValueError(f"unknown initializer {init!r}")
    return Tensor(data, requires_grad=requires_grad)


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order: list = []
    seen: set = set()
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


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> dict:
    """Propagate gradients from a scalar ``loss`` to every reachable leaf.

    Leaf gradients accumulate into ``.grad`` across calls; callers reset
    them between steps. Returns ``{leaf: grad}`` for the leaves reached.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return {}
    order = topological_order(loss)
    grads = {id(loss): np.asarray(grad, dtype=DTYPE)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
