import numpy as np

from ..errors import ContractError, DimensionError

OP_KINDS = frozenset({
    "leaf", "affine", "conv1d", "relu", "sigmoid", "log_sigmoid", "softmax",
    "elementwise-product", "add", "sub", "neg", "scale", "concat", "sum",
    "mean", "log", "cosine", "euclidean-norm", "normalize", "lookup", "reshape", "clamp",
})


class Tensor:
    """A float64 array that remembers how it was computed.

    Leaves created with ``requires_grad=True`` are parameters; every op output
    keeps references to its parents and a closure that pushes its gradient
    back to them.  Gradients accumulate into ``grad`` until ``zero_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), op="leaf", backward=None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(1) if op == "leaf" else data
        self.data = data
        self.grad = None
        self.parents = parents
        self.op = op
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

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
            raise DimensionError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != value shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar; the real work lives in ops.py
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .ops import sub
        return sub(self, other)

    def __rsub__(self, other):
        from .ops import sub
        return sub(other, self)

    def __mul__(self, other):
        from .ops import mul, scale
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import neg
        return neg(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def parameter(data):
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


def topological_order(root):
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
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root):
    """Fill ``grad`` of every parameter reachable from the scalar ``root``."""
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = topological_order(root)
    root.accumulate(np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # drop intermediate buffers; leaves keep their accumulated gradient
    for node in order:
        if node.op != "leaf":
            node.grad = None
