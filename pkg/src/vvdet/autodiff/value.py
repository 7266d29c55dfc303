"""Dense double-precision tensors with reverse-mode gradients."""
import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op, *shapes, detail=""):
        dims = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {dims}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class Value:
    """A node in the computation graph.

    ``grad`` is allocated lazily on the first backward pass that reaches the
    node. Leaves accumulate gradients across calls to :meth:`backward`;
    intermediate nodes are reset at the start of each pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _op="", name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(_parents)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in self._parents)
        self.op = _op
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Value{tag}(shape={self.shape}, op={self.op or 'leaf'})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def _topo(self):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return order

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward", self.shape, detail="loss must be a scalar")
        if not self.requires_grad:
            return
        order = self._topo()
        for node in order:
            if node._parents:
                node.grad = None
        self._accum(np.ones(self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from vvdet.autodiff import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from vvdet.autodiff import ops
        return ops.add(self, ops.neg(as_value(other)))

    def __rsub__(self, other):
        from vvdet.autodiff import ops
        return ops.add(as_value(other), ops.neg(self))

    def __mul__(self, other):
        from vvdet.autodiff import ops
        if np.isscalar(other):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from vvdet.autodiff import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from vvdet.autodiff import ops
        return ops.matmul(self, other)

    def sum(self):
        from vvdet.autodiff import ops
        return ops.sum(self)

    def mean(self):
        from vvdet.autodiff import ops
        return ops.mean(self)


def as_value(x):
    return x if isinstance(x, Value) else Value(x)
