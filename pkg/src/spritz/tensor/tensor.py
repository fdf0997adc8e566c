"""Dense float64 tensor with a reverse-mode gradient tape."""
import numpy as np


class GraphError(RuntimeError):
    """Raised for misuse of the autodiff tape (e.g. backward before forward)."""


class ShapeError(ValueError):
    """Raised when an op receives an input of the wrong shape."""


class Tensor:
    """n-d array of float64 scalars plus an optional gradient slot.

    Tensors produced by ops remember their parents and a closure that
    pushes ``self.grad`` into them; :meth:`backward` replays those closures
    in reverse topological order.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, seed=None):
        """Backpropagate from this tensor.

        ``seed`` defaults to 1.0, which requires the tensor to be a scalar.
        """
        if seed is None:
            if self.data.size != 1:
                raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
            seed = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.broadcast_to(np.asarray(seed, dtype=np.float64), self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def make_result(data, parents, backward):
    """Wrap ``data`` as an op output wired into the tape."""
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)
