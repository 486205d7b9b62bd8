"""Tape-free reverse-mode autodiff over numpy arrays.

Each op builds a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to one gradient per parent. ``backward`` walks
the graph in reverse topological order. Gradients of intermediate nodes are
dropped once consumed; leaf gradients accumulate in ``.grad``.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @classmethod
    def from_op(cls, data, parents, backward, op: str | None = None) -> "Tensor":
        """Result of an op; ``backward(g)`` returns one gradient (or None) per parent.

        ``op`` is stored as the node's name for graph inspection.
        """
        out = cls(data, name=op)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def _topo(self):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
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

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ValueError(f"grad shape {grad.shape} != tensor shape {self.data.shape}")
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(self._topo()):
            if node._backward is None or node.grad is None:
                continue
            g = node.grad
            node.grad = None
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise RuntimeError(f"internal: grad shape {pg.shape} for parent {parent.data.shape}")
                if pg.dtype != parent.data.dtype:
                    pg = pg.astype(parent.data.dtype)
                parent.grad = pg if parent.grad is None else parent.grad + pg
