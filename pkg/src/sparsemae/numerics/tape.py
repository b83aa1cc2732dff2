"""Minimal reverse-mode tape.

Nodes are appended to the tape in evaluation order, so the record is already a
topological order of the DAG; backward walks it once in reverse.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ConformanceError(ValueError):
    """Operand dimensions do not conform for an op."""


class Parameter:
    """A learnable tensor with its own gradient accumulator."""

    def __init__(self, value, name: str):
        self.value = np.array(value, copy=True)
        if self.value.dtype.kind != "f":
            self.value = self.value.astype(np.float32)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


class Node:
    __slots__ = ("value", "grad", "parents", "vjp", "tape", "param", "op")

    def __init__(self, tape: "Tape", value: np.ndarray, parents=(), vjp=None, op: str = "leaf"):
        self.tape = tape
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.parents: tuple = tuple(parents)
        self.vjp: Optional[Callable] = vjp
        self.param: Optional[Parameter] = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.value.shape})"


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self._bound: dict[int, Node] = {}

    def leaf(self, value, name: str = "leaf") -> Node:
        node = Node(self, np.asarray(value), op=name)
        self.nodes.append(node)
        return node

    def param(self, p: Parameter) -> Node:
        """Leaf node for ``p`` on this tape (created once, then reused)."""
        node = self._bound.get(id(p))
        if node is None:
            node = self.leaf(p.value, name=p.name)
            node.param = p
            self._bound[id(p)] = node
        return node

    def bind(self, p: Parameter, node: Node) -> None:
        """Use an existing node in place of ``p`` for the rest of this tape."""
        self._bound[id(p)] = node

    def record(self, value: np.ndarray, parents: Sequence[Node], vjp: Callable, op: str) -> Node:
        node = Node(self, value, parents, vjp, op)
        self.nodes.append(node)
        return node

    def backward(self, root: Node, cotangent=None) -> None:
        """Propagate ``cotangent`` (ones by default) from ``root`` to every node.

        Parameter leaves add their node gradient into ``Parameter.grad``.
        """
        if root.tape is not self:
            raise ValueError("root node belongs to a different tape")
        for node in self.nodes:
            node.grad = None
        seed = np.ones_like(root.value) if cotangent is None else np.asarray(cotangent, dtype=root.value.dtype)
        if seed.shape != root.value.shape:
            raise ConformanceError(f"cotangent dims {seed.shape} != output dims {root.value.shape}")
        root.grad = seed
        stop = self.nodes.index(root)
        for node in reversed(self.nodes[: stop + 1]):
            if node.grad is None or node.vjp is None:
                continue
            grads = node.vjp(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None:
                    continue
                if g.shape != parent.value.shape:
                    raise ConformanceError(
                        f"{node.op}: gradient dims {g.shape} != input dims {parent.value.shape}"
                    )
                parent.grad = g if parent.grad is None else parent.grad + g
        for node in self._bound.values():
            if node.param is not None and node.grad is not None:
                node.param.grad = node.param.grad + node.grad.astype(node.param.grad.dtype, copy=False)
