"""Reverse-mode differentiation over a tape of tensor operations.

A :class:`Tape` records contractions, sums, scalings, norms and inner
products as they are evaluated.  :meth:`Tape.backward` walks the records in
reverse and accumulates the adjoint of every node: each contraction operand
receives the contraction of the upstream adjoint with all remaining operands,
i.e. its environment.

Decompositions never appear on the tape; tensors produced by them enter as
fresh leaves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .tensor import ContractionSpec, contract, norm, pairwise_plan


@dataclass(eq=False)
class Node:
    owner: object  # token of the recording tape (no back-reference, no cycle)
    index: int
    kind: str
    parents: tuple["Node", ...]
    arg: Any
    value: np.ndarray
    requires_grad: bool
    name: str = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.index}, {self.kind}{label}, shape={self.shape})"


class Adjoints:
    """Adjoint tensors keyed by node; unreached nodes read as zeros."""

    def __init__(self, store: dict[int, np.ndarray], nodes: list[Node]):
        self._store = store
        self._nodes = nodes

    def __getitem__(self, node: Node) -> np.ndarray:
        got = self._store.get(node.index)
        if got is None:
            return np.zeros(node.shape)
        return got

    def __contains__(self, node: Node) -> bool:
        return node.index in self._store


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    token: object = field(default_factory=object, repr=False)

    def _push(self, kind, parents, arg, value, name="") -> Node:
        req = kind == "leaf" and bool(arg) or any(p.requires_grad for p in parents)
        node = Node(self.token, len(self.nodes), kind, tuple(parents), arg,
                    np.asarray(value, dtype=np.float64), req, name)
        self.nodes.append(node)
        return node

    # leaves
    def variable(self, value: np.ndarray, name: str = "") -> Node:
        return self._push("leaf", (), True, np.array(value, dtype=np.float64), name)

    def constant(self, value: np.ndarray, name: str = "") -> Node:
        return self._push("leaf", (), False, np.array(value, dtype=np.float64), name)

    # recorded operations
    def contract(self, subscripts: str, *operands: Node) -> Node:
        """Record a contraction.

        Three or more operands are recorded as a chain of pairwise steps so
        that the backward pass reuses the intermediates.
        """
        self._own(operands)
        subscripts = str(subscripts)
        if len(operands) <= 2:
            value = contract(subscripts, *(op.value for op in operands))
            return self._push("contract", operands, subscripts, value)
        plan = pairwise_plan(subscripts, tuple(op.shape for op in operands))
        current = list(operands)
        for i, j, sub in plan:
            a, b = current[i], current[j]
            node = self._push("contract", (a, b), sub, contract(sub, a.value, b.value))
            current = [n for k, n in enumerate(current) if k not in (i, j)] + [node]
        (result,) = current
        if result in operands:
            # degenerate plan (single operand); keep a distinct node
            result = self.scale(result, 1.0)
        return result

    def add(self, *terms: Node) -> Node:
        self._own(terms)
        value = terms[0].value.copy()
        for t in terms[1:]:
            if t.shape != value.shape:
                raise ValueError(f"cannot add shapes {value.shape} and {t.shape}")
            value = value + t.value
        return self._push("add", terms, None, value)

    def scale(self, node: Node, c: float) -> Node:
        self._own((node,))
        return self._push("scale", (node,), float(c), c * node.value)

    def norm(self, node: Node) -> Node:
        self._own((node,))
        return self._push("norm", (node,), None, np.array(norm(node.value)))

    def inner(self, a: Node, b: Node) -> Node:
        """Trace inner product: sum of elementwise products."""
        self._own((a, b))
        if a.shape != b.shape:
            raise ValueError(f"inner product of shapes {a.shape} and {b.shape}")
        return self._push("inner", (a, b), None, np.array(np.sum(a.value * b.value)))

    def _own(self, nodes) -> None:
        for n in nodes:
            if not isinstance(n, Node) or n.owner is not self.token:
                raise ValueError("operand is not a node of this tape")

    def backward(self, loss: Node) -> Adjoints:
        if loss.value.ndim != 0:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        adj: dict[int, np.ndarray] = {loss.index: np.array(1.0)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = adj.get(node.index)
            if g is None or node.kind == "leaf":
                continue
            for parent, contrib in _vjp(node, g):
                if not parent.requires_grad:
                    continue
                prev = adj.get(parent.index)
                adj[parent.index] = contrib if prev is None else prev + contrib
        return Adjoints(adj, self.nodes)

    def replay(self, overrides: dict[Node, np.ndarray]) -> list[np.ndarray]:
        """Re-evaluate every node with some leaf values replaced."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.kind == "leaf":
                v = overrides.get(node, node.value)
            else:
                args = [values[p.index] for p in node.parents]
                v = _FORWARD[node.kind](node, args)
            values.append(np.asarray(v, dtype=np.float64))
        return values


def _add_forward(node, args):
    out = args[0].copy()
    for a in args[1:]:
        out = out + a
    return out


_FORWARD: dict[str, Callable] = {
    "contract": lambda node, args: contract(node.arg, *args),
    "add": _add_forward,
    "scale": lambda node, args: node.arg * args[0],
    "norm": lambda node, args: np.array(norm(args[0])),
    "inner": lambda node, args: np.array(np.sum(args[0] * args[1])),
}


def _vjp(node: Node, g: np.ndarray):
    kind = node.kind
    if kind == "add":
        return [(p, g) for p in node.parents]
    if kind == "scale":
        return [(node.parents[0], node.arg * g)]
    if kind == "norm":
        (x,) = node.parents
        n = float(node.value)
        if n == 0.0:
            return [(x, np.zeros(x.shape))]
        return [(x, g * x.value / n)]
    if kind == "inner":
        a, b = node.parents
        return [(a, g * b.value), (b, g * a.value)]
    if kind == "contract":
        spec = ContractionSpec.parse(node.arg)
        out = []
        for i, parent in enumerate(node.parents):
            if not parent.requires_grad:
                continue
            others = [j for j in range(len(node.parents)) if j != i]
            sub = ",".join([spec.inputs[j] for j in others] + [spec.output])
            sub += "->" + spec.inputs[i]
            env = contract(sub, *[node.parents[j].value for j in others], g)
            out.append((parent, env))
        return out
    raise ValueError(f"no derivative rule for {kind!r}")


def grad_check(tape: Tape, loss: Node, node: Node, step: float = 1e-6) -> float:
    """Largest deviation between the adjoint of a leaf and central differences."""
    if step <= 0:
        raise ValueError("step must be positive")
    if node.kind != "leaf":
        raise ValueError("grad_check perturbs leaf nodes only")
    adjoint = tape.backward(loss)[node]
    base = node.value
    fd = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        plus[idx] += step
        minus = base.copy()
        minus[idx] -= step
        fp = tape.replay({node: plus})[loss.index]
        fm = tape.replay({node: minus})[loss.index]
        fd[idx] = (float(fp) - float(fm)) / (2 * step)
    return float(np.max(np.abs(adjoint - fd))) if base.size else 0.0


class Eager:
    """Tape-compatible operations on raw arrays (nothing recorded)."""

    @staticmethod
    def contract(subscripts, *operands):
        return contract(subscripts, *operands)

    @staticmethod
    def add(*terms):
        out = terms[0]
        for t in terms[1:]:
            out = out + t
        return out

    @staticmethod
    def scale(x, c):
        return c * x

    @staticmethod
    def norm(x):
        return np.array(norm(x))

    @staticmethod
    def inner(a, b):
        return np.array(np.sum(a * b))


EAGER = Eager()


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x)
