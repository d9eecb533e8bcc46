"""Reverse-mode differentiation over scalar/vector expression graphs.

A `Tape` owns an append-only, topologically ordered list of `Node`s. Values
are computed eagerly at construction time, so shapes are always known; the
same tape is then reused across examples and optimizer steps by rebinding its
named inputs and calling `forward` again.

Two differentiation paths exist:

* `backward` runs a numeric reverse sweep and returns gradient arrays. It is
  used for parameter gradients at training time.
* `grad_as_graph` emits new nodes that *compute* a gradient, so losses may
  contain dH/dq and dH/dp as subgraphs, and `backward` through those nodes
  yields exact second-order derivatives. The emitted nodes are ordinary nodes:
  they re-evaluate on rebinding and can themselves be differentiated again.

Supported ops: constant, input, add, mul, neg, matvec, matvec_t, dot, tanh,
softplus, sigmoid, relu, step, exp, log, square, sum, reciprocal. `mul`
broadcasts a scalar against a vector; everything else is shape-strict.
`matvec_t` (W^T @ v, reusing the same matrix node) and `step` (the relu
subgradient, 0 at 0) exist so that emitted gradient graphs stay inside the op
set. Gradients with respect to matrix-valued nodes are numeric only.
"""

from __future__ import annotations

import numpy as np

from .core import NumericalError

__all__ = ["Node", "Tape"]


def _norm_value(v):
    """Scalars become python floats, vectors become float64 arrays."""
    a = np.asarray(v, dtype=np.float64)
    if a.ndim == 0:
        return float(a)
    return a


def _is_scalar(v) -> bool:
    return np.ndim(v) == 0


def _sigmoid(x):
    # Stable in both tails.
    return np.where(
        np.asarray(x) >= 0,
        1.0 / (1.0 + np.exp(-np.clip(x, 0, None))),
        np.exp(np.clip(x, None, 0)) / (1.0 + np.exp(np.clip(x, None, 0))),
    )


class Node:
    __slots__ = ("op", "parents", "value", "idx", "name")

    def __init__(self, op: str, parents: tuple, value, idx: int, name: str | None = None):
        self.op = op
        self.parents = parents
        self.value = value
        self.idx = idx
        self.name = name

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"<Node {self.idx} {self.op}{tag}>"


class Tape:
    """Expression graph with named, rebindable inputs."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}

    # ------------------------------------------------------------------ leaves

    def _append(self, op, parents, value, name=None) -> Node:
        node = Node(op, parents, value, len(self.nodes), name)
        self.nodes.append(node)
        return node

    def constant(self, value, name=None) -> Node:
        return self._append("constant", (), _norm_value(value), name)

    def input(self, name: str, value=None) -> Node:
        """Named bindable leaf. Repeated calls with the same name return the
        same node, so parameters shared across subgraphs accumulate gradients
        naturally."""
        if name in self.inputs:
            node = self.inputs[name]
            if value is not None:
                value = _norm_value(value)
                if np.shape(value) != np.shape(node.value):
                    raise ValueError(
                        f"input {name!r} bound with shape {np.shape(value)}, "
                        f"expected {np.shape(node.value)}"
                    )
                node.value = value
            return node
        if value is None:
            raise ValueError(f"first binding of input {name!r} must supply a value")
        node = self._append("input", (), _norm_value(value), name)
        self.inputs[name] = node
        return node

    # ------------------------------------------------------------- operations

    def add(self, a: Node, b: Node) -> Node:
        if np.shape(a.value) != np.shape(b.value):
            raise ValueError("add requires equal shapes")
        return self._append("add", (a, b), _norm_value(np.add(a.value, b.value)))

    def neg(self, a: Node) -> Node:
        return self._append("neg", (a,), _norm_value(np.negative(a.value)))

    def sub(self, a: Node, b: Node) -> Node:
        return self.add(a, self.neg(b))

    def mul(self, a: Node, b: Node) -> Node:
        sa, sb = np.shape(a.value), np.shape(b.value)
        if sa != sb and sa != () and sb != ():
            raise ValueError("mul requires equal shapes or a scalar operand")
        return self._append("mul", (a, b), _norm_value(np.multiply(a.value, b.value)))

    def matvec(self, w: Node, x: Node) -> Node:
        if np.ndim(w.value) != 2 or np.ndim(x.value) != 1:
            raise ValueError("matvec expects a matrix and a vector")
        if np.shape(w.value)[1] != len(x.value):
            raise ValueError("matvec shape mismatch")
        return self._append("matvec", (w, x), w.value @ x.value)

    def matvec_t(self, w: Node, v: Node) -> Node:
        if np.ndim(w.value) != 2 or np.ndim(v.value) != 1:
            raise ValueError("matvec_t expects a matrix and a vector")
        if np.shape(w.value)[0] != len(v.value):
            raise ValueError("matvec_t shape mismatch")
        return self._append("matvec_t", (w, v), w.value.T @ v.value)

    def dot(self, a: Node, b: Node) -> Node:
        if np.ndim(a.value) != 1 or np.ndim(b.value) != 1 or len(a.value) != len(b.value):
            raise ValueError("dot expects two equal-length vectors")
        return self._append("dot", (a, b), float(a.value @ b.value))

    def tanh(self, a: Node) -> Node:
        return self._append("tanh", (a,), _norm_value(np.tanh(a.value)))

    def softplus(self, a: Node) -> Node:
        return self._append("softplus", (a,), _norm_value(np.logaddexp(0.0, a.value)))

    def sigmoid(self, a: Node) -> Node:
        return self._append("sigmoid", (a,), _norm_value(_sigmoid(a.value)))

    def relu(self, a: Node) -> Node:
        return self._append("relu", (a,), _norm_value(np.maximum(a.value, 0.0)))

    def step(self, a: Node) -> Node:
        """Subgradient of relu: 1 where x > 0, else 0 (including at 0)."""
        return self._append("step", (a,), _norm_value(np.greater(a.value, 0.0).astype(float)))

    def exp(self, a: Node) -> Node:
        with np.errstate(over="ignore"):  # inf is caught by the output finiteness check
            return self._append("exp", (a,), _norm_value(np.exp(a.value)))

    def log(self, a: Node) -> Node:
        if np.any(np.asarray(a.value) <= 0.0):
            raise NumericalError("log of non-positive value")
        return self._append("log", (a,), _norm_value(np.log(a.value)))

    def square(self, a: Node) -> Node:
        return self._append("square", (a,), _norm_value(np.square(a.value)))

    def sum(self, a: Node) -> Node:
        if np.ndim(a.value) != 1:
            raise ValueError("sum expects a vector")
        return self._append("sum", (a,), float(np.sum(a.value)))

    def reciprocal(self, a: Node) -> Node:
        if np.any(np.asarray(a.value) == 0.0):
            raise NumericalError("reciprocal of zero")
        return self._append("reciprocal", (a,), _norm_value(np.reciprocal(a.value)))

    def scale(self, c: float, a: Node) -> Node:
        """Convenience: constant * node."""
        return self.mul(self.constant(c), a)

    # ------------------------------------------------------------- evaluation

    def bind(self, values: dict):
        for name, value in values.items():
            if name not in self.inputs:
                raise KeyError(f"unknown input {name!r}")
            node = self.inputs[name]
            value = _norm_value(value)
            if np.shape(value) != np.shape(node.value):
                raise ValueError(
                    f"input {name!r} bound with shape {np.shape(value)}, "
                    f"expected {np.shape(node.value)}"
                )
            node.value = value

    def forward(self, output: Node | None = None, bindings: dict | None = None):
        """Re-evaluate the whole tape in order; returns `output`'s value.

        Raises NumericalError if the requested output is non-finite.
        """
        if bindings:
            self.bind(bindings)
        for n in self.nodes:
            op = n.op
            if op == "constant" or op == "input":
                continue
            pa = n.parents
            if op == "add":
                n.value = _norm_value(np.add(pa[0].value, pa[1].value))
            elif op == "mul":
                n.value = _norm_value(np.multiply(pa[0].value, pa[1].value))
            elif op == "neg":
                n.value = _norm_value(np.negative(pa[0].value))
            elif op == "matvec":
                n.value = pa[0].value @ pa[1].value
            elif op == "matvec_t":
                n.value = pa[0].value.T @ pa[1].value
            elif op == "dot":
                n.value = float(pa[0].value @ pa[1].value)
            elif op == "tanh":
                n.value = _norm_value(np.tanh(pa[0].value))
            elif op == "softplus":
                n.value = _norm_value(np.logaddexp(0.0, pa[0].value))
            elif op == "sigmoid":
                n.value = _norm_value(_sigmoid(pa[0].value))
            elif op == "relu":
                n.value = _norm_value(np.maximum(pa[0].value, 0.0))
            elif op == "step":
                n.value = _norm_value(np.greater(pa[0].value, 0.0).astype(float))
            elif op == "exp":
                with np.errstate(over="ignore"):
                    n.value = _norm_value(np.exp(pa[0].value))
            elif op == "log":
                v = pa[0].value
                if np.any(np.asarray(v) <= 0.0):
                    raise NumericalError("log of non-positive value")
                n.value = _norm_value(np.log(v))
            elif op == "square":
                n.value = _norm_value(np.square(pa[0].value))
            elif op == "sum":
                n.value = float(np.sum(pa[0].value))
            elif op == "reciprocal":
                v = pa[0].value
                if np.any(np.asarray(v) == 0.0):
                    raise NumericalError("reciprocal of zero")
                n.value = _norm_value(np.reciprocal(v))
            else:  # pragma: no cover
                raise ValueError(f"unknown op {op!r}")
        if output is not None:
            if not np.all(np.isfinite(output.value)):
                raise NumericalError("forward produced a non-finite output")
            return output.value
        return None

    def validate_finite(self):
        """Debug check of the graph invariant that every value is finite."""
        for n in self.nodes:
            if not np.all(np.isfinite(n.value)):
                raise NumericalError(f"non-finite value at node {n!r}")

    # ------------------------------------------------------- numeric backward

    def backward(self, output: Node, wrt) -> list:
        """Exact reverse-mode gradients of scalar `output` w.r.t. `wrt` nodes.

        Accumulators start at zero on every call. Returns one gradient per
        requested node (zeros where no path exists).
        """
        if not _is_scalar(output.value):
            raise ValueError("backward requires a scalar output")
        wrt_nodes = list(wrt)
        adj: list = [None] * (output.idx + 1)
        adj[output.idx] = 1.0

        def acc(node: Node, contribution):
            cur = adj[node.idx]
            if cur is None:
                adj[node.idx] = contribution
            else:
                adj[node.idx] = cur + contribution

        for i in range(output.idx, -1, -1):
            u = adj[i]
            if u is None:
                continue
            n = self.nodes[i]
            op = n.op
            if op in ("constant", "input", "step"):
                continue
            pa = n.parents
            if op == "add":
                acc(pa[0], u)
                acc(pa[1], u)
            elif op == "neg":
                acc(pa[0], -u)
            elif op == "mul":
                a, b = pa
                ga = u * np.asarray(b.value)
                gb = u * np.asarray(a.value)
                acc(a, float(np.sum(ga)) if _is_scalar(a.value) else ga)
                acc(b, float(np.sum(gb)) if _is_scalar(b.value) else gb)
            elif op == "matvec":
                w, x = pa
                acc(w, np.outer(u, x.value))
                acc(x, w.value.T @ u)
            elif op == "matvec_t":
                w, v = pa
                acc(w, np.outer(v.value, u))
                acc(v, w.value @ u)
            elif op == "dot":
                a, b = pa
                acc(a, u * np.asarray(b.value))
                acc(b, u * np.asarray(a.value))
            elif op == "tanh":
                acc(pa[0], u * (1.0 - np.square(n.value)))
            elif op == "softplus":
                acc(pa[0], u * _sigmoid(pa[0].value))
            elif op == "sigmoid":
                acc(pa[0], u * np.asarray(n.value) * (1.0 - np.asarray(n.value)))
            elif op == "relu":
                acc(pa[0], u * np.greater(pa[0].value, 0.0))
            elif op == "exp":
                acc(pa[0], u * np.asarray(n.value))
            elif op == "log":
                acc(pa[0], u / np.asarray(pa[0].value))
            elif op == "square":
                acc(pa[0], u * 2.0 * np.asarray(pa[0].value))
            elif op == "sum":
                acc(pa[0], u * np.ones_like(pa[0].value))
            elif op == "reciprocal":
                acc(pa[0], -u * np.square(n.value))
            else:  # pragma: no cover
                raise ValueError(f"unknown op {op!r}")

        out = []
        for node in wrt_nodes:
            g = adj[node.idx] if node.idx <= output.idx else None
            if g is None:
                g = 0.0 if _is_scalar(node.value) else np.zeros_like(node.value)
            out.append(g)
        return out

    def gradients(self, output: Node, names) -> dict:
        """backward keyed by input names."""
        nodes = [self.inputs[n] for n in names]
        grads = self.backward(output, nodes)
        return dict(zip(names, grads))

    # ------------------------------------------------------ symbolic backward

    def _ancestors(self, node: Node) -> set:
        seen = {node.idx}
        stack = [node]
        while stack:
            n = stack.pop()
            for p in n.parents:
                if p.idx not in seen:
                    seen.add(p.idx)
                    stack.append(p)
        return seen

    def _descendants(self, roots, up_to: int) -> set:
        root_idx = {r.idx for r in roots}
        seen = set(root_idx)
        for i in range(up_to + 1):
            n = self.nodes[i]
            if n.idx in seen:
                continue
            if any(p.idx in seen for p in n.parents):
                seen.add(n.idx)
        return seen

    def grad_as_graph(self, output: Node, inputs) -> list[Node]:
        """Emit nodes computing d(output)/d(input) for each requested input.

        Only the subgraph between the inputs and the output is differentiated;
        inputs with no path to the output get a zero constant. The requested
        inputs must be scalar- or vector-valued (matrix leaves are handled by
        the numeric `backward` only).
        """
        if not _is_scalar(output.value):
            raise ValueError("grad_as_graph requires a scalar output")
        in_nodes = list(inputs)
        for node in in_nodes:
            if np.ndim(node.value) > 1:
                raise ValueError("symbolic gradients w.r.t. matrix nodes are not supported")
        active = self._ancestors(output) & self._descendants(in_nodes, output.idx)

        adj: dict[int, Node] = {output.idx: self.constant(1.0)}

        def acc(node: Node, contribution: Node):
            cur = adj.get(node.idx)
            adj[node.idx] = contribution if cur is None else self.add(cur, contribution)

        def times_u(u: Node, factor: Node, target: Node) -> Node:
            # u * factor, collapsed to a scalar when the target is scalar.
            if _is_scalar(target.value) and not _is_scalar(u.value):
                return self.dot(u, factor)
            return self.mul(u, factor)

        for i in range(output.idx, -1, -1):
            if i not in adj or i not in active:
                continue
            u = adj[i]
            n = self.nodes[i]
            op = n.op
            if op in ("constant", "input", "step"):
                continue
            pa = n.parents

            def wants(p: Node) -> bool:
                return p.idx in active

            if op == "add":
                for p in pa:
                    if wants(p):
                        acc(p, u)
            elif op == "neg":
                if wants(pa[0]):
                    acc(pa[0], self.neg(u))
            elif op == "mul":
                a, b = pa
                if wants(a):
                    acc(a, times_u(u, b, a))
                if wants(b):
                    acc(b, times_u(u, a, b))
            elif op == "matvec":
                w, x = pa
                if wants(w):
                    raise ValueError("symbolic gradient through a matrix operand is unsupported")
                if wants(x):
                    acc(x, self.matvec_t(w, u))
            elif op == "matvec_t":
                w, v = pa
                if wants(w):
                    raise ValueError("symbolic gradient through a matrix operand is unsupported")
                if wants(v):
                    acc(v, self.matvec(w, u))
            elif op == "dot":
                a, b = pa
                if wants(a):
                    acc(a, self.mul(u, b))
                if wants(b):
                    acc(b, self.mul(u, a))
            elif op == "tanh":
                if wants(pa[0]):
                    ones = self.constant(np.ones_like(n.value))
                    acc(pa[0], self.mul(u, self.add(ones, self.neg(self.square(n)))))
            elif op == "softplus":
                if wants(pa[0]):
                    acc(pa[0], self.mul(u, self.sigmoid(pa[0])))
            elif op == "sigmoid":
                if wants(pa[0]):
                    ones = self.constant(np.ones_like(n.value))
                    acc(pa[0], self.mul(u, self.mul(n, self.add(ones, self.neg(n)))))
            elif op == "relu":
                if wants(pa[0]):
                    acc(pa[0], self.mul(u, self.step(pa[0])))
            elif op == "exp":
                if wants(pa[0]):
                    acc(pa[0], self.mul(u, n))
            elif op == "log":
                if wants(pa[0]):
                    acc(pa[0], self.mul(u, self.reciprocal(pa[0])))
            elif op == "square":
                if wants(pa[0]):
                    acc(pa[0], self.mul(u, self.scale(2.0, pa[0])))
            elif op == "sum":
                if wants(pa[0]):
                    acc(pa[0], self.mul(u, self.constant(np.ones_like(pa[0].value))))
            elif op == "reciprocal":
                if wants(pa[0]):
                    acc(pa[0], self.neg(self.mul(u, self.square(n))))
            else:  # pragma: no cover
                raise ValueError(f"unknown op {op!r}")

        out = []
        for node in in_nodes:
            g = adj.get(node.idx)
            if g is None:
                g = self.constant(
                    0.0 if _is_scalar(node.value) else np.zeros_like(node.value)
                )
            out.append(g)
        return out
