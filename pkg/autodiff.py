"""
Autodiff Module
Minimal reverse-mode automatic differentiation over float64 numpy arrays

A Tape records every DiffNode in creation order together with the
vector-Jacobian product of the operation that produced it. backward() walks
the tape in reverse creation order, which is a valid reverse topological
order because a node can only be created after its parents. stop_gradient()
produces a node whose value passes through unchanged but which never hands
adjoint back to its ancestors.

One tape is built per loss evaluation and released after backward.
Inference code uses Tape(record=False) so that nothing is kept.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

Vjp = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
Operand = Union["DiffNode", float, int, np.ndarray]

_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


@dataclass(eq=False)
class DiffNode:
    """
    A value on a tape

    Attributes:
        id: position of the node on its tape
        value: read-only float64 array
        op: name of the producing operation
        parents: ids of the operand nodes
        grad_blocked: True for stop-gradient nodes
    """
    id: int
    value: np.ndarray
    op: str
    parents: Tuple[int, ...] = ()
    grad_blocked: bool = False
    tape: Optional["Tape"] = field(default=None, repr=False)
    vjp: Optional[Vjp] = field(default=None, repr=False)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other: Operand) -> "DiffNode":
        return add(self, other)

    def __radd__(self, other: Operand) -> "DiffNode":
        return add(other, self)

    def __sub__(self, other: Operand) -> "DiffNode":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "DiffNode":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "DiffNode":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "DiffNode":
        return mul(other, self)

    def __neg__(self) -> "DiffNode":
        return mul(self, -1.0)


class Tape:
    """
    Ordered record of DiffNodes for one loss evaluation

    Args:
        record: when False, nodes are produced but nothing is stored, so
            backward is unavailable (inference mode)
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes = []
        self.leaf_names: Dict[int, str] = {}
        self._ids = itertools.count()

    def _new(self, value: np.ndarray, op: str, parents: Sequence[DiffNode] = (),
             vjp: Optional[Vjp] = None, grad_blocked: bool = False) -> DiffNode:
        value = np.array(value, dtype=np.float64)
        value.flags.writeable = False
        node = DiffNode(
            id=next(self._ids) if self.record else -1,
            value=value,
            op=op,
            parents=tuple(p.id for p in parents),
            grad_blocked=grad_blocked,
            tape=self,
            vjp=vjp if self.record else None,
        )
        if self.record:
            self.nodes.append(node)
        return node

    def leaf(self, value, name: Optional[str] = None) -> DiffNode:
        """Register a differentiable input (a parameter or a probe point)"""
        node = self._new(value, "leaf")
        if self.record:
            self.leaf_names[node.id] = name or f"leaf{node.id}"
        return node

    def constant(self, value) -> DiffNode:
        return self._new(value, "const")

    def release(self):
        """Drop all recorded nodes and their closures; ids restart at 0"""
        self.nodes = []
        self.leaf_names = {}
        self._ids = itertools.count()

    def __len__(self) -> int:
        return len(self.nodes)


def _lift(tape: Tape, x: Operand) -> DiffNode:
    if isinstance(x, DiffNode):
        return x
    return tape.constant(x)


def _pair(a: Operand, b: Operand) -> Tuple[DiffNode, DiffNode]:
    tape = a.tape if isinstance(a, DiffNode) else getattr(b, "tape", None)
    if tape is None:
        raise TypeError("at least one operand must be a DiffNode")
    return _lift(tape, a), _lift(tape, b)


def _check_broadcast(op: str, a: DiffNode, b: DiffNode):
    """Allow equal shapes, a scalar operand, or a row vector against a matrix"""
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0]:
        return
    if len(sb) == 2 and len(sa) == 1 and sb[1] == sa[0]:
        return
    raise ShapeError(op, sa, sb)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    return grad.sum(axis=0)


def _result_shape(a: DiffNode, b: DiffNode) -> Tuple[int, ...]:
    return a.shape if len(a.shape) >= len(b.shape) else b.shape


# ===== ELEMENTWISE =====

def add(a: Operand, b: Operand) -> DiffNode:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return a.tape._new(a.value + b.value, "add", (a, b), vjp)


def sub(a: Operand, b: Operand) -> DiffNode:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return a.tape._new(a.value - b.value, "sub", (a, b), vjp)


def mul(a: Operand, b: Operand) -> DiffNode:
    """Elementwise product (a scalar operand scales the other one)"""
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return a.tape._new(av * bv, "mul", (a, b), vjp)


def tanh(a: DiffNode) -> DiffNode:
    y = np.tanh(a.value)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return a.tape._new(y, "tanh", (a,), vjp)


def gelu(a: DiffNode) -> DiffNode:
    """Gaussian-error linear unit, tanh form (smooth everywhere)"""
    x = a.value
    inner = _GELU_K * (x + _GELU_C * x ** 3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def vjp(g):
        d_inner = _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
        dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner
        return (g * dy,)

    return a.tape._new(y, "gelu", (a,), vjp)


ACTIVATIONS = {"gelu": gelu, "tanh": tanh}


# ===== LINEAR ALGEBRA =====

def matmul(a: Operand, b: Operand) -> DiffNode:
    """Matrix-matrix or matrix-vector product"""
    a, b = _pair(a, b)
    if a.value.ndim != 2 or b.value.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value

    def vjp(g):
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return a.tape._new(av @ bv, "matmul", (a, b), vjp)


def matvec(w: Operand, v: Operand) -> DiffNode:
    w, v = _pair(w, v)
    if v.value.ndim != 1:
        raise ShapeError("matvec", w.shape, v.shape)
    return matmul(w, v)


def transpose(a: DiffNode) -> DiffNode:
    if a.value.ndim != 2:
        raise ShapeError("transpose", a.shape, ("m", "n"))

    def vjp(g):
        return (g.T,)

    return a.tape._new(a.value.T, "transpose", (a,), vjp)


# ===== REDUCTIONS =====

def sum_all(a: DiffNode) -> DiffNode:
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._new(a.value.sum(), "sum", (a,), vjp)


def mean(a: DiffNode) -> DiffNode:
    shape = a.shape
    n = max(a.value.size, 1)

    def vjp(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return a.tape._new(a.value.mean(), "mean", (a,), vjp)


def sq_l2(a: DiffNode) -> DiffNode:
    """Squared L2 norm over all entries"""
    x = a.value

    def vjp(g):
        return (2.0 * g * x,)

    return a.tape._new(np.sum(x * x), "sq_l2", (a,), vjp)


# ===== STRUCTURAL =====

def concat(nodes: Sequence[DiffNode], axis: int = -1) -> DiffNode:
    """Concatenate along the last axis (all operands share the leading shape)"""
    nodes = list(nodes)
    lead = nodes[0].shape[:-1]
    for n in nodes[1:]:
        if n.shape[:-1] != lead:
            raise ShapeError("concat", nodes[0].shape, n.shape)
    widths = [n.shape[-1] for n in nodes]
    cuts = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=-1))

    value = np.concatenate([n.value for n in nodes], axis=-1)
    return nodes[0].tape._new(value, "concat", nodes, vjp)


def take_rows(table: DiffNode, index: np.ndarray) -> DiffNode:
    """Embedding lookup: rows of a 2-D table selected by an integer index array"""
    index = np.asarray(index, dtype=np.int64)
    if table.value.ndim != 2:
        raise ShapeError("take_rows", table.shape, index.shape)
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return table.tape._new(table.value[index], "take_rows", (table,), vjp)


def tile_rows(v: DiffNode, n: int) -> DiffNode:
    """Stack a vector n times into an (n, len) matrix"""
    if v.value.ndim != 1:
        raise ShapeError("tile_rows", v.shape, (n,))

    def vjp(g):
        return (g.sum(axis=0),)

    return v.tape._new(np.tile(v.value, (n, 1)), "tile_rows", (v,), vjp)


def stop_gradient(x: DiffNode) -> DiffNode:
    """Identity on values; blocks all adjoint flow into x and its ancestors"""
    return x.tape._new(x.value, "stop_gradient", (x,), None, grad_blocked=True)


# ===== REVERSE SWEEP =====

def backward(root: DiffNode, free: bool = True) -> Dict[int, np.ndarray]:
    """
    Reverse-mode sweep from a scalar root

    Args:
        root: scalar node on a recording tape
        free: release the tape afterwards

    Returns:
        Gradient of root with respect to every leaf on the tape, keyed by leaf id
    """
    if root.value.shape != ():
        raise ShapeError("backward", root.shape, ())
    tape = root.tape
    if tape is None or not tape.record:
        raise ValueError("backward needs a recording tape")

    adjoint: Dict[int, np.ndarray] = {root.id: np.ones(())}
    for node in reversed(tape.nodes[: root.id + 1]):
        g = adjoint.get(node.id)
        if g is None or node.grad_blocked or node.vjp is None:
            continue
        for parent_id, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            if parent_id in adjoint:
                adjoint[parent_id] = adjoint[parent_id] + pg
            else:
                adjoint[parent_id] = pg

    grads = {}
    for leaf_id in tape.leaf_names:
        leaf = tape.nodes[leaf_id]
        grads[leaf_id] = np.array(adjoint.get(leaf_id, np.zeros(leaf.shape)), dtype=np.float64).reshape(leaf.shape)
    if free:
        tape.release()
    return grads


# ===== GRADIENT CHECK =====

ScalarFn = Callable[[Tape, Union[DiffNode, Mapping[str, DiffNode]]], DiffNode]


def _evaluate(f: ScalarFn, params: Mapping[str, np.ndarray], single: bool) -> float:
    tape = Tape(record=False)
    leaves = {k: tape.constant(v) for k, v in params.items()}
    out = f(tape, leaves["x"] if single else leaves)
    return float(out.value)


def grad_check(f: ScalarFn, x: Union[np.ndarray, float, Mapping[str, np.ndarray]],
               eps: float = 1e-5, numeric_f: Optional[ScalarFn] = None) -> float:
    """
    Compare backward() against central differences

    Args:
        f: builds a scalar node from a tape and the probe leaf (or a dict of
           named leaves when x is a mapping)
        x: probe point
        eps: finite-difference step
        numeric_f: function differenced numerically instead of f (used to
           check stop-gradient against a frozen surrogate)

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|)
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    single = not isinstance(x, Mapping)
    params = {"x": np.array(x, dtype=np.float64)} if single else {
        k: np.array(v, dtype=np.float64) for k, v in x.items()}

    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    root = f(tape, leaves["x"] if single else leaves)
    leaf_ids = {k: n.id for k, n in leaves.items()}
    grads = backward(root)
    numeric = numeric_f or f

    worst = 0.0
    for name, arr in params.items():
        analytic = grads[leaf_ids[name]]
        if not np.all(np.isfinite(analytic)):
            raise NonFiniteError(f"non-finite analytic gradient for {name}")
        for idx in np.ndindex(arr.shape):
            probe = dict(params)
            plus = arr.copy()
            plus[idx] += eps
            probe[name] = plus
            f_plus = _evaluate(numeric, probe, single)
            minus = arr.copy()
            minus[idx] -= eps
            probe[name] = minus
            f_minus = _evaluate(numeric, probe, single)
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"non-finite function value near {name}{list(idx)}")
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[idx])
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    logger.debug(f"grad_check over {sum(a.size for a in params.values())} coordinates: {worst:.3e}")
    return worst

def leaves_for(tape: Tape, params: Mapping[str, np.ndarray]) -> Dict[str, DiffNode]:
    return {name: tape.leaf(value, name=name) for name, value in params.items()}


def all_finite(arrays: Iterable[np.ndarray]) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)
