"""Reverse-mode differentiation on an explicit tape of primitive ops.

A `Tape` records a computation as a topologically ordered list of primitive
operations (matmul, add, masked softmax, ...), each node saving its forward
value.  `backward` walks the tape once in reverse and returns exact
gradients of the recorded scalar with respect to every named parameter.
`replay` re-executes the forward pass from the records and checks that it
reproduces the saved values bit-exactly.

The primitive set is closed: model code must be composed from the functions
in this module.  Every primitive's forward calls the same numpy kernels as
the analytic inference path, so recorded values agree with direct
evaluation to the last bit.

`finite_diff` is the independent central-difference oracle used by the
verification suite; it never touches the tape machinery.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels as K
from .errors import TapeError

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Primitive registry: op name -> (forward, backward)
#
# forward(inputs, meta) -> value
# backward(grad_out, inputs, value, meta) -> one gradient per input (or None)

_OPS: dict[str, tuple[Callable, Callable]] = {}


def _op(name):
    def deco(pair):
        _OPS[name] = pair()
        return pair

    return deco


@_op("add")
def _add():
    fwd = lambda ins, meta: ins[0] + ins[1]
    bwd = lambda g, ins, out, meta: [
        _unbroadcast(g, ins[0].shape),
        _unbroadcast(g, ins[1].shape),
    ]
    return fwd, bwd


@_op("sub")
def _sub():
    fwd = lambda ins, meta: ins[0] - ins[1]
    bwd = lambda g, ins, out, meta: [
        _unbroadcast(g, ins[0].shape),
        _unbroadcast(-g, ins[1].shape),
    ]
    return fwd, bwd


@_op("mul")
def _mul():
    fwd = lambda ins, meta: ins[0] * ins[1]
    bwd = lambda g, ins, out, meta: [
        _unbroadcast(g * ins[1], ins[0].shape),
        _unbroadcast(g * ins[0], ins[1].shape),
    ]
    return fwd, bwd


@_op("scale")
def _scale():
    fwd = lambda ins, meta: meta["c"] * ins[0]
    bwd = lambda g, ins, out, meta: [meta["c"] * g]
    return fwd, bwd


@_op("neg")
def _neg():
    fwd = lambda ins, meta: -ins[0]
    bwd = lambda g, ins, out, meta: [-g]
    return fwd, bwd


@_op("matmul")
def _matmul():
    fwd = lambda ins, meta: np.matmul(ins[0], ins[1])

    def bwd(g, ins, out, meta):
        a, b = ins
        ga = np.matmul(g, b.swapaxes(-1, -2))
        gb = np.matmul(a.swapaxes(-1, -2), g)
        return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]

    return fwd, bwd


@_op("transpose")
def _transpose():
    fwd = lambda ins, meta: ins[0].transpose(meta["perm"])

    def bwd(g, ins, out, meta):
        inv = np.argsort(meta["perm"])
        return [g.transpose(tuple(inv))]

    return fwd, bwd


@_op("reshape")
def _reshape():
    fwd = lambda ins, meta: ins[0].reshape(meta["shape"])
    bwd = lambda g, ins, out, meta: [g.reshape(ins[0].shape)]
    return fwd, bwd


@_op("sum")
def _sum():
    def fwd(ins, meta):
        return ins[0].sum(axis=meta["axis"])

    def bwd(g, ins, out, meta):
        axis = meta["axis"]
        if axis is None:
            return [np.broadcast_to(g, ins[0].shape).copy()]
        g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, ins[0].shape).copy()]

    return fwd, bwd


@_op("relu")
def _relu():
    fwd = lambda ins, meta: np.maximum(ins[0], 0.0)
    bwd = lambda g, ins, out, meta: [g * (ins[0] > 0)]
    return fwd, bwd


@_op("square")
def _square():
    fwd = lambda ins, meta: ins[0] * ins[0]
    bwd = lambda g, ins, out, meta: [2.0 * ins[0] * g]
    return fwd, bwd


@_op("power")
def _power():
    fwd = lambda ins, meta: ins[0] ** meta["n"]
    bwd = lambda g, ins, out, meta: [meta["n"] * ins[0] ** (meta["n"] - 1) * g]
    return fwd, bwd


@_op("sigmoid")
def _sigmoid():
    fwd = lambda ins, meta: K.stable_sigmoid(ins[0])
    bwd = lambda g, ins, out, meta: [g * out * (1.0 - out)]
    return fwd, bwd


@_op("log")
def _log():
    fwd = lambda ins, meta: np.log(ins[0])
    bwd = lambda g, ins, out, meta: [g / ins[0]]
    return fwd, bwd


@_op("mean_subtract")
def _mean_subtract():
    fwd = lambda ins, meta: K.mean_subtract(ins[0])
    bwd = lambda g, ins, out, meta: [g - g.mean(axis=-1, keepdims=True)]
    return fwd, bwd


@_op("rsqrt_normalize")
def _rsqrt_normalize():
    fwd = lambda ins, meta: K.rsqrt_normalize(ins[0], meta["epsilon"])
    bwd = lambda g, ins, out, meta: [
        K.rsqrt_normalize_backward(g, ins[0], meta["epsilon"])
    ]
    return fwd, bwd


@_op("masked_softmax")
def _masked_softmax():
    fwd = lambda ins, meta: K.masked_softmax(ins[0], meta["mask"])
    bwd = lambda g, ins, out, meta: [K.softmax_backward(g, out)]
    return fwd, bwd


@_op("masked_logsumexp")
def _masked_logsumexp():
    fwd = lambda ins, meta: K.masked_logsumexp(ins[0], meta["mask"])

    def bwd(g, ins, out, meta):
        w = K.masked_softmax(ins[0], meta["mask"])
        return [w * g[..., None]]

    return fwd, bwd


@_op("gather")
def _gather():
    fwd = lambda ins, meta: np.take(ins[0], meta["idx"], axis=0)

    def bwd(g, ins, out, meta):
        acc = np.zeros_like(ins[0])
        np.add.at(acc, meta["idx"], g)
        return [acc]

    return fwd, bwd


@_op("where_rows")
def _where_rows():
    # out[..., A, :] = vec where meta row mask is set, else a[..., A, :]
    fwd = lambda ins, meta: np.where(meta["rows"][..., None], ins[1], ins[0])

    def bwd(g, ins, out, meta):
        rows = meta["rows"][..., None]
        ga = np.where(rows, 0.0, g)
        gv = _unbroadcast(np.where(rows, g, 0.0), ins[1].shape)
        return [ga, gv]

    return fwd, bwd


@_op("concat")
def _concat():
    fwd = lambda ins, meta: np.concatenate(ins, axis=meta["axis"])

    def bwd(g, ins, out, meta):
        axis = meta["axis"]
        sizes = [a.shape[axis] for a in ins]
        return list(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return fwd, bwd


@_op("leaf")
def _leaf():
    def fwd(ins, meta):
        raise TapeError("leaf nodes are not recomputed")

    def bwd(g, ins, out, meta):
        return []

    return fwd, bwd


# ---------------------------------------------------------------------------
# Tape and variables

@dataclass
class Node:
    """One recorded primitive: op kind, input ids, saved forward value."""

    op: str
    inputs: tuple[int, ...]
    value: Array
    meta: dict
    requires_grad: bool


class Tape:
    """Ordered record of primitives; inputs of a node always precede it."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}
        self.result: int | None = None

    def param(self, name: str, value) -> "Var":
        """Register a named leaf that gradients will be reported for."""
        if name in self.params:
            raise TapeError(f"duplicate parameter name {name!r}")
        v = self._leaf(value, requires_grad=True)
        self.params[name] = v.idx
        return v

    def constant(self, value) -> "Var":
        """A leaf that participates in the forward pass but gets no gradient."""
        return self._leaf(value, requires_grad=False)

    def _leaf(self, value, requires_grad: bool) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node("leaf", (), value, {}, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def _push(self, op: str, inputs: tuple["Var", ...], meta: dict) -> "Var":
        for v in inputs:
            if v.tape is not self:
                raise TapeError("all operands must belong to the same tape")
        if op not in _OPS:
            raise TapeError(f"unsupported primitive {op!r}")
        fwd, _ = _OPS[op]
        values = [v.value for v in inputs]
        out = np.asarray(fwd(values, meta))
        requires = any(v.node.requires_grad for v in inputs)
        self.nodes.append(Node(op, tuple(v.idx for v in inputs), out, meta, requires))
        return Var(self, len(self.nodes) - 1)

    def finish(self, result: "Var") -> None:
        if result.tape is not self:
            raise TapeError("result does not belong to this tape")
        if result.value.shape != ():
            raise TapeError(f"recorded result must be scalar, got {result.value.shape}")
        self.result = result.idx


@dataclass(frozen=True)
class Var:
    """Handle to one tape node."""

    tape: Tape
    idx: int

    @property
    def node(self) -> Node:
        return self.tape.nodes[self.idx]

    @property
    def value(self) -> Array:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return sub(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return mul(self, other)

    def __matmul__(self, other: "Var") -> "Var":
        return matmul(self, other)

    def __neg__(self) -> "Var":
        return neg(self)


# ---------------------------------------------------------------------------
# Primitive constructors

def add(a: Var, b: Var) -> Var:
    return a.tape._push("add", (a, b), {})


def sub(a: Var, b: Var) -> Var:
    return a.tape._push("sub", (a, b), {})


def mul(a: Var, b: Var) -> Var:
    return a.tape._push("mul", (a, b), {})


def scale(a: Var, c: float) -> Var:
    return a.tape._push("scale", (a,), {"c": float(c)})


def neg(a: Var) -> Var:
    return a.tape._push("neg", (a,), {})


def matmul(a: Var, b: Var) -> Var:
    return a.tape._push("matmul", (a, b), {})


def transpose(a: Var, perm: tuple[int, ...]) -> Var:
    # normalize negative axes so the backward pass can invert the permutation
    n = a.value.ndim
    return a.tape._push("transpose", (a,), {"perm": tuple(p % n for p in perm)})


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    return a.tape._push("reshape", (a,), {"shape": tuple(shape)})


def sum_(a: Var, axis: int | None = None) -> Var:
    return a.tape._push("sum", (a,), {"axis": axis})


def relu(a: Var) -> Var:
    return a.tape._push("relu", (a,), {})


def square(a: Var) -> Var:
    return a.tape._push("square", (a,), {})


def power(a: Var, n: int) -> Var:
    return a.tape._push("power", (a,), {"n": int(n)})


def sigmoid(a: Var) -> Var:
    return a.tape._push("sigmoid", (a,), {})


def log(a: Var) -> Var:
    return a.tape._push("log", (a,), {})


def mean_subtract(a: Var) -> Var:
    return a.tape._push("mean_subtract", (a,), {})


def rsqrt_normalize(a: Var, epsilon: float) -> Var:
    return a.tape._push("rsqrt_normalize", (a,), {"epsilon": float(epsilon)})


def masked_softmax(a: Var, mask: Array | None) -> Var:
    return a.tape._push("masked_softmax", (a,), {"mask": mask})


def masked_logsumexp(a: Var, mask: Array | None) -> Var:
    return a.tape._push("masked_logsumexp", (a,), {"mask": mask})


def gather(a: Var, idx: Array) -> Var:
    return a.tape._push("gather", (a,), {"idx": np.asarray(idx, dtype=np.intp)})


def where_rows(a: Var, vec: Var, rows: Array) -> Var:
    """Replace rows of `a` (last-axis vectors) flagged by `rows` with `vec`."""
    return a.tape._push("where_rows", (a, vec), {"rows": np.asarray(rows, dtype=bool)})


def concat(parts: list[Var], axis: int = -1) -> Var:
    return parts[0].tape._push("concat", tuple(parts), {"axis": axis})


# ---------------------------------------------------------------------------
# Record / backward / replay / oracle

def record_forward(fn, params: dict[str, Array], *args, **kwargs) -> tuple[float, Tape]:
    """Run fn(tape, param_vars, *args, **kwargs) and record it.

    fn must return a scalar Var built from this module's primitives; the
    recorded value equals direct evaluation because recording is eager.
    """
    tape = Tape()
    pvars = {name: tape.param(name, value) for name, value in params.items()}
    out = fn(tape, pvars, *args, **kwargs)
    if not isinstance(out, Var):
        raise TapeError("recorded function must return a Var")
    tape.finish(out)
    return float(out.value), tape


def backward(tape: Tape) -> dict[str, Array]:
    """Exact gradients of the recorded scalar w.r.t. every named parameter.

    Parameters that do not influence the result get exact zeros.
    """
    if tape.result is None:
        raise TapeError("tape has no recorded result; call finish() first")
    grads: dict[int, Array] = {tape.result: np.ones(())}
    for idx in range(tape.result, -1, -1):
        node = tape.nodes[idx]
        if node.op == "leaf" or not node.requires_grad:
            continue  # leaf grads stay in the dict for collection below
        g = grads.pop(idx, None)
        if g is None:
            continue
        _, bwd = _OPS[node.op]
        ins = [tape.nodes[i].value for i in node.inputs]
        for inp_idx, inp_grad in zip(node.inputs, bwd(g, ins, node.value, node.meta)):
            if inp_grad is None or not tape.nodes[inp_idx].requires_grad:
                continue
            if inp_idx in grads:
                grads[inp_idx] = grads[inp_idx] + inp_grad
            else:
                grads[inp_idx] = inp_grad
    out = {}
    for name, idx in tape.params.items():
        g = grads.get(idx)
        out[name] = g if g is not None else np.zeros_like(tape.nodes[idx].value)
    return out


def replay(tape: Tape) -> int:
    """Re-execute every recorded primitive and check values bit-exactly.

    Returns the number of non-leaf nodes verified; raises TapeError on the
    first mismatch.
    """
    for idx, node in enumerate(tape.nodes):
        if node.op == "leaf":
            continue
        fwd, _ = _OPS[node.op]
        redone = fwd([tape.nodes[i].value for i in node.inputs], node.meta)
        if not np.array_equal(redone, node.value):
            raise TapeError(f"replay mismatch at node {idx} ({node.op})")
    return sum(1 for n in tape.nodes if n.op != "leaf")


def finite_diff(f, point: Array, h: float = 1e-5) -> Array:
    """Central finite differences of a scalar function, per coordinate."""
    if not (h > 0):
        raise ValueError("h must be > 0")
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point, dtype=np.float64)
    it = np.nditer(point, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        bumped = point.copy()
        bumped[i] = point[i] + h
        hi = f(bumped)
        bumped[i] = point[i] - h
        lo = f(bumped)
        grad[i] = (hi - lo) / (2.0 * h)
    return grad
