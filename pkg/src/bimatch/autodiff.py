"""Dense float64 tensors with tape-based reverse-mode differentiation.

The operation set is deliberately small and closed over everything the
package trains: matmul, softmax_rows, layernorm, relu, sigmoid, add, mul,
div, scale, clamp, log, exp, sum/mean reductions, transpose, and reshape.
There is no general broadcasting; elementwise ops require equal shapes and
scalar interaction goes through scale or materialized constant tensors.

Tapes are single-owner and single-threaded. Forward values are plain numpy
arrays; backward walks the node list in strict reverse topological order
exactly once and stores one gradient array per reached node.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import backend
from .errors import ContractError, DeterminismError, ShapeError

LAYERNORM_EPS = 1e-5

_ELEMENTWISE_BINARY = ("add", "mul", "div")


def _as_array(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 3:
        raise ShapeError(f"tensors are limited to 3 dims, got shape {arr.shape}")
    return arr


@dataclass
class Node:
    """One recorded operation: kind, input node ids, saved forward value."""

    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    ctx: tuple = ()
    is_param: bool = False


class Tensor:
    """Handle to a tape node; exposes numpy data and operator sugar."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def data(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(idx={self.idx}, shape={self.shape})"

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        # Scalars become materialized constant tensors of matching shape.
        return self.tape.constant(np.full(self.shape, float(other)))

    def __add__(self, other):
        return self.tape.add(self, self._coerce(other))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        other = self._coerce(other)
        return self.tape.add(self, self.tape.scale(other, -1.0))

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return self.tape.mul(self, other)
        return self.tape.scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return self.tape.div(self, self._coerce(other))

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)


class Gradients:
    """Per-node gradients produced by one backward pass."""

    def __init__(self, tape: "Tape", grads: list[np.ndarray | None]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads[t.idx]
        if g is None:
            # Leaves the loss never reached get an explicit zero gradient.
            return np.zeros_like(self._tape.nodes[t.idx].value)
        return g


class Tape:
    """Ordered operation record; owns all tensors created through it."""

    def __init__(self):
        self.nodes: list[Node] = []

    # -- node plumbing ----------------------------------------------------

    def _record(self, op, inputs, value, ctx=(), is_param=False) -> Tensor:
        self.nodes.append(Node(op, inputs, value, ctx, is_param))
        return Tensor(self, len(self.nodes) - 1)

    def _check_owned(self, *tensors: Tensor):
        for t in tensors:
            if t.tape is not self:
                raise ContractError("tensor belongs to a different tape")

    def param(self, data, name: str = "") -> Tensor:
        return self._record("leaf", (), _as_array(data).copy(), (name,), True)

    def constant(self, data) -> Tensor:
        return self._record("leaf", (), _as_array(data).copy(), ("",), False)

    # -- operations --------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_owned(a, b)
        out = backend.matmul(a.data, b.data)
        return self._record("matmul", (a.idx, b.idx), out)

    def transpose(self, a: Tensor) -> Tensor:
        self._check_owned(a)
        if a.data.ndim != 2:
            raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
        return self._record("transpose", (a.idx,),
                            np.ascontiguousarray(a.data.T))

    def reshape(self, a: Tensor, shape: Sequence[int]) -> Tensor:
        self._check_owned(a)
        out = _as_array(a.data.reshape(tuple(shape)))
        return self._record("reshape", (a.idx,), out, (a.shape,))

    def softmax_rows(self, a: Tensor) -> Tensor:
        self._check_owned(a)
        return self._record("softmax_rows", (a.idx,),
                            backend.softmax_rows(a.data))

    def layernorm(self, a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
        self._check_owned(a, gain, bias)
        x = a.data
        if x.ndim != 2 or x.shape[1] < 2:
            raise ShapeError(
                f"layernorm needs rows of length >= 2, got shape {x.shape}")
        if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
            raise ShapeError("layernorm gain/bias must have shape (row_len,)")
        mu = np.mean(x, axis=1, keepdims=True)
        var = np.mean((x - mu) ** 2, axis=1, keepdims=True)
        istd = 1.0 / np.sqrt(var + LAYERNORM_EPS)
        xhat = (x - mu) * istd
        out = xhat * gain.data[None, :] + bias.data[None, :]
        return self._record("layernorm", (a.idx, gain.idx, bias.idx), out,
                            (xhat, istd))

    def relu(self, a: Tensor) -> Tensor:
        self._check_owned(a)
        return self._record("relu", (a.idx,), np.maximum(a.data, 0.0))

    def sigmoid(self, a: Tensor) -> Tensor:
        self._check_owned(a)
        with np.errstate(over="ignore"):
            out = 1.0 / (1.0 + np.exp(-a.data))
        return self._record("sigmoid", (a.idx,), out)

    def _binary(self, op: str, a: Tensor, b: Tensor) -> Tensor:
        self._check_owned(a, b)
        if a.shape != b.shape:
            raise ShapeError(f"{op} operand shapes disagree: {a.shape} vs {b.shape}")
        if op == "add":
            out = a.data + b.data
        elif op == "mul":
            out = a.data * b.data
        else:
            out = a.data / b.data
        return self._record(op, (a.idx, b.idx), out)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        return self._binary("add", a, b)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        return self._binary("mul", a, b)

    def div(self, a: Tensor, b: Tensor) -> Tensor:
        return self._binary("div", a, b)

    def scale(self, a: Tensor, s: float) -> Tensor:
        self._check_owned(a)
        return self._record("scale", (a.idx,), a.data * float(s), (float(s),))

    def clamp(self, a: Tensor, lo: float, hi: float) -> Tensor:
        self._check_owned(a)
        return self._record("clamp", (a.idx,), np.clip(a.data, lo, hi),
                            (float(lo), float(hi)))

    def log(self, a: Tensor) -> Tensor:
        self._check_owned(a)
        return self._record("log", (a.idx,), np.log(a.data))

    def exp(self, a: Tensor) -> Tensor:
        self._check_owned(a)
        return self._record("exp", (a.idx,), np.exp(a.data))

    def sum(self, a: Tensor, axis: int | None = None) -> Tensor:
        """Sum in ascending index order. axis=None -> shape (1,);
        axis=0 -> (1, n); axis=1 -> (m, 1)."""
        self._check_owned(a)
        x = a.data
        if axis is None:
            out = np.array([backend.flat_sum(x)])
        elif x.ndim != 2:
            raise ShapeError(f"axis sums need a matrix, got shape {x.shape}")
        elif axis == 0:
            out = backend.col_sums(x).reshape(1, -1)
        elif axis == 1:
            out = backend.row_sums(x).reshape(-1, 1)
        else:
            raise ShapeError(f"invalid axis {axis}")
        return self._record("sum", (a.idx,), out, (axis, x.shape))

    def mean(self, a: Tensor, axis: int | None = None) -> Tensor:
        s = self.sum(a, axis)
        count = a.data.size if axis is None else a.data.shape[axis]
        return self.scale(s, 1.0 / count)

    # -- backward ----------------------------------------------------------

    def backward(self, loss: Tensor) -> Gradients:
        """Reverse pass from a scalar loss; grads reset on every call."""
        self._check_owned(loss)
        if loss.shape != (1,):
            raise ContractError(
                f"backward requires a scalar loss of shape (1,), got {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.idx] = np.ones(1)
        for idx in range(loss.idx, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            node = self.nodes[idx]
            self._push(node, g, grads)
        return Gradients(self, grads)

    def _push(self, node: Node, g: np.ndarray, grads):
        def acc(i: int, contribution: np.ndarray):
            if grads[i] is None:
                grads[i] = np.zeros_like(self.nodes[i].value)
            grads[i] += contribution

        op = node.op
        if op == "leaf":
            return
        if op == "matmul":
            a = self.nodes[node.inputs[0]].value
            b = self.nodes[node.inputs[1]].value
            acc(node.inputs[0], backend.matmul(g, np.ascontiguousarray(b.T)))
            acc(node.inputs[1], backend.matmul(np.ascontiguousarray(a.T), g))
        elif op == "transpose":
            acc(node.inputs[0], np.ascontiguousarray(g.T))
        elif op == "reshape":
            acc(node.inputs[0], g.reshape(node.ctx[0]))
        elif op == "softmax_rows":
            s = node.value
            gs = g * s
            acc(node.inputs[0], gs - s * np.sum(gs, axis=1, keepdims=True))
        elif op == "layernorm":
            xhat, istd = node.ctx
            gain = self.nodes[node.inputs[1]].value
            dxhat = g * gain[None, :]
            dx = istd * (dxhat
                         - np.mean(dxhat, axis=1, keepdims=True)
                         - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True))
            acc(node.inputs[0], dx)
            acc(node.inputs[1], np.sum(g * xhat, axis=0))
            acc(node.inputs[2], np.sum(g, axis=0))
        elif op == "relu":
            x = self.nodes[node.inputs[0]].value
            acc(node.inputs[0], g * (x > 0.0))
        elif op == "sigmoid":
            s = node.value
            acc(node.inputs[0], g * s * (1.0 - s))
        elif op == "add":
            acc(node.inputs[0], g)
            acc(node.inputs[1], g)
        elif op == "mul":
            a = self.nodes[node.inputs[0]].value
            b = self.nodes[node.inputs[1]].value
            acc(node.inputs[0], g * b)
            acc(node.inputs[1], g * a)
        elif op == "div":
            a = self.nodes[node.inputs[0]].value
            b = self.nodes[node.inputs[1]].value
            acc(node.inputs[0], g / b)
            acc(node.inputs[1], -g * a / (b * b))
        elif op == "scale":
            acc(node.inputs[0], g * node.ctx[0])
        elif op == "clamp":
            x = self.nodes[node.inputs[0]].value
            lo, hi = node.ctx
            acc(node.inputs[0], g * ((x >= lo) & (x <= hi)))
        elif op == "log":
            x = self.nodes[node.inputs[0]].value
            acc(node.inputs[0], g / x)
        elif op == "exp":
            acc(node.inputs[0], g * node.value)
        elif op == "sum":
            axis, in_shape = node.ctx
            if axis is None:
                acc(node.inputs[0], np.full(in_shape, g[0]))
            elif axis == 0:
                acc(node.inputs[0], np.repeat(g, in_shape[0], axis=0))
            else:
                acc(node.inputs[0], np.repeat(g, in_shape[1], axis=1))
        else:  # pragma: no cover
            raise ContractError(f"unknown op on tape: {op}")


@dataclass
class FDReport:
    """Outcome of a finite-difference gradient check."""

    max_rel_err: float
    tol: float
    coords_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def finite_diff_check(f: Callable[[list[np.ndarray]], float],
                      params: list[np.ndarray],
                      analytic: list[np.ndarray],
                      eps: float = 1e-5,
                      tol: float = 1e-4) -> FDReport:
    """Compare analytic gradients against central finite differences.

    f maps the parameter list to a float and must be deterministic (two
    evaluations at the base point are compared bitwise). The relative error
    denominator is max(|analytic|, |numeric|, 1e-8) per coordinate.
    """
    if not (0.0 < eps <= 1e-2):
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    base = f(params)
    if f(params) != base:
        raise DeterminismError("function under finite-difference check is "
                               "not deterministic")
    worst = 0.0
    count = 0
    for p, grad in zip(params, analytic):
        flat = p.ravel()
        gflat = grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(params)
            flat[i] = orig - eps
            lo = f(params)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
            count += 1
    return FDReport(max_rel_err=float(worst), tol=tol, coords_checked=count)
