"""Dense float64 tensors with reverse-mode automatic differentiation.

A `Tape` records every operation; `backward` replays it in reverse to
accumulate gradients. The op catalog is deliberately small: it is exactly what
the MLP/GRU encoders, the bilinear discriminators and the classification /
InfoNCE losses need. Everything runs on numpy arrays in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01

OP_CATALOG = (
    "matmul",
    "add",
    "elementwise-mul",
    "sigmoid",
    "tanh",
    "leaky-relu",
    "concat",
    "slice",
    "sum",
    "mean",
    "log-sum-exp",
    "softmax",
    "dropout-mask-mul",
)


class NdgradError(ValueError):
    """Raised for shape mismatches, non-finite values and misuse of the tape."""


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    # grad_out -> gradients w.r.t. each parent (None for constant parents)
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None


class Tape:
    """Single-threaded record of operations, topologically ordered."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def leaf(self, data, requires_grad: bool = False) -> "Tensor":
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NdgradError("leaf tensor contains non-finite values")
        self.nodes.append(Node("leaf", (), arr, requires_grad))
        return Tensor(self, len(self.nodes) - 1)

    def const(self, data) -> "Tensor":
        return self.leaf(data, requires_grad=False)

    def _record(self, op, parents, value, backward) -> "Tensor":
        requires = any(self.nodes[p].requires_grad for p in parents)
        self.nodes.append(
            Node(op, tuple(parents), value, requires, backward if requires else None)
        )
        return Tensor(self, len(self.nodes) - 1)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "node_id")

    def __init__(self, tape: Tape, node_id: int) -> None:
        self.tape = tape
        self.node_id = node_id

    @property
    def data(self) -> np.ndarray:
        return self.tape.nodes[self.node_id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    # --- op catalog ---

    def matmul(self, other: "Tensor") -> "Tensor":
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise NdgradError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        value = a @ b

        def bw(g):
            return g @ b.T, a.T @ g

        return self.tape._record("matmul", (self.node_id, other.node_id), value, bw)

    def add(self, other: "Tensor") -> "Tensor":
        a, b = self.data, other.data
        try:
            value = a + b
        except ValueError:
            raise NdgradError(f"add shape mismatch: {a.shape} + {b.shape}") from None

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return self.tape._record("add", (self.node_id, other.node_id), value, bw)

    def mul(self, other: "Tensor") -> "Tensor":
        a, b = self.data, other.data
        try:
            value = a * b
        except ValueError:
            raise NdgradError(f"mul shape mismatch: {a.shape} * {b.shape}") from None

        def bw(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return self.tape._record("elementwise-mul", (self.node_id, other.node_id), value, bw)

    def sigmoid(self) -> "Tensor":
        x = self.data
        # exp(-|x|) never overflows; both branches share it
        e = np.exp(-np.abs(x))
        value = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

        def bw(g):
            return (g * value * (1.0 - value),)

        return self.tape._record("sigmoid", (self.node_id,), value, bw)

    def tanh(self) -> "Tensor":
        value = np.tanh(self.data)

        def bw(g):
            return (g * (1.0 - value * value),)

        return self.tape._record("tanh", (self.node_id,), value, bw)

    def leaky_relu(self) -> "Tensor":
        x = self.data
        value = np.where(x > 0, x, LEAKY_SLOPE * x)

        def bw(g):
            return (g * np.where(x > 0, 1.0, LEAKY_SLOPE),)

        return self.tape._record("leaky-relu", (self.node_id,), value, bw)

    def slice(self, key) -> "Tensor":
        x = self.data
        value = x[key]
        if value.ndim == 0:
            value = value.reshape(())

        basic = isinstance(key, (slice, int)) or (
            isinstance(key, tuple) and all(isinstance(k, (slice, int)) for k in key)
        )

        def bw(g):
            full = np.zeros_like(x)
            if basic:
                # basic indexing never selects the same element twice
                full[key] += g
            else:
                np.add.at(full, key, g)
            return (full,)

        return self.tape._record("slice", (self.node_id,), np.array(value), bw)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self.data
        value = x.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is None:
                return (np.broadcast_to(g, x.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, x.shape).copy(),)

        return self.tape._record("sum", (self.node_id,), np.asarray(value), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self.data
        value = x.mean(axis=axis, keepdims=keepdims)
        n = x.size if axis is None else x.shape[axis]

        def bw(g):
            if axis is None:
                return (np.broadcast_to(g / n, x.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg / n, x.shape).copy(),)

        return self.tape._record("mean", (self.node_id,), np.asarray(value), bw)

    def logsumexp(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self.data
        m = x.max(axis=axis, keepdims=True)
        shifted = np.exp(x - m)
        s = shifted.sum(axis=axis, keepdims=True)
        value = np.log(s) + m
        softmax = shifted / s
        if not keepdims:
            value = value.squeeze() if axis is None else value.squeeze(axis=axis)

        def bw(g):
            if axis is None:
                gg = g
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
            return (gg * softmax,)

        return self.tape._record("log-sum-exp", (self.node_id,), np.asarray(value), bw)

    def softmax(self, axis: int = -1) -> "Tensor":
        x = self.data
        m = x.max(axis=axis, keepdims=True)
        e = np.exp(x - m)
        value = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            dot = (g * value).sum(axis=axis, keepdims=True)
            return (value * (g - dot),)

        return self.tape._record("softmax", (self.node_id,), value, bw)

    def dropout_mask_mul(self, mask: np.ndarray) -> "Tensor":
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != self.data.shape:
            raise NdgradError(
                f"dropout mask shape {mask.shape} != tensor shape {self.data.shape}"
            )
        value = self.data * mask

        def bw(g):
            return (g * mask,)

        return self.tape._record("dropout-mask-mul", (self.node_id,), value, bw)

    # --- conveniences composed from the catalog ---

    def scale(self, c: float) -> "Tensor":
        return self.mul(self.tape.const(np.full((), float(c))))

    def neg(self) -> "Tensor":
        return self.scale(-1.0)

    def sub(self, other: "Tensor") -> "Tensor":
        return self.add(other.neg())

    def add_const(self, c: float) -> "Tensor":
        return self.add(self.tape.const(np.full((), float(c))))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise NdgradError("concat of zero tensors")
    tape = tensors[0].tape
    arrays = [t.data for t in tensors]
    try:
        value = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise NdgradError(
            f"concat shape mismatch: {[a.shape for a in arrays]}"
        ) from None
    sizes = [a.shape[axis] for a in arrays]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._record("concat", tuple(t.node_id for t in tensors), value, bw)


def op_apply(tape: Tape, kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Public catalog dispatch with full input validation."""
    if kind not in OP_CATALOG:
        raise NdgradError(f"unknown op kind {kind!r}; catalog: {OP_CATALOG}")
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise NdgradError(f"non-finite input to op {kind!r}")
    if kind == "matmul":
        return inputs[0].matmul(inputs[1])
    if kind == "add":
        return inputs[0].add(inputs[1])
    if kind == "elementwise-mul":
        return inputs[0].mul(inputs[1])
    if kind == "sigmoid":
        return inputs[0].sigmoid()
    if kind == "tanh":
        return inputs[0].tanh()
    if kind == "leaky-relu":
        return inputs[0].leaky_relu()
    if kind == "concat":
        return concat(inputs, axis=kwargs.get("axis", 0))
    if kind == "slice":
        return inputs[0].slice(kwargs["key"])
    if kind == "sum":
        return inputs[0].sum(axis=kwargs.get("axis"), keepdims=kwargs.get("keepdims", False))
    if kind == "mean":
        return inputs[0].mean(axis=kwargs.get("axis"), keepdims=kwargs.get("keepdims", False))
    if kind == "log-sum-exp":
        return inputs[0].logsumexp(axis=kwargs.get("axis"), keepdims=kwargs.get("keepdims", False))
    if kind == "softmax":
        return inputs[0].softmax(axis=kwargs.get("axis", -1))
    if kind == "dropout-mask-mul":
        return inputs[0].dropout_mask_mul(kwargs["mask"])
    raise AssertionError(kind)


def backward(tape: Tape, loss: Tensor | int) -> dict[int, np.ndarray]:
    """Reverse-accumulate gradients of a scalar loss over the whole tape.

    Returns node-id -> gradient for every node that requires grad; leaves not
    reachable from the loss get zeros when queried through `grad_for`.
    """
    loss_id = loss.node_id if isinstance(loss, Tensor) else int(loss)
    loss_node = tape.nodes[loss_id]
    if loss_node.value.size != 1:
        raise NdgradError(f"loss must be scalar, got shape {loss_node.value.shape}")
    grads: dict[int, np.ndarray] = {loss_id: np.ones_like(loss_node.value)}
    for nid in range(loss_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward is None or not node.requires_grad:
            continue
        parent_grads = node.backward(g)
        for pid, pg in zip(node.parents, parent_grads):
            if pg is None or not tape.nodes[pid].requires_grad:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return grads


def grad_for(tape: Tape, grads: dict[int, np.ndarray], leaf: Tensor) -> np.ndarray:
    """Gradient for a leaf; zero if the leaf is unreachable from the loss."""
    g = grads.get(leaf.node_id)
    if g is None:
        return np.zeros_like(leaf.data)
    return g


def grad_check(
    loss_fn: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss_fn(tape, leaves)` must build a deterministic scalar loss given the
    parameter leaves; two forward passes are compared to enforce this.
    """
    if epsilon <= 0:
        raise NdgradError("epsilon must be positive")

    def run(p: dict[str, np.ndarray]):
        tape = Tape()
        leaves = {k: tape.leaf(v, requires_grad=True) for k, v in p.items()}
        loss = loss_fn(tape, leaves)
        return tape, leaves, loss

    tape, leaves, loss = run(params)
    _, _, loss2 = run(params)
    if float(loss.data) != float(loss2.data):
        raise NdgradError("loss_fn is not deterministic (two forward passes disagree)")
    grads = backward(tape, loss)
    analytic = {k: grad_for(tape, grads, t) for k, t in leaves.items()}

    def run_value(p):
        return float(run(p)[2].data)

    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = run_value(params)
            flat[i] = orig - epsilon
            down = run_value(params)
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


@dataclass
class OptimState:
    """Adam with decoupled weight decay over a named parameter dict."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NdgradError(f"non-finite gradient for parameter {name!r}")
            if g.shape != params[name].shape:
                raise NdgradError(
                    f"gradient shape {g.shape} != param shape {params[name].shape} for {name!r}"
                )
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            if not np.all(np.isfinite(p)):
                raise NdgradError(f"parameter {name!r} became non-finite after step {t}")
