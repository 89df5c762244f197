"""Dense float64 tensors with a reverse-mode gradient tape and an Adam step.

Every network in this package (encoders, predictor, joiner, merge blocks,
losses) is assembled from the primitive operations defined here, so gradient
correctness in this module is load-bearing. Each primitive has an analytic
backward rule registered under a rule id; the test suite checks every rule
against central finite differences.

Design notes:
  * float64 everywhere; desk scale makes speed a non-issue and gradient
    checks need the headroom.
  * one process-global tape, recorded in creation order (which is a valid
    topological order); training resets it per step, decoding runs inside
    ``no_grad()``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "GradientTape",
    "TapeNode",
    "tape",
    "reset_tape",
    "no_grad",
    "grad_enabled",
    "backward",
    "parameter",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "exp",
    "tanh",
    "sigmoid",
    "relu",
    "log_softmax",
    "logsumexp",
    "gather",
    "concat",
    "reshape",
    "transpose",
    "layer_norm",
    "AdamState",
    "adam_step",
]


class Tensor:
    """A dense float64 array that can participate in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: "TapeNode | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A tape-free view of the same values."""
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __getitem__(self, key) -> "Tensor":
        return _slice(self, key)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, _coerce(other))

    def __add__(self, other) -> "Tensor":
        return add(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, _coerce(other))

    def __mul__(self, other) -> "Tensor":
        return mul(self, _coerce(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def parameter(data) -> Tensor:
    """Wrap an array as a trainable tensor."""
    return Tensor(data, requires_grad=True)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape machinery


@dataclass
class TapeNode:
    """One primitive-op record: inputs, output, and the backward rule id."""

    rule: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: tuple
    index: int


class GradientTape:
    """Ordered list of primitive-op records; creation order is topological."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def record(self, rule: str, inputs: tuple[Tensor, ...], output: Tensor, ctx: tuple) -> None:
        node = TapeNode(rule, inputs, output, ctx, len(self.nodes))
        output.node = node
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE = GradientTape()
_GRAD_ENABLED = True


def tape() -> GradientTape:
    return _TAPE


def reset_tape() -> None:
    _TAPE.clear()


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable tape recording, e.g. for decoding."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


_BACKWARD_RULES: dict[str, Callable[[TapeNode, np.ndarray], list[np.ndarray | None]]] = {}


def _backward_rule(name: str):
    def register(fn):
        _BACKWARD_RULES[name] = fn
        return fn

    return register


def _result(rule: str, inputs: tuple[Tensor, ...], data: np.ndarray, ctx: tuple = ()) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE.record(rule, inputs, out, ctx)
    return out


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every tensor the scalar ``root`` depends on.

    Repeated calls without an optimizer step accumulate into ``grad``.
    """
    if root.size != 1:
        raise ContractError(f"backward() root must be scalar, got shape {root.shape}")
    seed = np.ones(root.shape)
    if root.node is None:
        if root.requires_grad:
            root.grad = seed if root.grad is None else root.grad + seed
        return

    # Restrict the reverse sweep to nodes actually feeding the root.
    reachable: list[TapeNode] = []
    seen: set[int] = set()
    stack = [root.node]
    while stack:
        node = stack.pop()
        if node.index in seen:
            continue
        seen.add(node.index)
        reachable.append(node)
        for inp in node.inputs:
            if inp.node is not None and inp.node.index not in seen:
                stack.append(inp.node)
    reachable.sort(key=lambda n: n.index)

    adjoint: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(reachable):
        g = adjoint.pop(id(node.output), None)
        if g is None:
            continue
        if node.output.requires_grad:
            node.output.grad = g if node.output.grad is None else node.output.grad + g
        grads = _BACKWARD_RULES[node.rule](node, g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                adjoint[key] = gi if key not in adjoint else adjoint[key] + gi


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Primitive operations


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _result("add", (a, b), a.data + b.data)


@_backward_rule("add")
def _add_bwd(node, g):
    a, b = node.inputs
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def sub(a, b) -> Tensor:
    return add(a, scale(_coerce(b), -1.0))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _result("mul", (a, b), a.data * b.data)


@_backward_rule("mul")
def _mul_bwd(node, g):
    a, b = node.inputs
    return [_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)]


def scale(x, s: float) -> Tensor:
    """Multiply by a python scalar constant."""
    return mul(x, Tensor(np.float64(s)))


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    return _result("matmul", (a, b), np.matmul(a.data, b.data))


@_backward_rule("matmul")
def _matmul_bwd(node, g):
    a, b = node.inputs
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


def exp(x) -> Tensor:
    x = _coerce(x)
    return _result("exp", (x,), np.exp(x.data))


@_backward_rule("exp")
def _exp_bwd(node, g):
    return [g * node.output.data]


def tanh(x) -> Tensor:
    x = _coerce(x)
    return _result("tanh", (x,), np.tanh(x.data))


@_backward_rule("tanh")
def _tanh_bwd(node, g):
    y = node.output.data
    return [g * (1.0 - y * y)]


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    # expit via tanh keeps both tails stable
    return _result("sigmoid", (x,), 0.5 * (np.tanh(0.5 * x.data) + 1.0))


@_backward_rule("sigmoid")
def _sigmoid_bwd(node, g):
    y = node.output.data
    return [g * y * (1.0 - y)]


def relu(x) -> Tensor:
    x = _coerce(x)
    return _result("relu", (x,), np.maximum(x.data, 0.0))


@_backward_rule("relu")
def _relu_bwd(node, g):
    (x,) = node.inputs
    return [g * (x.data > 0.0)]


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise DimensionError(f"axis {axis} of shape {x.shape} is empty")
    return axis


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _coerce(x)
    axis = _check_axis(x, axis)
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    return _result("log_softmax", (x,), shifted - lse, ctx=(axis,))


@_backward_rule("log_softmax")
def _log_softmax_bwd(node, g):
    (axis,) = node.ctx
    soft = np.exp(node.output.data)
    return [g - soft * g.sum(axis=axis, keepdims=True)]


def logsumexp(x, axis: int = -1) -> Tensor:
    x = _coerce(x)
    axis = _check_axis(x, axis)
    m = np.max(x.data, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x.data - m), axis=axis, keepdims=True))
    return _result("logsumexp", (x,), np.squeeze(out, axis=axis), ctx=(axis, out))


@_backward_rule("logsumexp")
def _logsumexp_bwd(node, g):
    (x,) = node.inputs
    axis, out = node.ctx
    weights = np.exp(x.data - out)
    return [weights * np.expand_dims(g, axis)]


def gather(x, indices, axis: int = 0) -> Tensor:
    """Select rows/slices by a 1-d integer index array."""
    x = _coerce(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"gather indices must be 1-d, got shape {idx.shape}")
    axis = axis % x.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise DimensionError(f"gather index out of range for axis {axis} of shape {x.shape}")
    return _result("gather", (x,), np.take(x.data, idx, axis=axis), ctx=(idx, axis))


@_backward_rule("gather")
def _gather_bwd(node, g):
    (x,) = node.inputs
    idx, axis = node.ctx
    gx = np.zeros_like(x.data)
    np.add.at(gx, (slice(None),) * axis + (idx,), g)
    return [gx]


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = tuple(_coerce(t) for t in tensors)
    if not parts:
        raise DimensionError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = tuple(p.shape[axis % p.ndim] for p in parts)
    return _result("concat", parts, data, ctx=(axis, sizes))


@_backward_rule("concat")
def _concat_bwd(node, g):
    axis, sizes = node.ctx
    splits = np.cumsum(sizes[:-1])
    return list(np.split(g, splits, axis=axis))


def _validate_basic_key(key) -> tuple:
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (slice, int, np.integer)) and k is not Ellipsis:
            raise DimensionError("tensor indexing supports slices and ints only")
    return key


def _slice(x: Tensor, key) -> Tensor:
    key = _validate_basic_key(key)
    return _result("slice", (x,), x.data[key], ctx=(key,))


@_backward_rule("slice")
def _slice_bwd(node, g):
    (x,) = node.inputs
    (key,) = node.ctx
    gx = np.zeros_like(x.data)
    gx[key] = g
    return [gx]


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _coerce(x)
    return _result("reshape", (x,), x.data.reshape(shape), ctx=(x.shape,))


@_backward_rule("reshape")
def _reshape_bwd(node, g):
    (orig,) = node.ctx
    return [g.reshape(orig)]


def transpose(x, axes: tuple[int, ...] | None = None) -> Tensor:
    x = _coerce(x)
    return _result("transpose", (x,), np.transpose(x.data, axes), ctx=(axes,))


@_backward_rule("transpose")
def _transpose_bwd(node, g):
    (axes,) = node.ctx
    if axes is None:
        return [np.transpose(g)]
    inverse = np.argsort(axes)
    return [np.transpose(g, inverse)]


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then apply an elementwise affine."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last axis of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gain.data + bias.data
    return _result("layer_norm", (x, gain, bias), out, ctx=(xhat, inv_std))


@_backward_rule("layer_norm")
def _layer_norm_bwd(node, g):
    x, gain, bias = node.inputs
    xhat, inv_std = node.ctx
    lead = tuple(range(g.ndim - 1))
    g_gain = (g * xhat).sum(axis=lead) if lead else g * xhat
    g_bias = g.sum(axis=lead) if lead else g
    dxhat = g * gain.data
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    gx = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return [gx, g_gain, g_bias]


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    """Adam moment estimates, bound by position to one fixed parameter list."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """One Adam update over ``params``; grads are consumed and cleared."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractError("optimizer state was created for a different parameter list")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.step_count
    bias2 = 1.0 - b2**state.step_count
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {i} has no gradient")
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.grad = None
