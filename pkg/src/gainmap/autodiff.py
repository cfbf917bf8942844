"""Minimal reverse-mode differentiation over dense float64 arrays.

Ops execute eagerly on numpy.  When a Tape is active (``with Tape() as t``)
every primitive appends a node in execution order, so the reversed node list
is already a topological order for the backward sweep.  Outside a Tape the
same functions run as plain numpy, which is the fast path for finite
differences and inference.

Primitives cover what a small pre-norm transformer needs: matmul (batched),
broadcasting add/sub/mul, transpose/reshape, softmax, layer norm, GELU/ReLU,
and sum/mean reductions.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

__all__ = [
    "AutodiffError",
    "Tensor",
    "Tape",
    "backward",
    "gradient_check",
    "GradCheckReport",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "softmax",
    "layer_norm",
    "gelu",
    "relu",
    "tensor_sum",
    "mean",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_STATE = threading.local()


class AutodiffError(RuntimeError):
    """Raised on malformed graphs or shape errors, naming the primitive."""


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward_fn: callable
    op: str


class Tape:
    """Ordered record of executed primitives; reversed, it is the backward order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_STATE, "stack", None)
        if stack is None:
            stack = _STATE.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _STATE.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    stack = getattr(_STATE, "stack", None)
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_value: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = _active_tape()
    track = any(p.requires_grad for p in parents)
    out = Tensor(out_value, requires_grad=track)
    if tape is not None and track:
        tape.nodes.append(_Node(out=out, parents=parents, backward_fn=backward_fn, op=op))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


def _broadcast_shapes(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise AutodiffError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes("add", a.value, b.value)
    out = a.value + b.value

    def bwd(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))

    return _record("add", out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes("sub", a.value, b.value)
    out = a.value - b.value

    def bwd(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape))

    return _record("sub", out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes("mul", a.value, b.value)
    out = a.value * b.value

    def bwd(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return _record("mul", out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return (-g,)

    return _record("neg", -a.value, (a,), bwd)


# -- linear algebra and shape ------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise AutodiffError(
            f"matmul: operands must be at least 2-D, got {a.value.ndim}-D and {b.value.ndim}-D"
        )
    if a.value.shape[-1] != b.value.shape[-2]:
        raise AutodiffError(f"matmul: inner dimensions {a.value.shape} x {b.value.shape}")
    out = a.value @ b.value

    def bwd(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return (_unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape))

    return _record("matmul", out, (a, b), bwd)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes_t = tuple(axes) if axes is not None else tuple(range(a.value.ndim))[::-1]
    inverse = tuple(np.argsort(axes_t))

    def bwd(g):
        return (g.transpose(inverse),)

    return _record("transpose", a.value.transpose(axes_t), (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise AutodiffError(f"reshape: cannot view {a.value.shape} as {shape}") from exc

    def bwd(g):
        return (g.reshape(a.value.shape),)

    return _record("reshape", out, (a,), bwd)


# -- nonlinearities ----------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Stabilized softmax; -inf entries (attention masks) map to exact zeros."""
    a = _as_tensor(a)
    shifted = a.value - np.max(a.value, axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * p, axis=axis, keepdims=True)
        return ((g - dot) * p,)

    return _record("softmax", p, (a,), bwd)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply the
    learnable affine parameters (shape: last-axis width)."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    width = a.value.shape[-1]
    if gain.value.shape != (width,) or bias.value.shape != (width,):
        raise AutodiffError(
            f"layer_norm: affine shapes {gain.value.shape}/{bias.value.shape} != ({width},)"
        )
    mu = a.value.mean(axis=-1, keepdims=True)
    centered = a.value - mu
    sigma = np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered / sigma
    out = xhat * gain.value + bias.value

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        ghat = g * gain.value
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        ga = (ghat - m1 - xhat * m2) / sigma
        return (ga, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _record("layer_norm", out, (a, gain, bias), bwd)


def gelu(a) -> Tensor:
    """Exact Gaussian-error-linear unit x * Phi(x)."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.value * _INV_SQRT2))
    out = a.value * cdf

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.value**2)
        return (g * (cdf + a.value * pdf),)

    return _record("gelu", out, (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.value, 0.0)

    def bwd(g):
        return (g * (a.value > 0.0),)

    return _record("relu", out, (a,), bwd)


# -- reductions --------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.full(shape, g)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        return (_expand_reduced(g, a.value.shape, axis, keepdims),)

    return _record("sum", out, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size // max(out.size, 1)

    def bwd(g):
        return (_expand_reduced(g, a.value.shape, axis, keepdims) / count,)

    return _record("mean", out, (a,), bwd)


# -- backward sweep and finite-difference checking ----------------------------


def backward(tape: Tape, output: Tensor, output_gradient=None) -> None:
    """Accumulate gradients of ``output`` into every tensor reachable on the
    tape.  Leaves that the output does not depend on keep a None gradient
    (read as zeros via ``grad_or_zeros``)."""
    if not any(node.out is output for node in tape.nodes):
        raise AutodiffError("backward: output was not produced under this tape")
    if output_gradient is None:
        output_gradient = np.ones_like(output.value)
    seed = np.asarray(output_gradient, dtype=np.float64)
    if seed.shape != output.value.shape:
        raise AutodiffError(
            f"backward: seed gradient shape {seed.shape} != output shape {output.value.shape}"
        )

    grads: dict[int, np.ndarray] = {id(output): seed.copy()}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        leaves.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
                leaves[key] = parent
    # Whatever is left was never an op output under this tape, i.e. a leaf.
    for key, tensor in leaves.items():
        if tensor.requires_grad:
            g = grads[key]
            tensor.grad = g if tensor.grad is None else tensor.grad + g


@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    failures: list = field(default_factory=list)  # (param_index, flat_index, analytic, numeric)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _rel_err(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradient_check(fn, params, h: float = 1e-5, tolerance: float = 1e-4, fd_fn=None) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn(params)`` (a scalar Tensor)
    against central finite differences, parameter by parameter.

    ``fd_fn(params) -> float`` evaluates the objective for the difference
    quotients; it defaults to ``fn`` but may be an independent implementation
    of the same function (any value disagreement then shows up as a gradient
    mismatch).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = fn(params)
    if out.value.ndim != 0:
        raise AutodiffError("gradient_check: fn must return a scalar")
    backward(tape, out)
    analytic = [p.grad_or_zeros().copy() for p in params]

    if fd_fn is None:
        def fd_fn(ps):
            return float(fn(ps).value)

    report = GradCheckReport(max_rel_err=0.0, tolerance=tolerance)
    for i, p in enumerate(params):
        flat = p.value.reshape(-1)
        flat_analytic = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = fd_fn(params)
            flat[j] = orig - h
            f_minus = fd_fn(params)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(flat_analytic[j])
            err = _rel_err(a, numeric)
            report.checked += 1
            if err > report.max_rel_err:
                report.max_rel_err = err
            if err > tolerance:
                report.failures.append((i, j, a, numeric))
    return report
