"""Dense float64 tensors with a small reverse-mode tape.

The tape only knows a fixed vocabulary of ops. Each op records its name,
parents and whatever context its gradient rule needs; ``backward`` walks the
graph in reverse topological order and dispatches on the op name.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "ctx")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.ctx: tuple = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def backward(self) -> None:
        if self.data.size != 1:
            raise RuntimeError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.op is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = _BACKWARD[node.op](node, g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not _needs_grad(p):
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t.op is not None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], ctx: tuple = ()) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(_needs_grad(p) for p in parents):
        out.op = op
        out.parents = tuple(parents)
        out.ctx = ctx
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with numpy batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(np.matmul(a.data, b.data), "matmul", (a, b))


def _matmul_grad(node: Tensor, g: np.ndarray):
    a, b = node.parents
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
    if b.data.ndim == 2 and a.data.ndim > 2:
        k = a.shape[-1]
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, "add", (a, b))


def _add_grad(node: Tensor, g: np.ndarray):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, "mul", (a, b))


def _mul_grad(node: Tensor, g: np.ndarray):
    a, b = node.parents
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, "scale", (a,), (float(c),))


def _scale_grad(node: Tensor, g: np.ndarray):
    return (g * node.ctx[0],)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    return _make(np.asarray(a.data.sum()), "sum", (a,))


def _sum_grad(node: Tensor, g: np.ndarray):
    (a,) = node.parents
    return (np.broadcast_to(g, a.shape).copy(),)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), "reshape", (a,))


def _reshape_grad(node: Tensor, g: np.ndarray):
    return (g.reshape(node.parents[0].shape),)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    return _make(np.ascontiguousarray(a.data.transpose(axes)), "transpose", (a,), (axes,))


def _transpose_grad(node: Tensor, g: np.ndarray):
    return (g.transpose(np.argsort(node.ctx[0])),)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows: non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return _make(p, "softmax", (x,))


def _softmax_grad(node: Tensor, g: np.ndarray):
    p = node.data
    return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return _make(xhat * gain.data + bias.data, "layer_norm", (x, gain, bias), (xhat, rstd))


def _layer_norm_grad(node: Tensor, g: np.ndarray):
    x, gain, bias = node.parents
    xhat, rstd = node.ctx
    d = x.shape[-1]
    gx_hat = g * gain.data
    gx = rstd / d * (
        d * gx_hat
        - gx_hat.sum(axis=-1, keepdims=True)
        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
    )
    red = tuple(range(g.ndim - 1))
    return gx, (g * xhat).sum(axis=red), g.sum(axis=red)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``table[ids]``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding: id out of range")
    return _make(table.data[ids], "embedding", (table,), (ids,))


def _embedding_grad(node: Tensor, g: np.ndarray):
    (table,) = node.parents
    ids = node.ctx[0]
    gt = np.zeros_like(table.data)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
    return (gt,)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    th = np.tanh(GELU_C * (xd + GELU_K * (xd * xd * xd)))
    return _make(0.5 * xd * (1.0 + th), "gelu", (x,), (th,))


def _gelu_grad(node: Tensor, g: np.ndarray):
    (x,) = node.parents
    (th,) = node.ctx
    xd = x.data
    du = GELU_C * (1.0 + 3.0 * GELU_K * xd * xd)
    return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du),)


def softplus(x: Tensor) -> Tensor:
    return _make(np.logaddexp(0.0, x.data), "softplus", (x,))


def _softplus_grad(node: Tensor, g: np.ndarray):
    (x,) = node.parents
    return (g * _sigmoid(x.data),)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_masked(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Sum over masked positions of ``-log softmax(logits)[target]``.

    ``logits`` has shape ``(..., N, V)``; ``targets`` and ``mask`` have shape
    ``(..., N)``. Positions with ``mask`` false contribute exactly zero.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ShapeError(
            f"cross_entropy_masked: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}"
        )
    logp = log_softmax(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -np.where(mask, picked, 0.0).sum()
    return _make(np.asarray(loss), "cross_entropy", (logits,), (logp, targets, mask))


def _cross_entropy_grad(node: Tensor, g: np.ndarray):
    logp, targets, mask = node.ctx
    grad = np.exp(logp)
    np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1.0, -1)
    grad *= mask[..., None]
    return (grad * g,)


_BACKWARD: dict[str, Callable] = {
    "matmul": _matmul_grad,
    "add": _add_grad,
    "mul": _mul_grad,
    "scale": _scale_grad,
    "sum": _sum_grad,
    "reshape": _reshape_grad,
    "transpose": _transpose_grad,
    "softmax": _softmax_grad,
    "layer_norm": _layer_norm_grad,
    "embedding": _embedding_grad,
    "gelu": _gelu_grad,
    "softplus": _softplus_grad,
    "cross_entropy": _cross_entropy_grad,
}
