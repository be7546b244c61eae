"""Dense float64 tensors with tape-free reverse-mode autodiff.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
result keeps references to its parents and a closure that maps the upstream
gradient to parent gradients. :func:`backward` walks that DAG once in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "NonFiniteError",
    "add",
    "backward",
    "check_finite",
    "cross_entropy",
    "embedding_lookup",
    "grad_check",
    "layer_norm",
    "matmul",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "scale",
    "softmax",
    "tensor_sum",
    "transpose",
]


class GraphError(RuntimeError):
    """Raised on misuse of the autodiff graph (double backward, non-scalar loss)."""


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'!r})"

    # Operator sugar; kept to the same-shape op set.
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_recording = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without building a graph."""
    global _recording
    prev, _recording = _recording, False
    try:
        yield
    finally:
        _recording = prev


def make_node(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    """Wrap ``data`` as an op output, recording ``grad_fn`` only if needed.

    ``grad_fn(upstream)`` must return one gradient (or ``None``) per parent.
    """
    out = Tensor(data)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
        out._op = op
    return out


def _shape_error(op: str, a: tuple, b: tuple) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {a} and {b}")


# -- forward ops -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``(..., k) @ (k, n)`` or equal-batch ``(..., m, k) @ (..., k, n)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    if A.ndim < 1 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise _shape_error("matmul", A.shape, B.shape)
    if B.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
        raise _shape_error("matmul", A.shape, B.shape)
    out = A @ B

    def grad_fn(g):
        if B.ndim == 2:
            ga = g @ B.T
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(B, -1, -2)
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return make_node(out, (a, b), grad_fn, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a rank-1 bias over the last axis of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    bias = B.ndim == 1 and A.ndim > 1 and A.shape[-1] == B.shape[0]
    if A.shape != B.shape and not bias:
        raise _shape_error("add", A.shape, B.shape)

    def grad_fn(g):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g
        return g, gb

    return make_node(A + B, (a, b), grad_fn, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    if A.shape != B.shape:
        raise _shape_error("mul", A.shape, B.shape)

    def grad_fn(g):
        return g * B, g * A

    return make_node(A * B, (a, b), grad_fn, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_node(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    X = x.data
    pos = X > 0
    return make_node(np.where(pos, X, 0.0), (x,), lambda g: (g * pos,), "relu")


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return make_node(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    X = x.data
    d = X.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise _shape_error("layer_norm", X.shape, gain.shape)
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data
    out = xhat * G + bias.data

    def grad_fn(g):
        flat_g = g.reshape(-1, d)
        gg = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        gbias = flat_g.sum(axis=0)
        gx_hat = g * G
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, gg, gbias

    return make_node(out, (x, gain, bias), grad_fn, "layer_norm")


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``.

    ``mask`` is a boolean array broadcastable to ``x`` marking allowed
    positions; disallowed positions get probability exactly 0. Every slice
    must keep at least one allowed position.
    """
    X = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, X.shape)
        X = np.where(mask, X, -np.inf)
    shifted = X - X.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), grad_fn, "softmax")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"embedding_lookup: ids must be integers, got {ids.dtype}")
    V, D = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding_lookup: id out of range for table of {V} rows")

    def grad_fn(g):
        gt = np.zeros((V, D))
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, D))
        return (gt,)

    return make_node(table.data[ids], (table,), grad_fn, "embedding")


def cross_entropy(logits: Tensor, targets, pad_id: int | None = 0) -> Tensor:
    """Mean token cross-entropy, skipping positions whose target equals ``pad_id``."""
    targets = np.asarray(targets)
    Z = logits.data
    if Z.shape[:-1] != targets.shape:
        raise _shape_error("cross_entropy", Z.shape, targets.shape)
    V = Z.shape[-1]
    flat_z = Z.reshape(-1, V)
    flat_t = targets.reshape(-1)
    keep = np.ones(flat_t.shape, dtype=bool) if pad_id is None else flat_t != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: every target position is padding")
    shifted = flat_z - flat_z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(flat_t.size)
    nll = logsum - shifted[rows, flat_t]
    loss = float(nll[keep].sum() / count)

    def grad_fn(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, flat_t] -= 1.0
        p *= (keep / count)[:, None] * float(g)
        return (p.reshape(Z.shape),)

    return make_node(np.array(loss), (logits,), grad_fn, "cross_entropy")


# -- graph traversal ---------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate; the graph is released afterwards, so a second
    call on the same loss raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; re-run the forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
    loss._consumed = True


def check_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{what} contains NaN or Inf")


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    indices: Sequence[int] | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between backprop and central differences.

    The error per component is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps gradients that are exactly zero (e.g. attention key biases) from
    turning finite-difference noise into a relative error of 1.
    ``indices`` restricts the check to a subset of flat positions of ``x``.
    """
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise GraphError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out)
    analytic = x.grad.reshape(-1).copy() if x.grad is not None else np.zeros(x.data.size)
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        orig = flat[i]
        with no_grad():
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), floor)
        worst = max(worst, err)
    x.grad = None
    return worst
