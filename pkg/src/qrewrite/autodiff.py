"""Reverse-mode automatic differentiation over dense numpy tensors.

The engine is deliberately small: strict 2-D matrix / vector semantics, no
broadcasting beyond row-vector bias addition, every op validated for shape
and finiteness. Graphs are built implicitly through parent links on the
output tensors; ``backward`` walks the graph once in reverse topological
order and returns a gradient map keyed by tensor.
"""

from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np

GradientMap = Dict["Tensor", np.ndarray]


class ShapeError(ValueError):
    """Input shapes are invalid for the requested operation."""


class NumericError(ArithmeticError):
    """An operation produced a non-finite value."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a single reduce: any NaN/Inf entry makes the sum non-finite
    if not np.isfinite(arr.sum()):
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff.

    ``data`` is an owned float32/float64 ndarray. ``requires_grad`` marks
    tensors that should receive entries in the gradient map; outputs of ops
    inherit it from their inputs. Tensors hash by identity.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fn: Callable[[np.ndarray, GradientMap], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return add(-self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor],
            grad_fn: Callable[[np.ndarray, GradientMap], None]) -> Tensor:
    """Wrap an op output, recording the node only when a parent needs grad."""
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _accum(grads: GradientMap, t: Tensor, g: np.ndarray) -> None:
    cur = grads.get(t)
    grads[t] = g if cur is None else cur + g


# -- primitive ops -------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    """Elementwise add; also matrix + row-vector bias, and tensor + scalar."""
    if not isinstance(b, Tensor):
        c = float(b)

        def grad_scalar(g, grads):
            if a.requires_grad:
                _accum(grads, a, g)

        return _result(a.data + c, "add", (a,), grad_scalar)

    if a.shape == b.shape:
        def grad_same(g, grads):
            if a.requires_grad:
                _accum(grads, a, g)
            if b.requires_grad:
                _accum(grads, b, g)

        return _result(a.data + b.data, "add", (a, b), grad_same)

    # matrix (m, n) + bias (n,) or (1, n)
    if a.data.ndim == 2 and b.data.ndim in (1, 2) and a.shape[-1] == b.data.shape[-1] \
            and (b.data.ndim == 1 or b.data.shape[0] == 1):
        def grad_bias(g, grads):
            if a.requires_grad:
                _accum(grads, a, g)
            if b.requires_grad:
                gb = g.sum(axis=0, keepdims=b.data.ndim == 2)
                _accum(grads, b, gb)

        return _result(a.data + b.data, "add", (a, b), grad_bias)

    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise multiply (same shape) or tensor * scalar."""
    if not isinstance(b, Tensor):
        c = float(b)

        def grad_scalar(g, grads):
            if a.requires_grad:
                _accum(grads, a, g * c)

        return _result(a.data * c, "mul", (a,), grad_scalar)

    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def grad(g, grads):
        if a.requires_grad:
            _accum(grads, a, g * b.data)
        if b.requires_grad:
            _accum(grads, b, g * a.data)

    return _result(a.data * b.data, "mul", (a, b), grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")

    def grad(g, grads):
        if a.requires_grad:
            _accum(grads, a, g @ b.data.T)
        if b.requires_grad:
            _accum(grads, b, a.data.T @ g)

    return _result(a.data @ b.data, "matmul", (a, b), grad)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got {a.shape}")

    def grad(g, grads):
        if a.requires_grad:
            _accum(grads, a, g.T)

    return _result(a.data.T.copy(), "transpose", (a,), grad)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad(g, grads):
        if a.requires_grad:
            _accum(grads, a, g * out * (1.0 - out))

    return _result(out, "sigmoid", (a,), grad)


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) computed without overflow; gradient is sigmoid(-x)."""
    x = a.data
    out = np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))),
                   x - np.log1p(np.exp(-np.abs(x))))

    def grad(g, grads):
        if a.requires_grad:
            s = np.empty_like(x)
            pos = x >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            s[~pos] = ex / (1.0 + ex)
            _accum(grads, a, g * (1.0 - s))

    return _result(out, "log_sigmoid", (a,), grad)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def grad(g, grads):
        if a.requires_grad:
            _accum(grads, a, g * (1.0 - out * out))

    return _result(out, "tanh", (a,), grad)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def grad(g, grads):
        if a.requires_grad:
            _accum(grads, a, g * (a.data > 0))

    return _result(out, "relu", (a,), grad)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out = 0.5 * x * (1.0 + t)

    def grad(g, grads):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
            dgelu = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            _accum(grads, a, g * dgelu)

    return _result(out, "gelu", (a,), grad)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data) if np.all(a.data > 0) else None
    if out is None:
        raise NumericError("log of non-positive value")

    def grad(g, grads):
        if a.requires_grad:
            _accum(grads, a, g / a.data)

    return _result(out, "log", (a,), grad)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction for stability."""
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g, grads):
        if a.requires_grad:
            dot = (g * out).sum(axis=axis, keepdims=True)
            _accum(grads, a, out * (g - dot))

    return _result(out, "softmax", (a,), grad)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization over the last axis of a 2-D input."""
    if x.data.ndim != 2:
        raise ShapeError("layer_norm: expected 2-D input")
    if x.shape[-1] != gamma.data.reshape(-1).shape[0]:
        raise ShapeError("layer_norm: gamma width mismatch")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gam = gamma.data.reshape(1, -1)
    bet = beta.data.reshape(1, -1)
    out = xhat * gam + bet

    def grad(g, grads):
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=0).reshape(gamma.shape)
            _accum(grads, gamma, gg)
        if beta.requires_grad:
            gb = g.sum(axis=0).reshape(beta.shape)
            _accum(grads, beta, gb)
        if x.requires_grad:
            dxhat = g * gam
            gx = inv * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            _accum(grads, x, gx)

    return _result(out, "layer_norm", (x, gamma, beta), grad)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer index; scatter-adds on backward."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("embedding: ids must be 1-D")
    if table.data.ndim != 2:
        raise ShapeError("embedding: table must be 2-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embedding: id out of range")
    out = table.data[idx]

    def grad(g, grads):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            _accum(grads, table, gt)

    return _result(out, "embedding", (table,), grad)


def tensor_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out)

    def grad(g, grads):
        if a.requires_grad:
            if axis is None:
                ga = np.full_like(a.data, float(np.asarray(g).reshape(-1)[0]))
            else:
                ga = np.broadcast_to(np.expand_dims(g, axis) if not keepdims else g,
                                     a.data.shape).copy()
            _accum(grads, a, ga)

    return _result(out, "sum", (a,), grad)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input list")
    if axis not in (0, 1):
        raise ShapeError("concat: axis must be 0 or 1")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad(g, grads):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                piece = g[lo:hi] if axis == 0 else g[:, lo:hi]
                _accum(grads, p, piece)

    return _result(data, "concat", tuple(parts), grad)


def narrow(a: Tensor, key) -> Tensor:
    """Slice with numpy basic indexing (ints and slices only)."""
    out = a.data[key]
    out = np.ascontiguousarray(out)

    def grad(g, grads):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[key] = g
            _accum(grads, a, ga)

    return _result(out, "slice", (a,), grad)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def grad(g, grads):
        if a.requires_grad:
            _accum(grads, a, g.reshape(a.data.shape))

    return _result(a.data.reshape(shape).copy(), "reshape", (a,), grad)


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Token cross-entropy from logits, row per position, stable log-softmax."""
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy: logits must be (rows, classes)")
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    rows = logits.shape[0]
    if tgt.shape[0] != rows:
        raise ShapeError("cross_entropy: one target per logit row required")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy: target out of range")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(z[:, 0])
    nll = lse - x[np.arange(rows), tgt]
    if reduction == "mean":
        val = nll.mean()
        scale = 1.0 / rows
    elif reduction == "sum":
        val = nll.sum()
        scale = 1.0
    else:
        raise ValueError(f"cross_entropy: unknown reduction {reduction!r}")

    def grad(g, grads):
        if logits.requires_grad:
            p = e / z
            p[np.arange(rows), tgt] -= 1.0
            _accum(grads, logits, float(np.asarray(g).reshape(-1)[0]) * scale * p)

    return _result(np.asarray(val, dtype=x.dtype), "cross_entropy", (logits,), grad)


# -- backward pass --------------------------------------------------------

def backward(loss: Tensor) -> GradientMap:
    """Run one reverse pass from a scalar loss.

    Returns gradients for every requires_grad tensor reachable from the
    loss. Forward values are never mutated; calling twice on the same graph
    yields bit-identical maps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")

    # iterative post-order topological sort (graphs can be chain-deep)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p._grad_fn is not None:
                stack.append((p, False))
            elif id(p) not in visited:
                # leaf: mark visited so it is not re-pushed
                visited.add(id(p))

    grads: GradientMap = {loss: np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.get(node)
        if g is None or node._grad_fn is None:
            continue
        node._grad_fn(g, grads)
    return {t: g for t, g in grads.items() if t.requires_grad}


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a pure scalar function of ``x``. Error per coordinate is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
    """
    if eps <= 0:
        raise ValueError("gradient_check: eps must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True, dtype=x.data.dtype)
    out = f(probe)
    analytic = backward(out).get(probe)
    if analytic is None:
        analytic = np.zeros_like(probe.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        pert = x.data.copy().reshape(-1)
        pert[i] = orig + eps
        hi = f(Tensor(pert.reshape(x.data.shape), dtype=x.data.dtype)).item()
        pert[i] = orig - eps
        lo = f(Tensor(pert.reshape(x.data.shape), dtype=x.data.dtype)).item()
        nflat[i] = (hi - lo) / (2.0 * eps)

    denom = np.abs(analytic) + np.abs(numeric) + 1e-12
    return float(np.max(np.abs(analytic - numeric) / denom))
