"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

NumPy-backed. Just enough ops to train a small transformer encoder
classifier in float32 (training default) or float64 (gradient-check mode).
Graph nodes are created lazily: an op only records a backward closure when
at least one input requires gradients, so frozen-teacher forwards build no
graph at all.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ShapeError

Array = np.ndarray

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

# Probabilities are clamped to [PROB_EPS, 1] before any log.
PROB_EPS = 1e-12


class Tensor:
    """A NumPy array plus the bookkeeping needed for reverse-mode autodiff.

    `_parents` and `_backward` form the implicit computation graph; `backward`
    topologically sorts it and visits every node exactly once, after all of
    its consumers.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: Optional[Array] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[Array], None]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: Array) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; the free functions below do the work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def item(self) -> float:
        return float(self.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(data: Array, parents: Sequence[Tensor], backward: Callable[[Array], None]) -> Tensor:
    """Wrap an op result; only records the closure if a parent needs grads."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum `g` down to `shape`, inverting NumPy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def topo_order(root: Tensor) -> list[Tensor]:
    """Topological order of the graph below `root` (parents before consumers)."""
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
    """Populate `.grad` on every requires_grad tensor reachable from `loss`."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        a2 = _as_tensor(a)
        out_data = a2.data + b

        def bwd_const(g: Array) -> None:
            a2._accumulate(_unbroadcast(g, a2.data.shape))

        return _node(out_data, [a2], bwd_const)

    out_data = a.data + b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(out_data, [a, b], bwd)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        a2 = _as_tensor(a)
        out_data = a2.data * b

        def bwd_const(g: Array) -> None:
            a2._accumulate(_unbroadcast(g * b, a2.data.shape))

        return _node(out_data, [a2], bwd_const)

    out_data = a.data * b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, [a, b], bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 1 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=1D @ >=2D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bwd(g: Array) -> None:
        # dA = g @ B^T, dB = A^T @ g; stacked batch dims are summed away
        # by _unbroadcast when one operand is an unbatched weight matrix.
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape))

    return _node(out_data, [a, b], bwd)


def reshape(x: Tensor, shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = x.data.reshape(shape)

    def bwd(g: Array) -> None:
        x._accumulate(g.reshape(x.data.shape))

    return _node(out_data, [x], bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out_data = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(g: Array) -> None:
        x._accumulate(np.transpose(g, inv))

    return _node(out_data, [x], bwd)


def getitem(x: Tensor, key) -> Tensor:
    out_data = x.data[key]

    def bwd(g: Array) -> None:
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        x._accumulate(gx)

    return _node(out_data, [x], bwd)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g: Array) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    return _node(out_data, [x], bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size // max(out_data.size, 1)

    def bwd(g: Array) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape) / n)

    return _node(out_data, [x], bwd)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def bwd(g: Array) -> None:
        x._accumulate(g * (x.data > 0))

    return _node(out_data, [x], bwd)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU (the variant differentiated here is exact
    for its own gradient checks)."""
    u = _GELU_C * (x.data + _GELU_A * x.data**3)
    t = np.tanh(u)
    out_data = 0.5 * x.data * (1.0 + t)

    def bwd(g: Array) -> None:
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du
        x._accumulate(g * dx)

    return _node(out_data, [x], bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtraction)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g: Array) -> None:
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate(y * (g - dot))

    return _node(y, [x], bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale/shift with learned gamma/beta."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = gamma.data * xhat + beta.data

    def bwd(g: Array) -> None:
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, x.data.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, x.data.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gg = g * gamma.data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((gg - m1 - xhat * m2) * inv)

    return _node(out_data, [x, gamma, beta], bwd)


def embedding(table: Tensor, ids: Array) -> Tensor:
    """Row gather; the gradient scatter-adds back into the table."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.data.shape[0]:
        raise IndexError(f"ids out of range for table with {table.data.shape[0]} rows")
    out_data = table.data[ids]

    def bwd(g: Array) -> None:
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        table._accumulate(gt)

    return _node(out_data, [table], bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Train-mode inverted dropout. Callers replay `rng` per step for
    bitwise-deterministic runs; eval paths simply skip the call."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    scale = 1.0 / (1.0 - rate)
    out_data = x.data * keep * scale

    def bwd(g: Array) -> None:
        x._accumulate(g * keep * scale)

    return _node(out_data, [x], bwd)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels: Array) -> Tensor:
    """Mean negative log-softmax of the true class over the batch."""
    labels = np.asarray(labels)
    n, c = logits.data.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise IndexError(f"label out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    out_data = np.asarray((lse - z[np.arange(n), labels]).mean(), dtype=logits.dtype)

    def bwd(g: Array) -> None:
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        logits._accumulate(g * p / n)

    return _node(out_data, [logits], bwd)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) summed over the class axis, averaged over the batch.

    Both inputs are clamped to [PROB_EPS, 1] before the log; clamped
    entries get zero gradient.
    """
    pc = np.clip(p.data, PROB_EPS, 1.0)
    qc = np.clip(q.data, PROB_EPS, 1.0)
    n = p.data.shape[0] if p.data.ndim > 1 else 1
    log_ratio = np.log(pc) - np.log(qc)
    out_data = np.asarray((pc * log_ratio).sum() / n, dtype=p.dtype)

    def bwd(g: Array) -> None:
        if p.requires_grad:
            p._accumulate(g * (log_ratio + 1.0) * (p.data == pc) / n)
        if q.requires_grad:
            q._accumulate(g * (-pc / qc) * (q.data == qc) / n)

    return _node(out_data, [p, q], bwd)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with per-parameter first/second-moment state.

    The training loop masks gradients before `step`; `zero_state_where`
    clears the moments of freshly pruned weights so stale momentum cannot
    push on frozen zeros.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_state_where(self, name: str, pruned: Array) -> None:
        self.m[name][pruned] = 0.0
        self.v[name][pruned] = 0.0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]],
    tolerance: float,
    step: float = 1e-5,
) -> dict[str, float]:
    """Compare analytic gradients of `f()` against central finite differences.

    `f` must be deterministic and rebuild its graph on every call. Returns
    the per-parameter max relative error (normalized by the parameter's
    gradient scale) and raises AssertionError if any exceeds `tolerance`.
    """
    params = list(params)
    for _, p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = {name: p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for name, p in params}

    report: dict[str, float] = {}
    for name, p in params:
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().data)
            flat[i] = orig - step
            lo = float(f().data)
            flat[i] = orig
            num[i] = (hi - lo) / (2.0 * step)
        num = num.reshape(p.data.shape)
        scale = max(np.abs(num).max(), 1e-12)
        err = float(np.abs(analytic[name] - num).max() / scale)
        report[name] = err
        if err > tolerance:
            raise AssertionError(f"grad check failed for {name}: rel err {err:.3e} > {tolerance:.1e}")
    return report
