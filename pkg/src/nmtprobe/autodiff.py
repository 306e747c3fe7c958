"""Dense float64 tensors with reverse-mode automatic differentiation.

The numeric core of the toolkit: a :class:`Tensor` wraps a numpy array and
remembers the operation that produced it, so ``backward`` on a scalar loss
fills ``grad`` on every parameter that contributed to it. Nodes are created
eagerly; creation order is a valid topological order by construction, and the
backward pass visits nodes in exact reverse of a topological sort rooted at
the loss.

Conventions:
  * all values are float64
  * gradients accumulate across backward calls until explicitly zeroed
  * sigmoid / tanh / softmax / log_softmax are computed in numerically
    stable forms and return finite values for finite inputs
  * dropout uses inverted scaling, so evaluation mode is the identity
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus the bookkeeping reverse-mode AD needs."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def sum(self):
        return tsum(self)


class Parameter(Tensor):
    """A named trainable tensor; ``grad`` always has the shape of ``data``."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to `shape` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitive operations
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward():
        _accumulate(a, _unbroadcast(out.grad, a.data.shape))
        _accumulate(b, _unbroadcast(out.grad, b.data.shape))

    out = _node(a.data + b.data, (a, b), backward)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward():
        _accumulate(a, -out.grad)

    out = _node(-a.data, (a,), backward)
    return out


def mul(a, b) -> Tensor:
    """Elementwise product (with numpy broadcasting)."""
    a, b = _as_tensor(a), _as_tensor(b)

    def backward():
        _accumulate(a, _unbroadcast(out.grad * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(out.grad * a.data, b.data.shape))

    out = _node(a.data * b.data, (a, b), backward)
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward():
        _accumulate(a, out.grad @ b.data.T)
        _accumulate(b, a.data.T @ out.grad)

    out = _node(a.data @ b.data, (a, b), backward)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward():
        _accumulate(x, out.grad * s * (1.0 - s))

    out = _node(s, (x,), backward)
    return out


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)

    def backward():
        _accumulate(x, out.grad * (1.0 - t * t))

    out = _node(t, (x,), backward)
    return out


def relu(x) -> Tensor:
    x = _as_tensor(x)

    def backward():
        _accumulate(x, out.grad * (x.data > 0))

    out = _node(np.maximum(x.data, 0.0), (x,), backward)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward():
        dot = (out.grad * y).sum(axis=axis, keepdims=True)
        _accumulate(x, (out.grad - dot) * y)

    out = _node(y, (x,), backward)
    return out


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward():
        _accumulate(x, out.grad - np.exp(y) * out.grad.sum(axis=axis, keepdims=True))

    out = _node(y, (x,), backward)
    return out


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def backward():
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * data.ndim
            idx[axis] = slice(int(lo), int(hi))
            _accumulate(p, out.grad[tuple(idx)])

    out = _node(data, tuple(parts), backward)
    return out


def narrow(x, key) -> Tensor:
    """Basic (slice / integer) indexing; backward scatters into zeros."""
    x = _as_tensor(x)

    def backward():
        g = np.zeros_like(x.data)
        g[key] += out.grad
        _accumulate(x, g)

    out = _node(np.array(x.data[key]), (x,), backward)
    return out


def embedding(table, ids) -> Tensor:
    """Row lookup into `table`; gradient scatter-adds into the looked-up rows."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def backward():
        g = np.zeros_like(table.data)
        np.add.at(g, ids, out.grad)
        _accumulate(table, g)

    out = _node(table.data[ids], (table,), backward)
    return out


def dropout(x, p: float, rng: np.random.Generator | None = None, train: bool = True) -> Tensor:
    """Inverted dropout: zero entries with probability p, scale the rest by 1/(1-p).

    In evaluation mode (train=False) the input tensor is returned unchanged.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    keep = 1.0 - p
    mask = (rng.random(x.data.shape) < keep).astype(np.float64) / keep

    def backward():
        _accumulate(x, out.grad * mask)

    out = _node(x.data * mask, (x,), backward)
    return out


def tsum(x) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    x = _as_tensor(x)

    def backward():
        _accumulate(x, np.full_like(x.data, float(out.grad)))

    out = _node(x.data.sum(), (x,), backward)
    return out


def cross_entropy(logits, targets, mask=None, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer `targets` under row-wise softmax.

    Fused with log-softmax for stability. `mask` (same length as targets,
    0/1) excludes rows; "mean" divides by the number of unmasked rows,
    "sum" just totals them.
    """
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or t.shape != (logits.data.shape[0],):
        raise ValueError("cross_entropy expects (N, C) logits and (N,) targets")
    if t.min(initial=0) < 0 or t.max(initial=0) >= logits.data.shape[1]:
        raise ValueError("target id outside logit columns")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    m = np.ones(t.shape, dtype=np.float64) if mask is None else np.asarray(mask, dtype=np.float64)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(t.shape[0])
    nll = -logp[rows, t]
    denom = m.sum() if reduction == "mean" else 1.0
    if denom == 0.0:
        raise ValueError("cross_entropy mean over an all-masked batch")
    value = float((nll * m).sum() / denom)

    def backward():
        g = np.exp(logp)
        g[rows, t] -= 1.0
        g *= (m / denom)[:, None] * float(out.grad)
        _accumulate(logits, g)

    out = _node(value, (logits,), backward)
    return out


# --------------------------------------------------------------------------
# backward pass and gradient checking
# --------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss; parameter grads accumulate."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


def zero_grads(params) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def grad_check(build_loss, params, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central-difference gradients.

    `build_loss` must be a deterministic closure over `params` that returns a
    scalar Tensor (re-run for every finite-difference probe). The error for
    one entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"eps must be in (0, 1e-3], got {eps}")
    zero_grads(params)
    backward(build_loss())
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, g in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(build_loss().data)
                flat[i] = orig - eps
                down = float(build_loss().data)
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                denom = max(abs(gflat[i]), abs(numeric), 1e-8)
                worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------

def clip_global_norm(params, max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most max_norm; returns the norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    total = total ** 0.5
    if total > max_norm > 0.0:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


class SGD:
    """Plain SGD with optional global-norm gradient clipping."""

    def __init__(self, params, lr: float, clip_norm: float | None = None):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.clip_norm = clip_norm

    def step(self) -> None:
        if self.clip_norm is not None:
            clip_global_norm(self.params, self.clip_norm)
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        zero_grads(self.params)


class Adam:
    """Adam with bias correction; moment buffers persist per parameter."""

    def __init__(self, params, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * p.grad
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * p.grad * p.grad
            m_hat = self._m[i] / (1.0 - b1 ** self.t)
            v_hat = self._v[i] / (1.0 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------
# Layout: a numpy .npz archive. Every parameter is stored under the key
# "param:<name>" as a float64 array (row-major); the key "__meta__" holds a
# JSON string with the architecture descriptor. See README for the contract.

_META_KEY = "__meta__"
_PARAM_PREFIX = "param:"


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Write named arrays plus a JSON meta block; atomic via rename."""
    arrays = {_PARAM_PREFIX + name: np.asarray(value, dtype=np.float64)
              for name, value in params.items()}
    arrays[_META_KEY] = np.array(json.dumps(meta or {}, sort_keys=True))
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint; returns ({name: array}, meta dict)."""
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive[_META_KEY]))
        params = {key[len(_PARAM_PREFIX):]: archive[key]
                  for key in archive.files if key.startswith(_PARAM_PREFIX)}
    return params, meta
