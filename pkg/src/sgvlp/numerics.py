"""Dense tensors with reverse-mode gradients, the Adam optimizer, and the
warmup/decay learning-rate schedule.

Tensors wrap numpy buffers (rank <= 4, float32 or float64); every op
records a backward closure, and `backward` runs the tape in reverse
topological order. matmul stays on BLAS; gelu/layer_norm/Adam dispatch to
`sgvlp.kernels`.
"""

from __future__ import annotations

import numpy as np

from sgvlp import kernels


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class GradientError(RuntimeError):
    """Backward called on an unsuitable graph or missing gradients."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        if self.data.ndim > 4:
            raise ShapeError(f"rank {self.data.ndim} exceeds 4")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def _needs_grad(*tensors):
    return any(t.requires_grad or t._parents for t in tensors)


def _out(data, parents, backward):
    if _needs_grad(*parents):
        return Tensor(data, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Reduce gradient `g` back to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add {a.shape} vs {b.shape}") from exc

    def backward(g, out):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return _out(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul {a.shape} vs {b.shape}") from exc

    def backward(g, out):
        a.accumulate(_unbroadcast(g * b.data, a.shape))
        b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _out(data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    def backward(g, out):
        a.accumulate(g * s)

    return _out(a.data * s, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2; reshape vectors")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def backward(g, out):
        a.accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        b.accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _out(data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g, out):
        a.accumulate(g.reshape(a.shape))

    return _out(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g, out):
        a.accumulate(g.transpose(inverse))

    return _out(a.data.transpose(axes), (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g, out):
        for t, lo, hi in zip(tensors, offsets, offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t.accumulate(g[tuple(idx)])

    return _out(np.concatenate([t.data for t in tensors], axis=axis),
                tuple(tensors), backward)


def slice_(a: Tensor, index) -> Tensor:
    def backward(g, out):
        full = np.zeros_like(a.data)
        full[index] = g
        a.accumulate(full)

    return _out(a.data[index], (a,), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"ids outside embedding table of {table.shape[0]} rows")

    def backward(g, out):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1),
                  g.reshape(-1, table.shape[1]))
        table.accumulate(full)

    return _out(table.data[ids], (table,), backward)


def gelu(a: Tensor) -> Tensor:
    def backward(g, out):
        a.accumulate(kernels.gelu_bwd(a.data, g))

    return _out(kernels.gelu_fwd(a.data), (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps=1e-12) -> Tensor:
    """Normalize the last axis; constant rows map to zero before affine."""
    rows = a.data.reshape(-1, a.shape[-1])
    y, mean, rstd = kernels.layer_norm_fwd(rows, gain.data, bias.data, eps)

    def backward(g, out):
        gx, ggain, gbias = kernels.layer_norm_bwd(
            rows, gain.data, mean, rstd, g.reshape(rows.shape))
        a.accumulate(gx.reshape(a.shape))
        gain.accumulate(ggain)
        bias.accumulate(gbias)

    return _out(y.reshape(a.shape), (a, gain, bias), backward)


def softmax(a: Tensor, axis=-1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g, out):
        inner = (g * y).sum(axis=axis, keepdims=True)
        a.accumulate((g - inner) * y)

    return _out(y, (a,), backward)


def dropout(a: Tensor, rate: float, rng) -> Tensor:
    """Inverted dropout; `rate` 0 is the identity."""
    if rate == 0.0:
        return a
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(a.data.dtype)

    def backward(g, out):
        a.accumulate(g * keep)

    return _out(a.data * keep, (a,), backward)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g, out):
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(g, a.shape).copy())

    return _out(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cross_entropy(logits: Tensor, labels, ignore_index=-1) -> Tensor:
    """Mean negative log-likelihood over rows whose label != ignore_index.

    `logits` is (N, V); returns a scalar tensor, 0 when nothing is labeled.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    labels = np.asarray(labels)
    valid = labels != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor(np.asarray(0.0, dtype=logits.data.dtype))
    rows = np.nonzero(valid)[0]
    x = logits.data[rows]
    y = labels[rows]
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    log_probs = (x - m) - np.log(z)
    loss = -log_probs[np.arange(n_valid), y].mean()

    def backward(g, out):
        grad_rows = e / z
        grad_rows[np.arange(n_valid), y] -= 1.0
        full = np.zeros_like(logits.data)
        full[rows] = grad_rows * (g / n_valid)
        logits.accumulate(full)

    return _out(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    targets = np.asarray(targets, dtype=logits.data.dtype)
    x = logits.data
    # stable softplus(x) - x*y
    loss = (np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))).mean()

    def backward(g, out):
        sig = 1.0 / (1.0 + np.exp(-x))
        logits.accumulate((sig - targets) * (g / x.size))

    return _out(np.asarray(loss, dtype=x.dtype), (logits,), backward)


def _topo_order(root: Tensor) -> list[Tensor]:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Populate gradients of every requires_grad tensor reachable from the
    scalar `loss`. A second call without zeroing accumulates.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise GradientError(f"backward needs a scalar, got shape {loss.shape}")

    order = _topo_order(loss)
    # keep previously accumulated parameter grads out of this pass's routing
    saved = [(t, t.grad) for t in order if t.requires_grad and t.grad is not None]
    for t in order:
        t.grad = None

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad, node)
    for node in order:
        if not node.requires_grad:
            node.grad = None

    for t, g in saved:
        if t.grad is None:
            t.grad = g
        else:
            t.grad = t.grad + g


class Parameter(Tensor):
    """Leaf tensor updated by the optimizer."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def truncated_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal draws redrawn until within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class AdamState:
    """First/second moments and step counter for a named parameter dict."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params, state: AdamState, lr: float):
    """Bias-corrected Adam update; zeroes gradients afterwards."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise GradientError(f"missing gradient for {missing[0]!r}")
    state.t += 1
    for name, p in params.items():
        kernels.adam_update(p.data, p.grad, state.m[name], state.v[name],
                            state.t, lr, state.beta1, state.beta2, state.eps)
        p.grad = None


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most `max_norm`."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.square(p.grad, dtype=np.float64).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


def noam_lr(step: int, d_model: int, warmup: int, peak: float = 1e-4) -> float:
    """Warmup-then-inverse-sqrt schedule, rescaled to hit `peak` at the
    warmup step. The d_model factor cancels under the rescaling but is kept
    so the raw formula stays recognizable."""
    if step < 1 or warmup < 1:
        raise ValueError("step and warmup must be >= 1")
    raw = d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)
    return raw * peak / (d_model ** -0.5 * warmup ** -0.5)
