"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float64 by default, float32 selectable) and
record the operations applied to them.  Calling :func:`backward` on a
scalar result walks the recorded graph in reverse topological order,
accumulates gradients into every tensor that requires them, and then
clears the graph so a tensor can be reused in a fresh forward pass.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

EPS_LOG = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ParameterError(ValueError):
    """Raised for invalid scalar parameters (e.g. non-positive temperature)."""


class ValidationError(ValueError):
    """Raised by debug-mode input validation."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.data.dtype)))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + g


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))
    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _make(a.data / b.data, (a, b), bwd)


def power(a: Tensor, p: float) -> Tensor:
    def bwd(g):
        _accumulate(a, g * p * np.power(a.data, p - 1))
    return _make(np.power(a.data, p), (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * out_data)
    return _make(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, g / a.data)
    return _make(np.log(a.data), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        _accumulate(a, g * mask)
    return _make(a.data * mask, (a,), bwd)


# -- reductions ---------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, a.shape).copy())
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / n, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg / n, a.shape).copy())
    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")

    def bwd(g):
        _accumulate(a, g.T)
    return _make(a.data.T.copy(), (a,), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.shape[0] for p in parts]

    def bwd(g):
        off = 0
        for p, n in zip(parts, sizes):
            _accumulate(p, g[off:off + n])
            off += n
    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd)


# -- activations / fused layers ------------------------------------------------

def maxout_rows(x: Tensor, k: int) -> Tensor:
    """Max over consecutive groups of k units; ties route to the lowest index."""
    if x.ndim != 2:
        raise ShapeError(f"maxout expects a 2-D tensor, got shape {x.shape}")
    b, d = x.shape
    if d % k != 0:
        raise ShapeError(f"maxout group size {k} does not divide width {d}")
    grouped = x.data.reshape(b, d // k, k)
    idx = grouped.argmax(axis=2)

    def bwd(g):
        gx = np.zeros_like(grouped)
        np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
        _accumulate(x, gx.reshape(b, d))
    return _make(grouped.max(axis=2), (x,), bwd)


def l2_normalize_rows(z: Tensor, epsilon: float = 1e-12) -> Tensor:
    """Scale each row to unit Euclidean norm; rows with norm <= epsilon are
    divided by epsilon instead (exact-zero rows stay zero)."""
    norms = np.linalg.norm(z.data, axis=1, keepdims=True)
    denom = np.maximum(norms, epsilon)
    out_data = z.data / denom
    clipped = norms <= epsilon

    def bwd(g):
        # For free rows: d(z/|z|) = (g - y (g.y)) / |z|.  Clipped rows are z/eps.
        dot = (g * out_data).sum(axis=1, keepdims=True)
        gz = np.where(clipped, g / epsilon, (g - out_data * dot) / denom)
        _accumulate(z, gz)
    return _make(out_data, (z,), bwd)


def softmax_rows(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Row softmax of logits/temperature with max-subtraction for stability."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    scaled = logits.data / temperature
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    e = np.exp(scaled)
    probs = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        inner = (g * probs).sum(axis=1, keepdims=True)
        _accumulate(logits, probs * (g - inner) / temperature)
    return _make(probs, (logits,), bwd)


def cross_entropy_rows(target: Tensor, pred: Tensor,
                       epsilon_log: float = EPS_LOG,
                       validate: bool = False) -> Tensor:
    """Mean over rows of -sum_j target[j] * log(pred[j] + epsilon_log).

    Both inputs must be row-stochastic; set validate=True to enforce that.
    """
    if target.shape != pred.shape:
        raise ShapeError(f"cross-entropy shapes disagree: {target.shape} vs {pred.shape}")
    if validate:
        for name, t in (("target", target), ("pred", pred)):
            sums = t.data.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(t.data < 0):
                raise ValidationError(f"{name} rows are not stochastic")
    b = target.shape[0]
    logp = np.log(pred.data + epsilon_log)

    def bwd(g):
        _accumulate(pred, -(g / b) * target.data / (pred.data + epsilon_log))
        _accumulate(target, -(g / b) * logp)
    return _make(np.asarray(-(target.data * logp).sum() / b), (target, pred), bwd)


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy from raw logits, computed in the stable form
    max(x,0) - x*t + log(1 + exp(-|x|))."""
    if logits.shape != targets.shape:
        raise ShapeError(f"bce shapes disagree: {logits.shape} vs {targets.shape}")
    x, t = logits.data, targets.data
    n = x.size
    vals = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-x))

    def bwd(g):
        _accumulate(logits, (g / n) * (sig - t))
        _accumulate(targets, (g / n) * (-x))
    return _make(np.asarray(vals.sum() / n), (logits, targets), bwd)


# -- backward pass --------------------------------------------------------------

def backward(loss: Tensor):
    """Populate grad buffers for every requires_grad tensor reachable from loss,
    then clear the recorded graph."""
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in topo:
        node._parents = ()
        node._backward = None
        if node is not loss and not node.requires_grad:
            node.grad = None


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                            step: float = 1e-5) -> float:
    """Compare tape gradients of the scalar f() against central differences.

    Returns the max elementwise relative error with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    for p in params:
        p.zero_grad()
    backward(f())
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    max_err = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * step)
            err = abs(numeric - gflat[i]) / max(abs(numeric), abs(gflat[i]), 1e-8)
            max_err = max(max_err, err)
    return max_err


# -- batch normalization ---------------------------------------------------------

def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Batch-statistics normalization with affine scale/shift.

    Returns (out, batch_mean, batch_var); the caller owns running-stat updates.
    """
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    std = np.sqrt(var + eps)
    xhat = (x.data - mu) / std

    def bwd(g):
        dxhat = g * gamma.data
        _accumulate(x, (dxhat - dxhat.mean(axis=0)
                        - xhat * (dxhat * xhat).mean(axis=0)) / std)
        _accumulate(gamma, (g * xhat).sum(axis=0))
        _accumulate(beta, g.sum(axis=0))
    out = _make(xhat * gamma.data + beta.data, (x, gamma, beta), bwd)
    return out, mu, var


def batch_norm_eval(x: Tensor, gamma: Tensor, beta: Tensor,
                    running_mean: np.ndarray, running_var: np.ndarray,
                    eps: float = 1e-5) -> Tensor:
    std = np.sqrt(running_var + eps)
    xhat = (x.data - running_mean) / std

    def bwd(g):
        _accumulate(x, g * gamma.data / std)
        _accumulate(gamma, (g * xhat).sum(axis=0))
        _accumulate(beta, g.sum(axis=0))
    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bwd)
