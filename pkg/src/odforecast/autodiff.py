"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Graphs are built dynamically: each op returns a new node holding the forward
values, its parent nodes, and a closure that routes the incoming gradient to
those parents. Acyclicity holds by construction because an op's inputs exist
before its output. Gradients accumulate additively, so repeated backward
calls add up until zero_grad() clears a leaf.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import digamma, expit
from scipy.special import gammaln as _scipy_gammaln


class Tensor:
    """One node of the computation graph; wraps a float64 array."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    # keep numpy from absorbing Tensor operands so ndarray <op> Tensor
    # falls back to the reflected methods below
    __array_ufunc__ = None

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        if arr.dtype != np.float64:
            raise TypeError(f"tensors are float64 only, got {arr.dtype}")
        self.values = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.values)

    def backward(self) -> None:
        """Reverse sweep from a scalar output; visits each node once."""
        if self.values.size != 1:
            raise ValueError("backward requires a scalar output")
        topo = []
        seen = {id(self)}
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append((p, False))
        self.grad = np.ones_like(self.values)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar; every overload routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(values)
    out.requires_grad = True
    out._parents = parents
    out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the pre-broadcast shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _unbroadcast_batch(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Like _unbroadcast but the trailing two (matmul core) axes always match."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i in range(len(shape) - 2) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    vals = a.values + b.values
    if not (a.requires_grad or b.requires_grad):
        return Tensor(vals)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(g, b.values.shape))

    return _node(vals, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    vals = a.values - b.values
    if not (a.requires_grad or b.requires_grad):
        return Tensor(vals)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(-g, b.values.shape))

    return _node(vals, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    vals = a.values * b.values
    if not (a.requires_grad or b.requires_grad):
        return Tensor(vals)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.values.shape))

    return _node(vals, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    vals = a.values / b.values
    if not (a.requires_grad or b.requires_grad):
        return Tensor(vals)

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.values, a.values.shape))
        _accumulate(b, _unbroadcast(-g * a.values / (b.values * b.values),
                                    b.values.shape))

    return _node(vals, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    vals = a.values @ b.values
    if not (a.requires_grad or b.requires_grad):
        return Tensor(vals)

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.values, -1, -2)
            _accumulate(a, _unbroadcast_batch(ga, a.values.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.values, -1, -2) @ g
            _accumulate(b, _unbroadcast_batch(gb, b.values.shape))

    return _node(vals, (a, b), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    vals = np.concatenate([t.values for t in ts], axis=axis)
    if not any(t.requires_grad for t in ts):
        return Tensor(vals)
    sizes = np.cumsum([t.values.shape[axis] for t in ts])[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, sizes, axis=axis)):
            _accumulate(t, piece)

    return _node(vals, tuple(ts), backward)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/int/tuple) indexing only; index regions must not overlap."""
    a = as_tensor(a)
    vals = a.values[idx]
    if not a.requires_grad:
        return Tensor(vals)

    def backward(g):
        full = np.zeros_like(a.values)
        full[idx] = g
        _accumulate(a, full)

    return _node(vals, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    vals = a.values.reshape(shape)
    if not a.requires_grad:
        return Tensor(vals)

    def backward(g):
        _accumulate(a, g.reshape(a.values.shape))

    return _node(vals, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    vals = np.transpose(a.values, axes)
    if not a.requires_grad:
        return Tensor(vals)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, np.transpose(g, inverse))

    return _node(vals, (a,), backward)


def swap_last(a: Tensor) -> Tensor:
    """Transpose the trailing two axes (matmul partner helper)."""
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted for stability."""
    a = as_tensor(a)
    z = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    if not a.requires_grad:
        return Tensor(s)

    def backward(g):
        _accumulate(a, (g - (g * s).sum(axis=-1, keepdims=True)) * s)

    return _node(s, (a,), backward)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    vals = np.maximum(a.values, 0.0)
    if not a.requires_grad:
        return Tensor(vals)

    def backward(g):
        _accumulate(a, g * (a.values > 0.0))

    return _node(vals, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = expit(a.values)
    if not a.requires_grad:
        return Tensor(s)

    def backward(g):
        _accumulate(a, g * s * (1.0 - s))

    return _node(s, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    a = as_tensor(a)
    vals = np.logaddexp(0.0, a.values)
    if not a.requires_grad:
        return Tensor(vals)

    def backward(g):
        _accumulate(a, g * expit(a.values))

    return _node(vals, (a,), backward)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    vals = np.exp(a.values)
    if not a.requires_grad:
        return Tensor(vals)

    def backward(g):
        _accumulate(a, g * vals)

    return _node(vals, (a,), backward)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    vals = np.log(a.values)
    if not a.requires_grad:
        return Tensor(vals)

    def backward(g):
        _accumulate(a, g / a.values)

    return _node(vals, (a,), backward)


def logaddexp(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    vals = np.logaddexp(a.values, b.values)
    if not (a.requires_grad or b.requires_grad):
        return Tensor(vals)

    def backward(g):
        _accumulate(a, _unbroadcast(g * expit(a.values - b.values), a.values.shape))
        _accumulate(b, _unbroadcast(g * expit(b.values - a.values), b.values.shape))

    return _node(vals, (a, b), backward)


def gammaln(a: Tensor) -> Tensor:
    """Log-gamma; keeps count likelihoods in log space instead of factorials."""
    a = as_tensor(a)
    vals = _scipy_gammaln(a.values)
    if not a.requires_grad:
        return Tensor(vals)

    def backward(g):
        _accumulate(a, g * digamma(a.values))

    return _node(vals, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    mu = a.values.mean(axis=-1, keepdims=True)
    centered = a.values - mu
    inv_std = 1.0 / np.sqrt(centered.var(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    if not a.requires_grad:
        return Tensor(xhat)

    def backward(g):
        gm = g - g.mean(axis=-1, keepdims=True) \
            - xhat * (g * xhat).mean(axis=-1, keepdims=True)
        _accumulate(a, gm * inv_std)

    return _node(xhat, (a,), backward)


def _expand_axes(g: np.ndarray, axis, keepdims: bool) -> np.ndarray:
    if keepdims or axis is None:
        return g
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in sorted(a % (g.ndim + len(axes)) for a in axes):
        g = np.expand_dims(g, ax)
    return g


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    vals = a.values.sum(axis=axis, keepdims=keepdims)
    if not a.requires_grad:
        return Tensor(vals)

    def backward(g):
        ge = _expand_axes(g, axis, keepdims)
        _accumulate(a, np.broadcast_to(ge, a.values.shape).copy())

    return _node(np.asarray(vals, dtype=np.float64), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.values.size if axis is None else \
        np.prod([a.values.shape[ax] for ax in
                 ((axis,) if isinstance(axis, int) else tuple(axis))])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


# ---------------------------------------------------------------------------
# Gradient verification against central finite differences.

@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    per_param: dict
    eps: float
    tol: float
    passed: bool

    def __str__(self):
        lines = [f"grad_check: max_rel_err={self.max_rel_err:.3e} "
                 f"tol={self.tol:.1e} -> {'PASS' if self.passed else 'FAIL'}"]
        for name, err in sorted(self.per_param.items()):
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def grad_check(f, point: dict, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of f against central differences.

    f maps a dict of Tensors to a scalar Tensor. Relative error uses a unit
    floor, |a - n| / max(1, |a|, |n|), so parameters whose true gradient is
    zero compare against difference noise instead of dividing by it.
    """
    leaves = {k: Tensor(np.asarray(v, dtype=np.float64).copy(), requires_grad=True)
              for k, v in point.items()}
    out = f(leaves)
    out.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.values))
                for k, t in leaves.items()}

    per_param = {}
    for name, t in leaves.items():
        base = t.values
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = float(f(leaves).values)
            flat[k] = orig - eps
            lo = float(f(leaves).values)
            flat[k] = orig
            num_flat[k] = (hi - lo) / (2.0 * eps)
        a = analytic[name]
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        per_param[name] = float((np.abs(a - numeric) / denom).max())
    max_err = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_err, per_param, eps, tol, max_err < tol)


# ---------------------------------------------------------------------------
# Flat named-tensor serialization (JSON). repr-based float encoding makes the
# round trip exact and byte-stable, which keeps checkpoints reproducible.

def save_named_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    payload = {
        "meta": meta or {},
        "tensors": {
            name: {"shape": list(np.asarray(v).shape),
                   "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for name, v in tensors.items()
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def load_named_tensors(path) -> tuple[dict, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    tensors = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["tensors"].items()
    }
    return tensors, payload.get("meta", {})
