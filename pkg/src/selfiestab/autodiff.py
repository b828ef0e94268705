"""A small reverse-mode differentiation core.

Only the primitives the stabilizer needs are provided: 1-D convolution and
its transpose, concatenation, scaling by a constant, addition, slicing,
reshaping, transposition, the rigid MLS warp, per-row Euclidean norms and
summation. Each primitive records its inputs and a closure that maps the output gradient to
input gradients. Leaves that do not require gradients never receive one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return take(self, key)

    def backward(self):
        if self.value.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {self.shape}")
        order = _topological(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(value, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, needs, _parents=tuple(parents) if needs else (),
                  _backward=backward if needs else None)


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"add: shapes {x.shape} and {y.shape} differ")
    return _make(x.value + y.value, (x, y), lambda g: (g, g))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(c * x.value, (x,), lambda g: (c * g,))


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    try:
        value = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(value, xs, backward)


def take(x, key) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[key] = g
        return (out,)

    return _make(x.value[key], (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.value.T, (x,), lambda g: (g.T,))


def total(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _make(np.asarray(x.value.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def row_norms(x) -> Tensor:
    """Euclidean norm of every row of a 2-D tensor. The subgradient at a zero
    row is taken as zero."""
    x = as_tensor(x)
    norms = np.sqrt((x.value ** 2).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)

    def backward(g):
        return ((g / safe)[:, None] * x.value * (norms > 0)[:, None],)

    return _make(norms, (x,), backward)


def mls_warp(targets, op) -> Tensor:
    """Warp ``op``'s fixed query points with node targets ``targets``.

    ``op`` is an :class:`~selfiestab.mls.MlsOperator`; its backward pass is
    the closed-form vector-Jacobian product.
    """
    targets = as_tensor(targets)
    out, cache = op.apply(targets.value)
    return _make(out, (targets,), lambda g: (op.vjp(g, cache),))


# ---------------------------------------------------------------------------
# Convolutions (single sample, channels-first, cross-correlation)
# ---------------------------------------------------------------------------


def conv_out_length(length: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (length + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def convt_out_length(length: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (length - 1) * stride - 2 * padding + dilation * (k - 1) + 1


def _im2col(x, k, stride, dilation, padding, l_out):
    c, _ = x.shape
    xp = np.pad(x, ((0, 0), (padding, padding)))
    cols = np.empty((c, k, l_out))
    span = stride * (l_out - 1) + 1
    for j in range(k):
        start = j * dilation
        cols[:, j, :] = xp[:, start:start + span:stride]
    return cols.reshape(c * k, l_out)


def _col2im(cols, c, length, k, stride, dilation, padding, l_out):
    cols = cols.reshape(c, k, l_out)
    xp = np.zeros((c, length + 2 * padding))
    span = stride * (l_out - 1) + 1
    for j in range(k):
        start = j * dilation
        xp[:, start:start + span:stride] += cols[:, j, :]
    return xp[:, padding:padding + length]


def _conv1d_values(x, w, stride, dilation, padding, name):
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"{name}: expected (C, L) input and (C_out, C_in, k) kernels")
    c_out, c_in, k = w.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"{name}: input has {x.shape[0]} channels, kernels expect {c_in}")
    l_out = conv_out_length(x.shape[1], k, stride, dilation, padding)
    if l_out < 1:
        raise ShapeError(f"{name}: output length {l_out} < 1")
    cols = _im2col(x, k, stride, dilation, padding, l_out)
    return w.reshape(c_out, c_in * k) @ cols, cols


def _convt_values(y, w, stride, dilation, padding, name):
    if y.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"{name}: expected (C, L) input and (C_in, C_out, k) kernels")
    c_y, c_out, k = w.shape
    if y.shape[0] != c_y:
        raise ShapeError(f"{name}: input has {y.shape[0]} channels, kernels expect {c_y}")
    l_out = convt_out_length(y.shape[1], k, stride, dilation, padding)
    if l_out < 1:
        raise ShapeError(f"{name}: output length {l_out} < 1")
    cols = w.reshape(c_y, c_out * k).T @ y
    return _col2im(cols, c_out, l_out, k, stride, dilation, padding, y.shape[1])


def conv1d(x, w, stride: int = 1, dilation: int = 1, padding: int = 0,
           name: str = "conv1d") -> Tensor:
    """Cross-correlation of a ``(C_in, L)`` signal with ``(C_out, C_in, k)``
    kernels, zero padding, no bias."""
    x, w = as_tensor(x), as_tensor(w)
    out, cols = _conv1d_values(x.value, w.value, stride, dilation, padding, name)
    c_out, c_in, k = w.shape
    length = x.shape[1]
    l_out = out.shape[1]

    def backward(g):
        gw = (g @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = w.value.reshape(c_out, c_in * k).T @ g
            gx = _col2im(gcols, c_in, length, k, stride, dilation, padding, l_out)
        return gx, gw

    return _make(out, (x, w), backward)


def conv1d_transposed(y, w, stride: int = 1, dilation: int = 1, padding: int = 0,
                      name: str = "conv1d_transposed") -> Tensor:
    """Adjoint of :func:`conv1d` with kernels ``w`` of shape
    ``(C_in, C_out, k)`` (the conv1d kernel that maps C_out to C_in)."""
    y, w = as_tensor(y), as_tensor(w)
    out = _convt_values(y.value, w.value, stride, dilation, padding, name)
    c_y, c_out, k = w.shape

    def backward(g):
        gy = gw = None
        if y.requires_grad:
            gy, _ = _conv1d_values(g, w.value, stride, dilation, padding, name)
        if w.requires_grad:
            cols = _im2col(g, k, stride, dilation, padding, y.shape[1])
            gw = (y.value @ cols.T).reshape(w.shape)
        return gy, gw

    return _make(out, (y, w), backward)


# ---------------------------------------------------------------------------
# Driver and optimizer
# ---------------------------------------------------------------------------


def value_and_grad(f: Callable[[dict[str, Tensor]], Tensor],
                   params: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``f`` on tensors wrapping ``params`` and return the scalar
    value and the gradient for every parameter."""
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    out = f(leaves)
    if not isinstance(out, Tensor) or out.value.size != 1:
        raise ContractError("value_and_grad: f must return a scalar Tensor")
    out.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value))
             for k, t in leaves.items()}
    return float(out.value), grads


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new parameter arrays; the
    state's moments are advanced in place."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    new = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient for {k!r} has shape {g.shape}, parameter {p.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p, dtype=np.float64)
            state.v[k] = np.zeros_like(p, dtype=np.float64)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        new[k] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return new, state
