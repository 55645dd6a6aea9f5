"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
at least one input requires a gradient.  Outside a tape nothing is recorded,
which doubles as the inference mode::

    with Tape() as tape:
        loss = (x * x).sum() * 0.5
    tape.backward(loss)          # x.grad == x.data

Tapes are thread-local; a graph must not be shared across threads while
it is being recorded.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    # -- basic accessors ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        return self.data

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ----------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already a
    topological order of the graph.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted: tapes must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result and record it when a gradient is needed."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(_Node(out, tuple(parents), backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every leaf tensor with ``requires_grad`` that the
    loss depends on.  Gradients accumulate into existing ``.grad`` arrays."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.out) for node in tape.nodes}
    if loss.requires_grad and id(loss) not in produced:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if key not in produced:
                leaves[key] = parent
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * d_inner),)

    return _make(out, (a,), bw)


# -- reductions & shape ---------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


# -- linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading axes with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


# -- normalisations ---------------------------------------------------------------


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")


def softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    _check_temperature(temperature)
    x = as_tensor(x)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _make(out, (x,), bw)


def log_softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    _check_temperature(temperature)
    x = as_tensor(x)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return ((g - p * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _make(out, (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if not eps > 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"layer_norm needs non-empty rows, got shape {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return (gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape))

    return _make(out, (x, gain, bias), bw)


def l2_normalize(x, axis: int = -1) -> Tensor:
    """x / ||x|| along ``axis``; callers reject zero-norm inputs beforehand."""
    x = as_tensor(x)
    return div(x, sqrt(tsum(mul(x, x), axis=axis, keepdims=True)))


def max_reduce(x, axis: int | None = None):
    """Maximum and its first-occurrence index.

    For a 1-D input (``axis=None``) returns ``(scalar Tensor, int)``; with an
    axis returns ``(Tensor, index array)``.  The gradient goes to the argmax
    position only.
    """
    x = as_tensor(x)
    if x.data.size == 0 or (axis is not None and x.shape[axis] == 0):
        raise DimensionError("max_reduce of an empty tensor")
    if axis is None:
        if x.ndim != 1:
            raise DimensionError(f"max_reduce without axis expects a vector, got {x.shape}")
        idx = int(np.argmax(x.data))

        def bw1(g):
            full = np.zeros_like(x.data)
            full[idx] = g
            return (full,)

        return _make(x.data[idx], (x,), bw1), idx
    idx = np.argmax(x.data, axis=axis)
    expanded = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, expanded, axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, expanded, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (x,), bw), idx


# -- gradient checking ----------------------------------------------------------


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray,
                    eps: float = 1e-6) -> float:
    """Worst relative error between the tape gradient of ``f`` at ``x`` and
    central differences, using max(|analytic|, |numeric|, 1e-8) as denominator."""
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    if out.data.size != 1:
        raise ContractError(f"check_gradients needs a scalar function, got shape {out.shape}")
    tape.backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(base)).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(base)).data)
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
