"""Dense float64 tensors with reverse-mode automatic differentiation.

Every array is float64. Ops record their parents and a vector-Jacobian
closure; ``Tensor.backward`` walks the recorded graph once in reverse
topological order and accumulates into the ``grad`` of leaf tensors.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, NumericError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "frozen", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, frozen: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.frozen = frozen
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = ""

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.frozen = False
        out.name = None
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        out._op = op
        return out

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.frozen:
            flags.append("frozen")
        return f"Tensor(shape={self.shape}{', ' if flags else ''}{', '.join(flags)})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis: int = -1, keepdims: bool = False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absolute(self)

    # -- autodiff ----------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every leaf reachable from this scalar.

        Gradients accumulate: calling twice without clearing doubles them.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, *, frozen: bool = False, name: str | None = None) -> Tensor:
    """Leaf tensor registered for training (or frozen backbone weight)."""
    return Tensor(data, requires_grad=not frozen, frozen=frozen, name=name)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return Tensor._result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return Tensor._result(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor._result(a.data / b.data, (a, b), back, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    def back(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._result(a.data**exponent, (a,), back, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(a: Tensor) -> Tensor:
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data > floor
    out = np.where(mask, a.data, floor)
    return Tensor._result(out, (a,), lambda g: (g * mask,), "clamp_min")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation; smooth everywhere, so finite differences stay clean
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._result(out, (a,), back, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------
def _expand_to(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, tuple(sorted(axes)))
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        return (np.array(_expand_to(g, a.shape, axis, keepdims)),)

    return Tensor._result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def back(g):
        return (np.array(_expand_to(g, a.shape, axis, keepdims)) / count,)

    return Tensor._result(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), back, "mean")


def tmax(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def back(g):
        ga = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(ga, idx, gk, axis=axis)
        return (ga,)

    return Tensor._result(out if keepdims else np.squeeze(out, axis), (a,), back, "max")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return Tensor._result(
        np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes"
    )


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    return Tensor._result(
        np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast"
    )


def getitem(a: Tensor, index) -> Tensor:
    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return Tensor._result(np.array(a.data[index]), (a,), back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    out, start = [], 0
    for n in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + n)
        out.append(getitem(a, tuple(index)))
        start += n
    if start != a.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover extent {a.shape[axis]}")
    return out


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(np.matmul(a.data, b.data), (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input width {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    if x.ndim == 1:
        y = reshape(matmul(reshape(x, (1, -1)), w), (w.shape[1],))
    else:
        y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    m = x.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    out = x.data - lse
    prob = np.exp(out)

    def back(g):
        return (g - prob * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), back, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs width {n}")
    if eps < 0:
        raise ConfigurationError("layer_norm eps must be nonnegative")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if not gamma.requires_grad:
            return dx, None, None
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return Tensor._result(out, (x, gamma, beta), back, "layer_norm")


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------
def _walk(value, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name)
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{name}/{key}")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}/{i}")


class Module:
    """Attribute-walking parameter registry; underscore attributes are skipped."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}/{key}" if prefix else key)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if not t.frozen]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, *,
                 frozen: bool = False, bias: bool = True):
        self.w = parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)), frozen=frozen)
        self.b = parameter(np.zeros(fan_out), frozen=frozen) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


class Block(Module):
    """Parameters of one pre-norm transformer block (MHSA + GELU FFN)."""

    def __init__(self, width: int, heads: int, mlp_ratio: int, rng: np.random.Generator, *,
                 frozen: bool, zero_output: bool = False, ln_eps: float = 1e-5):
        if heads <= 0 or width % heads:
            raise ConfigurationError(f"width {width} is not divisible by {heads} heads")
        self._heads = heads
        self._eps = ln_eps
        hidden = mlp_ratio * width

        def w(fan_in, fan_out, zero=False):
            if zero:
                return parameter(np.zeros((fan_in, fan_out)), frozen=frozen)
            return parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)), frozen=frozen)

        def vec(n, value=0.0):
            return parameter(np.full(n, value), frozen=frozen)

        self.ln1_g, self.ln1_b = vec(width, 1.0), vec(width)
        self.wq, self.bq = w(width, width), vec(width)
        self.wk, self.bk = w(width, width), vec(width)
        self.wv, self.bv = w(width, width), vec(width)
        self.wo, self.bo = w(width, width, zero_output), vec(width)
        self.ln2_g, self.ln2_b = vec(width, 1.0), vec(width)
        self.w1, self.b1 = w(width, hidden), vec(hidden)
        self.w2, self.b2 = w(hidden, width, zero_output), vec(width)

    @property
    def heads(self) -> int:
        return self._heads

    @property
    def eps(self) -> float:
        return self._eps

    @staticmethod
    def count(width: int, mlp_ratio: int) -> int:
        hidden = mlp_ratio * width
        return 4 * width + 4 * (width * width + width) + (width * hidden + hidden) + (hidden * width + width)


def attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    return matmul(softmax(matmul(q, k.T) * scale, axis=-1), v)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    return swapaxes(reshape(x, (*lead, t, heads, d // heads)), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    return reshape(swapaxes(x, -3, -2), (*lead, t, h * dh))


def mhsa_block(x: Tensor, p: Block) -> Tensor:
    """Pre-norm block: x + MHSA(LN(x)), then + FFN(LN(.)); full unmasked attention."""
    width = x.shape[-1]
    if width % p.heads:
        raise ConfigurationError(f"width {width} is not divisible by {p.heads} heads")
    h = layer_norm(x, p.ln1_g, p.ln1_b, p.eps)
    q = _split_heads(linear(h, p.wq, p.bq), p.heads)
    k = _split_heads(linear(h, p.wk, p.bk), p.heads)
    v = _split_heads(linear(h, p.wv, p.bv), p.heads)
    o = _merge_heads(attention(q, k, v, 1.0 / math.sqrt(width // p.heads)))
    x = x + linear(o, p.wo, p.bo)
    h = gelu(linear(layer_norm(x, p.ln2_g, p.ln2_b, p.eps), p.w1, p.b1))
    return x + linear(h, p.w2, p.b2)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------
@dataclass
class GradCheckReport:
    max_error: float
    worst: tuple[str, tuple] | None
    checked: int
    excluded: list[str] = field(default_factory=list)
    max_abs_grad: float = 0.0


def grad_check(f: Callable[[], Tensor], params: Iterable, step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``params`` holds tensors or ``(name, tensor)`` pairs; frozen tensors are
    skipped and listed in ``excluded``. The error per coordinate is
    ``|analytic - fd| / max(1, |fd|)``.
    """
    if step <= 0:
        raise ConfigurationError("grad_check step must be positive")
    named = [(p if isinstance(p, tuple) else (p.name or f"param{i}", p)) for i, p in enumerate(params)]
    checked = [(n, t) for n, t in named if not t.frozen]
    excluded = [n for n, t in named if t.frozen]
    for _, t in checked:
        t.grad = None
    loss = f()
    if loss.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss at the unperturbed point")
    loss.backward()

    worst, max_err, count, max_abs = None, 0.0, 0, 0.0
    for name, t in checked:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        max_abs = max(max_abs, float(np.abs(analytic).max(initial=0.0)))
        for idx in np.ndindex(t.shape):
            orig = t.data[idx]
            t.data[idx] = orig + step
            with no_grad():
                fp = f().item()
            t.data[idx] = orig - step
            with no_grad():
                fm = f().item()
            t.data[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite loss when perturbing {name}{list(idx)}")
            fd = (fp - fm) / (2.0 * step)
            err = abs(analytic[idx] - fd) / max(1.0, abs(fd))
            count += 1
            if err > max_err or worst is None:
                max_err, worst = max(err, max_err), (name, idx)
    return GradCheckReport(max_err, worst, count, excluded, max_abs)
