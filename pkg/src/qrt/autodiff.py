"""Small reverse-mode automatic differentiation engine over numpy arrays.

Graphs are built eagerly: every operation returns a new :class:`Tensor` that
remembers its parents together with a closure mapping the upstream gradient
to the gradient of each parent.  ``Tensor.backward`` walks the graph once in
reverse topological order.

Calling ``backward`` twice on the same graph is idempotent: gradients are
recomputed from scratch (never accumulated across calls).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ParamStore",
    "FiniteDiffResult",
    "as_tensor",
    "constant",
    "finite_diff_check",
    "eval_and_grad",
    "OPS",
]

# Every op-tag the engine can emit.  Custom ops registered from other modules
# (e.g. the fused reflected-kernel term) use their own tag.
OPS = (
    "leaf", "add", "sub", "mul", "div", "neg", "exp", "log", "tanh", "relu",
    "sigmoid", "softplus", "logsumexp", "sum", "matmul", "affine",
    "logistic_cdf", "logistic_logpdf", "gaussian_cdf", "gaussian_logpdf",
    "sort", "reshape", "getitem", "concat", "clamp_min", "detach",
)

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinity."""

    def __init__(self, op: str, message: str | None = None):
        self.op = op
        super().__init__(message or f"non-finite value produced by op {op!r}")


class Tensor:
    __slots__ = ("value", "grad", "parents", "op", "requires_grad")

    # Make numpy defer to our reflected operators (ndarray + Tensor).
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), op="leaf", requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in self.parents)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value, op="detach")

    def backward(self, grad=None):
        """Propagate gradients from this node to every node in its graph."""
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.value)
        order = _topological_order(self)
        for node in order:
            node.grad = None
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.shape).copy()
        for node in reversed(order):
            if node.grad is None or not node.parents:
                continue
            for parent, vjp in node.parents:
                if not parent.requires_grad:
                    continue
                g = vjp(node.grad)
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True).reshape(parent.shape)
                else:
                    parent.grad = parent.grad + g
        for node in order:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.value)

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, op="leaf")


def _make(value, parents, op) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    return Tensor(value, parents=parents, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ], "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ], "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value * b.value, [
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    ], "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.value / b.value
    return _make(out, [
        (a, lambda g: _unbroadcast(g / b.value, a.shape)),
        (b, lambda g: _unbroadcast(-g * out / b.value, b.shape)),
    ], "div")


# -- elementwise unary -------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, [(a, lambda g: -g)], "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make(out, [(a, lambda g: g * out)], "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    return _make(out, [(a, lambda g: g / a.value)], "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, [(a, lambda g: g * (1.0 - out * out))], "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), [(a, lambda g: g * mask)], "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.value)
    return _make(out, [(a, lambda g: g * out * (1.0 - out))], "sigmoid")


def softplus(a, threshold: float = 30.0) -> Tensor:
    """log(1 + e^x), linear above ``threshold`` to avoid overflow."""
    a = as_tensor(a)
    x = a.value
    out = np.where(x > threshold, x, np.log1p(np.exp(np.minimum(x, threshold))))
    return _make(out, [(a, lambda g: g * special.expit(x))], "softplus")


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    mask = a.value > floor
    return _make(np.where(mask, a.value, floor), [(a, lambda g: g * mask)], "clamp_min")


def logistic_cdf(a) -> Tensor:
    """Standard logistic CDF (location 0, scale 1)."""
    a = as_tensor(a)
    out = special.expit(a.value)
    return _make(out, [(a, lambda g: g * out * (1.0 - out))], "logistic_cdf")


def logistic_logpdf(a) -> Tensor:
    """Standard logistic log-density, ``-|x| - 2 log(1 + e^{-|x|})``."""
    a = as_tensor(a)
    x = a.value
    ax = np.abs(x)
    out = -ax - 2.0 * np.log1p(np.exp(-ax))
    # d/dx log f = -tanh(x / 2)
    return _make(out, [(a, lambda g: -g * np.tanh(0.5 * x))], "logistic_logpdf")


def gaussian_cdf(a) -> Tensor:
    """Standard normal CDF."""
    a = as_tensor(a)
    x = a.value
    out = special.ndtr(x)
    return _make(out, [(a, lambda g: g * np.exp(-0.5 * x * x) * _INV_SQRT_2PI)], "gaussian_cdf")


def gaussian_logpdf(a) -> Tensor:
    """Standard normal log-density."""
    a = as_tensor(a)
    x = a.value
    return _make(-0.5 * x * x - _LOG_SQRT_2PI, [(a, lambda g: -g * x)], "gaussian_logpdf")


# -- reductions and linear algebra -------------------------------------------

def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape)
        return np.broadcast_to(np.expand_dims(g, axis), a.shape)

    return _make(out, [(a, vjp)], "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return sum_(a, axis) * (1.0 / n)


def logsumexp(a, axis=None) -> Tensor:
    """Max-shifted log-sum-exp reduction."""
    a = as_tensor(a)
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = np.exp(x - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out_keep = m + np.log(s)
    out = out_keep if axis is None else np.squeeze(out_keep, axis=axis)
    if axis is None:
        out = out.reshape(())
    soft = shifted / s

    def vjp(g):
        g = g if axis is None else np.expand_dims(g, axis)
        return g * soft

    return _make(out, [(a, vjp)], "logsumexp")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    return _make(a.value @ b.value, [
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    ], "matmul")


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` as a single node."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    out = x.value @ weight.value + bias.value
    return _make(out, [
        (x, lambda g: g @ weight.value.T),
        (weight, lambda g: x.value.T @ g),
        (bias, lambda g: _unbroadcast(g, bias.shape)),
    ], "affine")


def sort(a) -> tuple[Tensor, np.ndarray]:
    """Sort a 1-D tensor; returns the sorted tensor and the permutation.

    Gradients flow through the hard permutation (exact wherever the input has
    no ties).  Ties are broken by original index (stable sort).
    """
    a = as_tensor(a)
    if a.ndim != 1:
        raise ValueError("sort expects a 1-D tensor")
    perm = np.argsort(a.value, kind="stable")

    def vjp(g):
        out = np.empty_like(g)
        out[perm] = g
        return out

    return _make(a.value[perm], [(a, vjp)], "sort"), perm


# -- shape plumbing ------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.reshape(shape), [(a, lambda g: g.reshape(a.shape))], "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.T, [(a, lambda g: g.T)], "reshape")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return out

    return _make(a.value[index], [(a, vjp)], "getitem")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    parents = []
    for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
        sl = [slice(None)] * t.ndim
        sl[axis] = slice(lo, hi)
        sl = tuple(sl)
        parents.append((t, lambda g, sl=sl: g[sl]))
    return _make(np.concatenate([t.value for t in tensors], axis=axis), parents, "concat")


def custom(value, parents, op) -> Tensor:
    """Build a node for an op implemented outside this module.

    ``parents`` is a sequence of ``(tensor, vjp)`` pairs.
    """
    return _make(value, [(as_tensor(p), f) for p, f in parents], op)


# -- parameters and optimisation ---------------------------------------------

@dataclass
class ParamStore:
    """Named trainable arrays with Adam moment accumulators."""

    params: dict[str, Tensor] = field(default_factory=dict)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    _m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self._m[name] = np.zeros_like(t.value)
        self._v[name] = np.zeros_like(t.value)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def step(self) -> None:
        """One Adam update using the gradients currently stored on each leaf."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError("parameter names do not match")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k!r}")
            self.params[k].value = np.array(v, dtype=np.float64, copy=True)


# -- checking ------------------------------------------------------------------

def eval_and_grad(fn, inputs: dict[str, np.ndarray]):
    """Evaluate ``fn(**leaves)`` and return ``(value, {name: gradient})``."""
    leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in inputs.items()}
    out = fn(**leaves)
    out.backward()
    return out.item(), {k: t.grad for k, t in leaves.items()}


@dataclass
class FiniteDiffResult:
    error: float
    name: str | None
    index: tuple | None

    def __float__(self):
        return self.error


def finite_diff_check(fn, point, h: float = 1e-4, numeric_fn=None) -> FiniteDiffResult:
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``point`` is either an array or a dict of named arrays; ``fn`` receives
    tensors with the same structure and returns a scalar tensor.  The error is
    ``max |analytic - central| / max(1, |central|)``; the worst coordinate is
    reported alongside it.  Non-finite differences count as infinite error.

    ``numeric_fn`` (default ``fn``) is the function differenced numerically;
    pass a surrogate when ``fn`` deliberately blocks some gradient paths.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    single = not isinstance(point, dict)
    arrays = {"x": np.asarray(point, dtype=np.float64)} if single else {
        k: np.asarray(v, dtype=np.float64) for k, v in point.items()
    }

    numeric_fn = fn if numeric_fn is None else numeric_fn

    def call(values, grad, f=numeric_fn):
        leaves = {k: Tensor(v.copy(), requires_grad=grad) for k, v in values.items()}
        out = f(leaves["x"]) if single else f(leaves)
        return out, leaves

    out, leaves = call(arrays, True, fn)
    out.backward()
    analytic = {k: t.grad for k, t in leaves.items()}

    worst = FiniteDiffResult(0.0, None, None)
    for name, base in arrays.items():
        for idx in np.ndindex(base.shape):
            vals = {k: v.copy() for k, v in arrays.items()}
            try:
                vals[name][idx] = base[idx] + h
                up = call(vals, False)[0].item()
                vals[name][idx] = base[idx] - h
                down = call(vals, False)[0].item()
                central = (up - down) / (2.0 * h)
            except NonFiniteError:
                central = math.nan
            a = float(analytic[name][idx])
            if math.isfinite(central):
                err = abs(a - central) / max(1.0, abs(central))
            else:
                err = math.inf
            if err > worst.error or worst.name is None:
                worst = FiniteDiffResult(err, name, idx)
    return worst
