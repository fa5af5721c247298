"""Minimal reverse-mode autodiff over float64 numpy arrays.

Covers exactly the operation set the training losses need; it is not a
general-purpose autodiff system. All math runs in 64-bit floats and all
reductions use a fixed order, so repeated runs with one seed are
bit-identical. Gradient correctness is enforced by ``grad_check`` (central
differences) rather than trusted derivations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special as _special

Array = np.ndarray

SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array with a gradient slot and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    # -- bookkeeping ------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: Array) -> None:
        # never mutate in place: gradients may be shared between consumers
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad: Array | None = None) -> None:
        """Reverse-mode accumulation from this tensor (default seed: ones)."""
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        seed = np.ones_like(self.data) if grad is None else _as_array(grad)
        self._accumulate(seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def permute(self, *axes):
        return permute(self, axes if len(axes) > 1 else axes[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _node(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


# -- arithmetic -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    data = a.data ** e

    def backward(g: Array) -> None:
        a._accumulate(g * e * a.data ** (e - 1.0))

    return _node(data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g: Array) -> None:
        a._accumulate(g * data)

    return _node(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g: Array) -> None:
        a._accumulate(g / a.data)

    return _node(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g: Array) -> None:
        a._accumulate(g * 0.5 / data)

    return _node(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g: Array) -> None:
        a._accumulate(g * data * (1.0 - data))

    return _node(data, (a,), backward)


def gammaln(a) -> Tensor:
    a = as_tensor(a)
    data = _special.gammaln(a.data)

    def backward(g: Array) -> None:
        a._accumulate(g * _special.digamma(a.data))

    return _node(data, (a,), backward)


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, floor)

    def backward(g: Array) -> None:
        a._accumulate(g * (a.data > floor))

    return _node(data, (a,), backward)


# -- activations -------------------------------------------------------------

def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    data = np.where(pos, a.data, slope * a.data)

    def backward(g: Array) -> None:
        a._accumulate(g * np.where(pos, 1.0, slope))

    return _node(data, (a,), backward)


def selu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    ex = np.exp(np.minimum(a.data, 0.0))
    data = np.where(pos, SELU_LAMBDA * a.data, SELU_LAMBDA * SELU_ALPHA * (ex - 1.0))

    def backward(g: Array) -> None:
        a._accumulate(g * np.where(pos, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * ex))

    return _node(data, (a,), backward)


def gelu(a) -> Tensor:
    """Exact erf-based GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _special.erf(x / np.sqrt(2.0)))
    data = x * cdf

    def backward(g: Array) -> None:
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        a._accumulate(g * (cdf + x * pdf))

    return _node(data, (a,), backward)


# -- shape & indexing ---------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old_shape = a.shape
    data = a.data.reshape(shape)

    def backward(g: Array) -> None:
        a._accumulate(g.reshape(old_shape))

    return _node(data, (a,), backward)


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def backward(g: Array) -> None:
        a._accumulate(g.transpose(inv))

    return _node(data, (a,), backward)


def swap_last(a) -> Tensor:
    """Transpose the trailing two axes."""
    a = as_tensor(a)
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return permute(a, axes)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along one axis; backward scatter-adds (deterministic)."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    data = np.take(a.data, idx, axis=axis)

    def backward(g: Array) -> None:
        full = np.zeros_like(a.data)
        view = np.moveaxis(full, axis, 0)
        np.add.at(view, idx, np.moveaxis(g, axis, 0))
        a._accumulate(full)

    return _node(data, (a,), backward)


def segment_sum(a, starts: Array, axis: int = 0) -> Tensor:
    """Sum contiguous segments given their start offsets along ``axis``."""
    a = as_tensor(a)
    starts = np.asarray(starts, dtype=np.intp)
    n = a.shape[axis]
    sizes = np.diff(np.append(starts, n))
    data = np.add.reduceat(a.data, starts, axis=axis)

    def backward(g: Array) -> None:
        a._accumulate(np.repeat(g, sizes, axis=axis))

    return _node(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]

    def backward(g: Array) -> None:
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _node(data, tuple(tensors), backward)


# -- reductions & linear algebra ----------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> None:
        gg = g if (axis is None or keepdims) else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, a.shape))

    return _node(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")
    data = np.matmul(a.data, b.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _node(data, (a, b), backward)


def l2norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along one axis; subgradient 0 at the origin."""
    a = as_tensor(a)
    norms = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def backward(g: Array) -> None:
        gg = g if keepdims else np.expand_dims(g, axis)
        a._accumulate(gg * a.data / np.maximum(norms, 1e-300))

    data = norms if keepdims else np.squeeze(norms, axis=axis)
    return _node(data, (a,), backward)


# -- stable compositions -------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    """Softmax with the usual detached max-shift for stability."""
    a = as_tensor(a)
    shift = np.max(a.data, axis=axis, keepdims=True)
    e = exp(add(a, Tensor(-shift)))
    return mul(e, power(tsum(e, axis=axis, keepdims=True), -1.0))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shift = np.max(a.data, axis=axis, keepdims=True)
    s = log(tsum(exp(add(a, Tensor(-shift))), axis=axis, keepdims=True))
    out = add(s, Tensor(shift))
    if keepdims:
        return out
    return reshape(out, np.squeeze(out.data, axis=axis).shape)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = tmean(x, axis=-1, keepdims=True)
    centered = add(x, mul(mu, -1.0))
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


# -- parameters ----------------------------------------------------------------

class ParamSet:
    """Ordered, named collection of trainable tensors.

    Every parameter is float64 and owns a gradient slot of identical shape
    (``grad`` is None until backward touches it).
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=requires_grad)
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"parameter {name!r} has non-finite values")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy(self, requires_grad: bool | None = None) -> "ParamSet":
        out = ParamSet()
        for name, t in self._params.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out.add(name, t.data.copy(), requires_grad=rg)
        return out

    def assert_finite(self) -> None:
        for name, t in self._params.items():
            if not np.all(np.isfinite(t.data)):
                raise FloatingPointError(f"parameter {name!r} became non-finite")


def ema_update(online: ParamSet, target: ParamSet, momentum: float) -> None:
    """target <- m*target + (1-m)*online, elementwise, for shared names."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    for name in target.names():
        src = online[name]
        dst = target[name]
        dst.data = momentum * dst.data + (1.0 - momentum) * src.data


class Adam:
    """Adam with bias correction; state keyed by parameter identity."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params.tensors() if isinstance(params, ParamSet) else list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * p.grad
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * p.grad * p.grad
            m_hat = self._m[i] / b1t
            v_hat = self._v[i] / b2t
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class GradientDescent:
    """Plain fixed-step gradient descent."""

    def __init__(self, params, lr: float):
        self.params = params.tensors() if isinstance(params, ParamSet) else list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


# -- gradient verification -------------------------------------------------------

@dataclass
class GradReport:
    """Max relative analytic-vs-central-difference error per parameter."""

    eps: float
    per_param: dict[str, float] = field(default_factory=dict)
    valid: bool = True

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0


def grad_check(loss_fn, params: ParamSet, eps: float = 1e-5) -> GradReport:
    """Compare analytic gradients of a scalar loss against central differences.

    ``loss_fn`` must be a deterministic scalar function of ``params`` (any
    randomness fixed in the closure), twice evaluable at +/- eps perturbations.
    Relative error uses |g_a - g_n| / max(1, |g_n|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    report = GradReport(eps=eps)

    params.zero_grad()
    loss = loss_fn(params)
    if loss.data.size != 1:
        raise ValueError("loss_fn must return a scalar")
    if not np.isfinite(loss.data):
        report.valid = False
        return report
    loss.backward()
    analytic = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in params.items()
    }

    for name, t in params.items():
        errs = 0.0
        flat = t.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lo_hi = float(loss_fn(params).data)
            flat[i] = orig - eps
            lo_lo = float(loss_fn(params).data)
            flat[i] = orig
            if not (np.isfinite(lo_hi) and np.isfinite(lo_lo)):
                report.valid = False
                return report
            gn = (lo_hi - lo_lo) / (2.0 * eps)
            errs = max(errs, abs(ga[i] - gn) / max(1.0, abs(gn)))
        report.per_param[name] = errs
    return report
