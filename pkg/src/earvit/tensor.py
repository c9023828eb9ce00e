"""Dense float64 tensors with reverse-mode automatic differentiation.

Every numeric operation in the encoder, the loss, and the optimizer runs on
the `Tensor` class below. Forward values are plain numpy arrays; when any
input of an operation has ``requires_grad`` set (and gradients are globally
enabled), the output remembers its parents and a closure that maps the output
adjoint to parent adjoints. ``backward()`` replays those closures once each,
in reverse topological order.

Design notes:
  * float64 only -- gradient checks need the precision headroom.
  * storage is row-major and owning; ``reshape`` copies rather than aliasing.
  * gradients accumulate with ``+=`` so shared parameters (positional table,
    class token) collect contributions from every use site.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeError, ConfigError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / data prep)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional float64 array with optional gradient tracking.

    ``grad`` is populated (same shape as ``data``) after a ``backward()``
    pass reaches this tensor; it stays ``None`` until then.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_op", "_grad_borrowed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._op = ""
        self._grad_borrowed = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}, op={self._op or 'leaf'})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph plumbing --------------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"],
                backward_fn: Callable[[np.ndarray], None], op: str) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
            out._op = op
        return out

    def _accumulate(self, adjoint: np.ndarray) -> None:
        # Contributions to a node all land before its own backward runs, so
        # the first adjoint can be borrowed as-is; a second contribution
        # forces an owning copy (the borrowed array may be shared/readonly).
        if self.grad is None:
            self.grad = adjoint
            self._grad_borrowed = True
        else:
            if self._grad_borrowed:
                self.grad = np.array(self.grad)
                self._grad_borrowed = False
            self.grad += adjoint

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from here.

        Only valid on scalar tensors. The recorded graph is consumed: a
        second backward over the same nodes finds no parents to visit.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
                # consume the record; keeps a stray second backward() inert
                node._backward_fn = None
                node._parents = ()

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        data = self.data + other.data

        def bwd(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._result(data, (self, other), bwd, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def bwd(g: np.ndarray) -> None:
            self._accumulate(-g)

        return Tensor._result(-self.data, (self,), bwd, "neg")

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        data = self.data * other.data

        def bwd(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._result(data, (self, other), bwd, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other)
        data = self.data / other.data

        def bwd(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * self.data / (other.data ** 2), other.shape))

        return Tensor._result(data, (self, other), bwd, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return _as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise ShapeError("only scalar exponents are supported")
        data = self.data ** exponent

        def bwd(g: np.ndarray) -> None:
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor._result(data, (self,), bwd, "pow")

    def __matmul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
        data = a @ b

        if a.ndim > 2 and b.ndim == 2:
            # stacked @ weight: fold the stack into one GEMM per direction
            k, n = b.shape

            def bwd(g: np.ndarray) -> None:
                g2 = g.reshape(-1, n)
                if self.requires_grad:
                    self._accumulate((g2 @ b.T).reshape(a.shape))
                if other.requires_grad:
                    other._accumulate(a.reshape(-1, k).T @ g2)
        else:
            def bwd(g: np.ndarray) -> None:
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g @ _swap_last(b), a.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(_swap_last(a) @ g, b.shape))

        return Tensor._result(data, (self, other), bwd, "matmul")

    # -- shape manipulation -----------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.shape
        data = self.data.reshape(shape).copy()

        def bwd(g: np.ndarray) -> None:
            self._accumulate(g.reshape(src_shape))

        return Tensor._result(data, (self,), bwd, "reshape")

    def swapaxes(self, a: int, b: int) -> "Tensor":
        data = np.swapaxes(self.data, a, b).copy()

        def bwd(g: np.ndarray) -> None:
            self._accumulate(np.swapaxes(g, a, b))

        return Tensor._result(data, (self,), bwd, "swapaxes")

    def __getitem__(self, key) -> "Tensor":
        _check_basic_key(key)
        data = self.data[key].copy()

        def bwd(g: np.ndarray) -> None:
            full = np.zeros_like(self.data)
            full[key] = g
            self._accumulate(full)

        return Tensor._result(data, (self,), bwd, "slice")

    def take_rows(self, indices) -> "Tensor":
        """Gather rows along axis 0 by integer index (duplicates allowed)."""
        idx = np.asarray(indices, dtype=np.intp)
        data = self.data[idx].copy()

        def bwd(g: np.ndarray) -> None:
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accumulate(full)

        return Tensor._result(data, (self,), bwd, "take_rows")

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g: np.ndarray) -> None:
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape))
            else:
                expanded = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(expanded, self.shape))

        return Tensor._result(data, (self,), bwd, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise nonlinearities ------------------------------------------

    def exp(self) -> "Tensor":
        data = np.exp(self.data)

        def bwd(g: np.ndarray) -> None:
            self._accumulate(g * data)

        return Tensor._result(data, (self,), bwd, "exp")

    def log(self) -> "Tensor":
        data = np.log(self.data)

        def bwd(g: np.ndarray) -> None:
            self._accumulate(g / self.data)

        return Tensor._result(data, (self,), bwd, "log")

    def sqrt(self) -> "Tensor":
        data = np.sqrt(self.data)

        def bwd(g: np.ndarray) -> None:
            self._accumulate(g * 0.5 / data)

        return Tensor._result(data, (self,), bwd, "sqrt")


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _swap_last(arr: np.ndarray) -> np.ndarray:
    return np.swapaxes(arr, -1, -2)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_basic_key(key) -> None:
    parts = key if isinstance(key, tuple) else (key,)
    for part in parts:
        if not isinstance(part, (int, slice, type(Ellipsis))):
            raise ShapeError("only basic int/slice indexing is differentiable; use take_rows for gather")


# -- fused primitives ----------------------------------------------------------

def softmax(t: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {t.shape}")
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g: np.ndarray) -> None:
        inner = (g * out).sum(axis=axis, keepdims=True)
        t._accumulate(out * (g - inner))

    return Tensor._result(out, (t,), bwd, "softmax")


def logsumexp(t: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Stable log(sum(exp(t))) along ``axis``; backward weight is softmax(t)."""
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"logsumexp axis {axis} out of range for shape {t.shape}")
    m = t.data.max(axis=axis, keepdims=True)
    e = np.exp(t.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bwd(g: np.ndarray) -> None:
        gk = g if keepdims else np.expand_dims(g, axis)
        t._accumulate(gk * soft)

    return Tensor._result(out, (t,), bwd, "logsumexp")


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Variance uses the biased (1/n) estimator, the transformer convention.
    """
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    d = t.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}")
    mu = t.data.mean(axis=-1, keepdims=True)
    centered = t.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gamma.data * xhat + beta.data

    def bwd(g: np.ndarray) -> None:
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if t.requires_grad:
            gx = g * gamma.data
            mean_gx = gx.mean(axis=-1, keepdims=True)
            mean_gx_xhat = (gx * xhat).mean(axis=-1, keepdims=True)
            t._accumulate(inv_std * (gx - mean_gx - xhat * mean_gx_xhat))

    return Tensor._result(out, (t, gamma, beta), bwd, "layer_norm")


def gelu(t: Tensor) -> Tensor:
    """Exact GELU x * Phi(x), with Phi the standard normal CDF (erf form)."""
    x = t.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bwd(g: np.ndarray) -> None:
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        t._accumulate(g * (cdf + x * pdf))

    return Tensor._result(out, (t,), bwd, "gelu")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def bwd(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._result(data, tensors, bwd, "concat")


def l2_normalize(t: Tensor, eps: float = 0.0) -> Tensor:
    """Scale the last axis to unit Euclidean norm. Zero rows raise upstream."""
    norm = np.sqrt((t.data ** 2).sum(axis=-1, keepdims=True)) + eps
    out = t.data / norm

    def bwd(g: np.ndarray) -> None:
        inner = (g * out).sum(axis=-1, keepdims=True)
        t._accumulate((g - out * inner) / norm)

    return Tensor._result(out, (t,), bwd, "l2_normalize")


# -- constructors --------------------------------------------------------------

def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def trunc_normal(shape, rng: np.random.Generator, std: float = 0.02,
                 requires_grad: bool = False) -> Tensor:
    """Gaussian init with resampling of draws beyond two standard deviations."""
    data = rng.standard_normal(shape) * std
    bound = 2.0 * std
    bad = np.abs(data) > bound
    while bad.any():
        data[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(data) > bound
    return Tensor(data, requires_grad=requires_grad)


# -- gradient checking ----------------------------------------------------------

def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor],
                      eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` must evaluate a fresh scalar loss from the current values of
    ``params`` each time it is called. The relative error denominator is
    max(|analytic|, |numeric|, 1e-8) elementwise.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ShapeError("finite_diff_check needs a scalar-valued function")
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f().item()
                flat[i] = orig - eps
                lo = f().item()
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * eps)
                ana = a.reshape(-1)[i]
                denom = max(abs(ana), abs(numeric), 1e-8)
                worst = max(worst, abs(ana - numeric) / denom)
    return worst
