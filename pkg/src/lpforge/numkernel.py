"""Float64 numeric kernel: l^p norms, a small reverse-mode tape, and curvature probes.

Tensors are plain ``numpy.ndarray`` objects with dtype float64. A ``GradVector``
is a 1-D float64 array. The tape in this module works on whole arrays, so a
network forward pass is a handful of nodes rather than one node per scalar.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

#: The l^infinity norm parameter. Compared by identity of value, never approximated
#: by a large finite p.
INF = math.inf


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class UnsupportedPrimitive(TypeError):
    """A value or operation outside the tape's primitive set reached the graph."""


# ---------------------------------------------------------------------------
# norms


def is_inf(p) -> bool:
    return p == INF


def lp_norm(v, p, axis=None):
    """Return the l^p norm of ``v`` for ``p`` in [1, inf].

    Large finite ``p`` is evaluated in max-factored form ``m * sum((|v|/m)^p)^(1/p)``
    so p up to 1e6 neither overflows nor underflows. With ``axis`` given the norm
    is taken along that axis.
    """
    a = np.abs(np.asarray(v, dtype=np.float64))
    if np.isnan(a).any():
        raise DomainError("lp_norm: NaN entry in vector")
    if not (is_inf(p) or p >= 1):
        raise DomainError(f"lp_norm: p must be >= 1 or INF, got {p!r}")
    if a.size == 0:
        raise DomainError("lp_norm: empty vector")
    if axis is None:
        a = a.reshape(-1)
        axis = 0
    m = a.max(axis=axis, keepdims=True)
    if is_inf(p):
        return np.squeeze(m, axis=axis)[()]
    if p == 1:
        return a.sum(axis=axis)[()]
    safe = np.where(m > 0, m, 1.0)
    s = ((a / safe) ** p).sum(axis=axis, keepdims=True)
    return np.squeeze(np.where(m > 0, safe * s ** (1.0 / p), 0.0), axis=axis)[()]


def dual_exponent(p) -> float:
    """q with 1/p + 1/q = 1; q = 1 for p = INF."""
    if is_inf(p):
        return 1.0
    if p <= 1:
        raise DomainError(f"dual_exponent: p must exceed 1, got {p!r}")
    return p / (p - 1.0)


def primal_exponent(q) -> float:
    """Inverse of :func:`dual_exponent`; q = 1 maps to INF."""
    if q == 1:
        return INF
    if q < 1:
        raise DomainError(f"primal_exponent: q must be >= 1, got {q!r}")
    return q / (q - 1.0)


# ---------------------------------------------------------------------------
# reverse-mode tape


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Var:
    """Array-valued node of the reverse-mode tape."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents: Sequence["Var"] = (), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def backward(self, seed=None):
        """Accumulate d(self)/d(node) into ``node.grad`` for every ancestor."""
        if seed is None:
            if self.value.size != 1:
                raise UnsupportedPrimitive("backward() without seed needs a scalar output")
            seed = np.ones_like(self.value)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for par in node._parents:
                if id(par) not in seen:
                    stack.append((par, False))
        for node in order:
            node.grad = None
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g):
        self.grad = g if self.grad is None else self.grad + g

    # arithmetic routes through the primitive functions below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_var(other), -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method == "__call__" and not kwargs:
            if ufunc is np.add:
                return add(*inputs)
            if ufunc is np.multiply:
                return mul(*inputs)
            if ufunc is np.subtract:
                return add(inputs[0], mul(as_var(inputs[1]), -1.0))
        raise UnsupportedPrimitive(f"numpy ufunc {ufunc.__name__} is not a tape primitive")

    def __pow__(self, other):
        raise UnsupportedPrimitive("power is not a tape primitive; use mul")

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        raise UnsupportedPrimitive("division by a tape value is not a primitive")

    def __rtruediv__(self, other):
        raise UnsupportedPrimitive("division by a tape value is not a primitive")


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    if isinstance(x, (int, float, np.ndarray, np.floating, np.integer)):
        return Var(x)
    raise UnsupportedPrimitive(f"cannot place {type(x).__name__} on the tape")


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        a._accum(_unbroadcast(g, a.value.shape))
        b._accum(_unbroadcast(g, b.value.shape))

    return Var(a.value + b.value, (a, b), bw)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        a._accum(_unbroadcast(g * b.value, a.value.shape))
        b._accum(_unbroadcast(g * a.value, b.value.shape))

    return Var(a.value * b.value, (a, b), bw)


def vsum(a) -> Var:
    """Sum of all entries."""
    a = as_var(a)

    def bw(g):
        a._accum(np.broadcast_to(g, a.value.shape).copy())

    return Var(a.value.sum(), (a,), bw)


def affine(x, w, b) -> Var:
    """``x @ w.T + b`` for ``x`` of shape (N, in) or (in,) and ``w`` of shape (out, in)."""
    x, w, b = as_var(x), as_var(w), as_var(b)
    if w.value.ndim != 2 or x.value.shape[-1] != w.value.shape[1]:
        raise DomainError(f"affine: shape mismatch {x.value.shape} vs weight {w.value.shape}")

    def bw(g):
        g2 = np.atleast_2d(g)
        x._accum((g2 @ w.value).reshape(x.value.shape))
        w._accum(g2.T @ np.atleast_2d(x.value))
        b._accum(_unbroadcast(g2.sum(axis=0), b.value.shape))

    return Var(x.value @ w.value.T + b.value, (x, w, b), bw)


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0

    def bw(g):
        a._accum(g * mask)

    return Var(np.where(mask, a.value, 0.0), (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Var:
    """GELU, tanh approximation."""
    a = as_var(a)
    x = a.value
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))

    def bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        a._accum(g * (0.5 * (1.0 + t) + 0.5 * x * dt))

    return Var(0.5 * x * (1.0 + t), (a,), bw)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_xent(logits, labels, reduction: str = "mean") -> Var:
    """Softmax cross-entropy of (N, C) logits against integer labels.

    ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"`` (per-sample vector).
    """
    logits = as_var(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.value.shape[0]
    if n == 0:
        raise DomainError("softmax_xent: empty batch")
    logp = log_softmax(logits.value)
    per = -logp[np.arange(n), labels]
    if reduction == "mean":
        out, scale = per.mean(), np.full(n, 1.0 / n)
    elif reduction == "sum":
        out, scale = per.sum(), np.ones(n)
    elif reduction == "none":
        out, scale = per, None
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        w = g * scale if scale is not None else g
        logits._accum(d * w[:, None])

    return Var(out, (logits,), bw)


# ---------------------------------------------------------------------------
# gradients and curvature


def value_and_input_grad(f: Callable[[Var], Var], x) -> tuple[float, np.ndarray]:
    """Evaluate scalar ``f`` at ``x`` and return ``(f(x), flat gradient)``."""
    x = np.asarray(x, dtype=np.float64)
    xv = Var(x.copy())
    out = f(xv)
    if not isinstance(out, Var):
        raise UnsupportedPrimitive(f"f returned {type(out).__name__}, expected a tape value")
    if out.value.size != 1:
        raise UnsupportedPrimitive("f must return a scalar")
    out.backward()
    g = xv.grad if xv.grad is not None else np.zeros_like(x)
    return float(out.value), np.asarray(g, dtype=np.float64).reshape(-1)


def grad_fn(f: Callable[[Var], Var]) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: value_and_input_grad(f, x)[1]


def hvp_from_grad(grad: Callable[[np.ndarray], np.ndarray], x, v, h: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian-vector product from a gradient oracle."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    nv = float(np.linalg.norm(v))
    if not nv > 0:
        raise DomainError("hvp: direction vector is zero")
    if not h > 0:
        raise DomainError("hvp: step h must be positive")
    u = v / nv
    gp = np.asarray(grad(x + h * u), dtype=np.float64).reshape(-1)
    gm = np.asarray(grad(x - h * u), dtype=np.float64).reshape(-1)
    return (gp - gm) * (nv / (2.0 * h))


def hvp(f: Callable[[Var], Var], x, v, h: float = 1e-4) -> np.ndarray:
    """Approximate ``Hessian(f)(x) @ v`` by central differences of tape gradients."""
    return hvp_from_grad(grad_fn(f), x, v, h)


@dataclass
class SpectralEstimate:
    lambda_max: float
    lambda_min: float
    iterations_used: int
    residual: float

    @property
    def spectral_norm(self) -> float:
        return max(abs(self.lambda_max), abs(self.lambda_min))


def _power(matvec, dim, max_iter, tol, rng):
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam, res = 0.0, math.inf
    for it in range(1, max_iter + 1):
        w = matvec(v)
        lam = float(v @ w)
        res = float(np.linalg.norm(w - lam * v))
        if res <= tol:
            return lam, v, it, res
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0, v, it, 0.0
        v = w / nw
    return lam, v, max_iter, res


def extreme_eigs_from_grad(grad, x, max_iter: int = 500, tol: float = 1e-6,
                           h: float = 1e-4, seed: int = 0) -> SpectralEstimate:
    """Largest and smallest Hessian eigenvalues by shifted power iteration.

    A first pass finds the dominant eigenvalue magnitude ``s``; ``H + sI`` and
    ``sI - H`` are then positive semidefinite and their top eigenvalues give
    ``lambda_max + s`` and ``s - lambda_min``. Non-convergence is reported through
    ``residual`` rather than raised.
    """
    if max_iter < 1:
        raise DomainError("extreme_eigs: max_iter must be >= 1")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.size
    rng = np.random.default_rng(seed)

    def hv(v):
        return hvp_from_grad(grad, x, v, h)

    lam0, _, it0, _ = _power(hv, d, max_iter, tol, rng)
    s = abs(lam0)
    if s == 0.0:
        return SpectralEstimate(0.0, 0.0, it0, 0.0)
    top, vt, it1, _ = _power(lambda v: hv(v) + s * v, d, max_iter, tol, rng)
    bot, vb, it2, _ = _power(lambda v: s * v - hv(v), d, max_iter, tol, rng)
    lmax, lmin = top - s, s - bot
    # residuals measured against the unshifted operator
    r1 = float(np.linalg.norm(hv(vt) - lmax * vt))
    r2 = float(np.linalg.norm(hv(vb) - lmin * vb))
    lmax, lmin = max(lmax, lmin), min(lmax, lmin)
    return SpectralEstimate(lmax, lmin, it0 + it1 + it2, max(r1, r2))


def extreme_eigs(f: Callable[[Var], Var], x, max_iter: int = 500, tol: float = 1e-6,
                 h: float = 1e-4, seed: int = 0) -> SpectralEstimate:
    return extreme_eigs_from_grad(grad_fn(f), x, max_iter, tol, h, seed)
