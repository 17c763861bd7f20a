"""Reference computations that share no code path with the production kernels.

Used by the ``verify`` command and the test-suite: arbitrary-precision norms,
finite-difference derivatives, an exact sphere-constrained maximiser for
quadratics, multi-start projected ascent and a closed-form LDA probe.
"""
from __future__ import annotations

import math
from typing import Callable

import mpmath
import numpy as np
from scipy.optimize import brentq


def mp_lp_norm(v, p, dps: int = 50) -> float:
    """l^p norm of ``v`` evaluated in ``dps`` decimal digits."""
    with mpmath.workdps(dps):
        a = [abs(mpmath.mpf(float(t))) for t in np.asarray(v, dtype=np.float64).ravel()]
        if math.isinf(p):
            return float(max(a))
        p = mpmath.mpf(p)
        return float(mpmath.fsum(t**p for t in a) ** (1 / p))


def mp_lp_step(g, eps, q, dps: int = 50) -> np.ndarray:
    """``eps * sign(g) * (|g| / ||g||_q)^(q-1)`` in high precision (no softening)."""
    with mpmath.workdps(dps):
        g = [mpmath.mpf(float(t)) for t in np.asarray(g, dtype=np.float64).ravel()]
        q = mpmath.mpf(q)
        nq = mpmath.fsum(abs(t) ** q for t in g) ** (1 / q)
        return np.array([float(eps * mpmath.sign(t) * (abs(t) / nq) ** (q - 1)) for t in g])


def fd_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.size)
    flat = x.ravel()
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        out[i] = (f((flat + e).reshape(x.shape)) - f((flat - e).reshape(x.shape))) / (2 * h)
    return out.reshape(x.shape)


def fd_hessian(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Dense central-difference Hessian of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    H = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = h
            ej[j] = h
            v = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
            H[i, j] = H[j, i] = v
    return H


def sphere_max_quadratic(g, H, eps) -> np.ndarray:
    """Global maximiser of ``g.d + d.H.d / 2`` over ``||d||_2 = eps``.

    Solves the secular equation ``||(lam I - H)^-1 g|| = eps`` for the root with
    ``lam > lambda_max(H)``. Assumes ``g`` is not orthogonal to the top eigenvector.
    """
    g = np.asarray(g, dtype=np.float64)
    w, V = np.linalg.eigh(np.asarray(H, dtype=np.float64))
    c = V.T @ g

    def phi(lam):
        return math.sqrt(float(np.sum((c / (lam - w)) ** 2))) - eps

    lo = w[-1] + 1e-14 * max(1.0, abs(w[-1]))
    hi = w[-1] + np.linalg.norm(g) / eps + 1.0
    while phi(hi) > 0:
        hi = w[-1] + 2 * (hi - w[-1])
    lam = brentq(phi, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return V @ (c / (lam - w))


def _project_sphere(d, p, eps):
    n = _plain_norm(d, p)
    return d * (eps / n) if n > 0 else d


def _plain_norm(v, p) -> float:
    a = np.abs(np.asarray(v, dtype=np.float64))
    if math.isinf(p):
        return float(a.max())
    return float(np.sum(a**p) ** (1.0 / p))


def projected_ascent_max(loss: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
                         d: int, eps: float, p: float = 2.0, starts: int = 16, steps: int = 2000,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Multi-start projected gradient ascent on the l^p sphere of radius ``eps``.

    Projection is radial rescaling, which is exact for p = 2 and a heuristic
    otherwise. Returns the best iterate found.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    best, best_val = None, -math.inf
    for _ in range(starts):
        delta = _project_sphere(rng.standard_normal(d), p, eps)
        lr = eps
        val = loss(delta)
        for _ in range(steps):
            g = grad(delta)
            cand = _project_sphere(delta + lr * g / (np.linalg.norm(g) + 1e-300), p, eps)
            cv = loss(cand)
            if cv >= val:
                delta, val = cand, cv
            else:
                lr *= 0.5
                if lr < 1e-14 * eps:
                    break
        if val > best_val:
            best, best_val = delta, val
    return best


def angle(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    c = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    return math.acos(min(1.0, max(-1.0, c)))


def lda_probe(x_train, y_train, x_test, y_test, ridge: float = 1e-6) -> float:
    """Test accuracy of Fisher LDA with a pooled, ridge-regularised covariance."""
    x_train = np.asarray(x_train, dtype=np.float64)
    classes = np.unique(y_train)
    means = np.stack([x_train[y_train == c].mean(axis=0) for c in classes])
    centred = x_train - means[np.searchsorted(classes, y_train)]
    cov = centred.T @ centred / max(len(x_train) - len(classes), 1)
    cov += ridge * np.trace(cov) / cov.shape[0] * np.eye(cov.shape[0])
    prec_means = np.linalg.solve(cov, means.T)  # (d, C)
    priors = np.array([(y_train == c).mean() for c in classes])
    scores = np.asarray(x_test) @ prec_means - 0.5 * np.sum(means.T * prec_means, axis=0) + np.log(priors)
    return float((classes[scores.argmax(axis=1)] == np.asarray(y_test)).mean())
