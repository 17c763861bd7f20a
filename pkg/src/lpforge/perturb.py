"""Attack generators under l^p constraints and the curvature/alignment diagnostics.

``loss_at`` callables map a single input ``x`` (1-D) to ``(loss, grad)``. The
batched helpers take a callable mapping an (N, d) batch to per-sample losses
and an (N, d) gradient array.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .numkernel import (INF, DomainError, dual_exponent, extreme_eigs_from_grad, is_inf,
                        lp_norm, primal_exponent)

NOISE_MODES = ("none", "augment_input", "init_boundary", "both")
MAX_ATTACK_EVALS = 100_000
NORM_SLACK = 1e-9


class NonFiniteGradient(ArithmeticError):
    pass


@dataclass(frozen=True)
class PerturbSpec:
    """Radius, norm and stabilisation settings for one-step and fixed-point attacks.

    ``p`` must be at least 2 or ``INF``; the dual exponent ``q`` is derived.
    """

    epsilon: float
    p: float = INF
    soften: float = 1e-12
    noise_mode: str = "none"
    clip_domain: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise DomainError(f"epsilon must be >= 0, got {self.epsilon!r}")
        if not (is_inf(self.p) or self.p >= 2):
            raise DomainError(f"p must be >= 2 or INF (q in [1, 2]), got {self.p!r}")
        if self.soften < 0:
            raise DomainError("soften must be >= 0")
        if self.noise_mode not in NOISE_MODES:
            raise DomainError(f"noise_mode must be one of {NOISE_MODES}")

    @property
    def q(self) -> float:
        return dual_exponent(self.p)

    @classmethod
    def from_q(cls, epsilon, q, **kw) -> "PerturbSpec":
        return cls(epsilon, primal_exponent(q), **kw)


@dataclass
class Perturbation:
    delta: np.ndarray
    achieved_norm: float
    iterations: int = 1
    converged: bool = True
    null_gradient: bool = False


# ---------------------------------------------------------------------------
# one-step maps


def lp_direction(g, q, soften=0.0):
    """Unit-l^p ascent direction ``sign(g) * ((soften+|g|) / ||soften+|g|||_q)^(q-1)``.

    Works row-wise on the last axis. ``q == 1`` returns ``sign(g)`` exactly. The
    sign comes from the raw gradient, so zero components stay zero after softening.
    """
    g = np.asarray(g, dtype=np.float64)
    s = np.sign(g)
    if q == 1:
        return s * 1.0
    gbar = soften + np.abs(g)
    nrm = np.asarray(lp_norm(gbar, q, axis=-1))[..., None]
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(nrm > 0, gbar / np.where(nrm > 0, nrm, 1.0), 0.0)
    return s * ratio ** (q - 1.0)


def fgsm(g, eps) -> Perturbation:
    g = np.asarray(g, dtype=np.float64)
    delta = eps * np.sign(g)
    return Perturbation(delta, float(lp_norm(delta, INF)), 1, True, not np.any(g != 0))


def lp_step(g, spec: PerturbSpec) -> Perturbation:
    """One fixed-point step from the origin: the l^p-FGSM perturbation for gradient ``g``."""
    g = np.asarray(g, dtype=np.float64)
    delta = spec.epsilon * lp_direction(g, spec.q, spec.soften)
    return Perturbation(delta, float(lp_norm(delta, spec.p)), 1, True, not np.any(g != 0))


def upsilon(g, q) -> np.ndarray:
    """Transition filter ``(|g| / ||g||_q)^(q-1)``, componentwise in [0, 1]."""
    if not 1 < q <= 2:
        raise DomainError(f"upsilon: q must lie in (1, 2], got {q!r}")
    a = np.abs(np.asarray(g, dtype=np.float64))
    n = lp_norm(a, q)
    if not n > 0:
        raise DomainError("upsilon: zero gradient")
    return (a / n) ** (q - 1.0)


# ---------------------------------------------------------------------------
# noise


def sphere_project(eta, p, eps):
    """Rescale each row of ``eta`` to l^p norm exactly ``eps`` (zero rows stay zero)."""
    n = lp_norm(eta, p, axis=-1)
    n = np.asarray(n)[..., None]
    return np.where(n > 0, eta * (eps / np.where(n > 0, n, 1.0)), 0.0)


def _radial_into_ball(delta, p, eps):
    if is_inf(p):
        return np.clip(delta, -eps, eps)
    n = np.asarray(lp_norm(delta, p, axis=-1))[..., None]
    scale = np.where(n > eps, eps / np.where(n > 0, n, 1.0), 1.0)
    return delta * scale


def noise_placement(x0, spec: PerturbSpec, rng: np.random.Generator):
    """Draw one ``eta ~ U[-eps, eps]^d`` and place it per ``spec.noise_mode``.

    Returns ``(x_used, delta0)``. ``augment_input`` shifts the input,
    ``init_boundary`` rescales eta onto the sphere of radius eps, ``both`` does
    both with the same draw.
    """
    if spec.noise_mode == "none":
        raise DomainError("noise_placement called with noise_mode='none'")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = spec.epsilon
    eta = rng.uniform(-eps, eps, size=x0.shape)
    x_used, delta0 = x0, np.zeros_like(x0)
    if spec.noise_mode in ("augment_input", "both"):
        x_used = x0 + eta
    if spec.noise_mode in ("init_boundary", "both"):
        delta0 = sphere_project(eta, spec.p, eps)
    return x_used, delta0


# ---------------------------------------------------------------------------
# multi-evaluation attacks


def fixed_point_map(loss_at, x0, delta, spec: PerturbSpec) -> np.ndarray:
    _, g = loss_at(x0 + delta)
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("non-finite gradient")
    return spec.epsilon * lp_direction(g, spec.q, spec.soften)


def fixed_point_solve(loss_at, x0, spec: PerturbSpec, max_iter: int = 50, tol: float = 1e-6,
                      rng: Optional[np.random.Generator] = None) -> Perturbation:
    """Iterate ``delta <- F_p(delta)`` from zero (or a boundary noise draw).

    Stops once an application moves the iterate by at most ``tol * eps`` in l2;
    that confirming application is not counted in ``iterations``.
    """
    if max_iter < 1:
        raise DomainError("fixed_point_solve: max_iter must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = spec.epsilon
    delta = np.zeros_like(x0)
    if spec.noise_mode in ("init_boundary", "both"):
        if rng is None:
            raise DomainError("noise initialisation needs an rng")
        _, delta = noise_placement(x0, spec, rng)
    null = False
    for k in range(1, max_iter + 1):
        try:
            new = fixed_point_map(loss_at, x0, delta, spec)
        except NonFiniteGradient:
            raise NonFiniteGradient(f"non-finite gradient at fixed-point iterate {k - 1}") from None
        if k == 1:
            null = not np.any(new != 0)
        step = float(np.linalg.norm(new - delta))
        delta = new
        if step <= tol * eps:
            return Perturbation(delta, float(lp_norm(delta, spec.p)), k - 1, True, null)
    return Perturbation(delta, float(lp_norm(delta, spec.p)), max_iter, False, null)


def rs_fgsm(loss_at, x0, spec: PerturbSpec, rng: np.random.Generator) -> Perturbation:
    """FGSM taken from a uniform random start, clipped back into the l^inf ball."""
    if not is_inf(spec.p):
        raise DomainError("rs_fgsm is defined for the l^inf norm only")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = spec.epsilon
    eta = rng.uniform(-eps, eps, size=x0.shape)
    _, g = loss_at(x0 + eta)
    g = np.asarray(g, dtype=np.float64)
    delta = np.clip(eta + eps * np.sign(g), -eps, eps)
    return Perturbation(delta, float(lp_norm(delta, INF)), 1, True, not np.any(g != 0))


@dataclass(frozen=True)
class AttackSpec:
    """PGD-K-R settings. ``step_size`` None means ``2 * eps / K``.

    ``init`` controls the first restart only (``random``, ``zero`` or ``fgsm``);
    later restarts always start uniformly inside the ball.
    """

    steps: int = 20
    restarts: int = 1
    epsilon: float = 0.1
    p: float = INF
    step_size: Optional[float] = None
    clip_domain: Optional[tuple[float, float]] = None
    init: str = "random"

    def __post_init__(self):
        if self.steps < 1 or self.restarts < 1:
            raise DomainError("steps and restarts must be >= 1")
        if self.steps * self.restarts > MAX_ATTACK_EVALS:
            raise DomainError("steps * restarts exceeds the configured limit")
        if self.step_size is not None and not self.step_size > 0:
            raise DomainError("step_size must be positive")
        if not (is_inf(self.p) or self.p >= 1):
            raise DomainError("p must be >= 1 or INF")
        if self.init not in ("random", "zero", "fgsm"):
            raise DomainError(f"unknown init {self.init!r}")

    @property
    def mu(self) -> float:
        return self.step_size if self.step_size is not None else 2.0 * self.epsilon / self.steps

    @property
    def name(self) -> str:
        norm = "linf" if is_inf(self.p) else f"l{self.p:g}"
        return f"pgd{self.steps}x{self.restarts}-{norm}"


def _ascent_dir(g, p):
    if is_inf(p):
        return np.sign(g)
    if p == 2:
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        return np.where(n > 0, g / np.where(n > 0, n, 1.0), 0.0)
    return lp_direction(g, dual_exponent(p))


def _domain_clip(x0, delta, clip):
    if clip is None:
        return delta
    return np.clip(x0 + delta, clip[0], clip[1]) - x0


def pgd_batch(batch_loss: Callable, x0, atk: AttackSpec, rng: np.random.Generator,
              predict: Optional[Callable] = None, y=None):
    """PGD over a batch of rows.

    Returns ``(delta, loss, fooled)``: per sample the final iterate of the restart
    with the largest final loss, that loss, and whether any evaluated iterate
    (the unperturbed input included) was classified differently from ``y``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps, p, mu = atk.epsilon, atk.p, atk.mu
    n = x0.shape[0]
    best_delta = np.zeros_like(x0)
    best_loss = np.full(n, -np.inf)
    fooled = np.zeros(n, dtype=bool)

    def check(delta):
        if predict is not None:
            fooled[:] |= predict(x0 + delta) != y

    check(np.zeros_like(x0))
    for r in range(atk.restarts):
        if r == 0 and atk.init == "zero":
            delta = np.zeros_like(x0)
        elif r == 0 and atk.init == "fgsm":
            _, g = batch_loss(x0)
            delta = eps * (np.sign(g) if is_inf(p) else _ascent_dir(g, p))
            if not is_inf(p) and p != 2:
                delta = sphere_project(delta, p, eps)
        else:
            delta = _radial_into_ball(rng.uniform(-eps, eps, size=x0.shape), p, eps)
        delta = _domain_clip(x0, delta, atk.clip_domain)
        if r > 0 or atk.init != "zero":
            check(delta)
        for _ in range(atk.steps):
            _, g = batch_loss(x0 + delta)
            delta = _radial_into_ball(delta + mu * _ascent_dir(g, p), p, eps)
            delta = _domain_clip(x0, delta, atk.clip_domain)
            check(delta)
        loss, _ = batch_loss(x0 + delta)
        better = loss > best_loss
        best_loss = np.where(better, loss, best_loss)
        best_delta[better] = delta[better]
    return best_delta, best_loss, fooled


def _batched(loss_at):
    def f(xb):
        out = [loss_at(row) for row in xb]
        return np.array([o[0] for o in out]), np.stack([np.asarray(o[1], float) for o in out])

    return f


def pgd_attack(loss_at, x0, atk: AttackSpec, rng: np.random.Generator):
    """Single-sample PGD; returns ``(Perturbation, max_loss)``."""
    x0 = np.asarray(x0, dtype=np.float64)
    delta, loss, _ = pgd_batch(_batched(loss_at), x0[None, :], atk, rng)
    d = delta[0]
    return Perturbation(d, float(lp_norm(d, atk.p)), atk.steps * atk.restarts, True,
                        False), float(loss[0])


# ---------------------------------------------------------------------------
# diagnostics


def lipschitz_K(loss_at, x0, eps, max_iter: int = 500, tol: float = 1e-6, h: float = 1e-4) -> float:
    """Contraction constant ``2 eps ||H|| / ||grad||_2`` with ``||H||`` the spectral norm."""
    x0 = np.asarray(x0, dtype=np.float64)
    _, g = loss_at(x0)
    gn = float(np.linalg.norm(g))
    if not gn > 0:
        raise DomainError("lipschitz_K: zero gradient at x0")
    est = extreme_eigs_from_grad(lambda x: loss_at(x)[1], x0, max_iter, tol, h)
    return 2.0 * eps * est.spectral_norm / gn


def grad_align_cos(loss_at, x0, eps) -> float:
    """Cosine between the gradient at x0 and at the l2-FGSM point ``x0 + eps g/||g||``."""
    x0 = np.asarray(x0, dtype=np.float64)
    _, g0 = loss_at(x0)
    n0 = float(np.linalg.norm(g0))
    if not n0 > 0:
        raise DomainError("grad_align_cos: zero gradient at x0")
    _, g1 = loss_at(x0 + eps * np.asarray(g0) / n0)
    n1 = float(np.linalg.norm(g1))
    if not n1 > 0:
        raise DomainError("grad_align_cos: zero gradient at the perturbed point")
    # 1 - |u0 - u1|^2 / 2 is exact for identical directions and accurate near 1
    diff = np.asarray(g0) / n0 - np.asarray(g1) / n1
    c = 1.0 - 0.5 * float(diff @ diff)
    return min(1.0, max(-1.0, c))
