"""Gradient-concentration statistics and the adaptive norm selector.

All entropies are in nats. Functions taking a single vector also accept a
2-D array and then work row-wise, which is how the training loop uses them.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .numkernel import INF, DomainError, lp_norm

DELTA_H_FLOOR = 1e-15


def _nonzero(v, what):
    v = np.asarray(v, dtype=np.float64)
    if np.any(~(np.abs(v).max(axis=-1) > 0)):
        raise DomainError(f"{what}: zero vector")
    return v


def participation_ratio(v):
    """``(sum v^2)^2 / sum v^4``, between 1 and d."""
    v = _nonzero(v, "participation_ratio")
    a = np.abs(v) / np.abs(v).max(axis=-1, keepdims=True)
    s2 = (a * a).sum(axis=-1)
    return (s2 * s2 / (a**4).sum(axis=-1))[()]


def pr1(v):
    """Sign-vector participation ratio ``(||v||_1 / ||v||_2)^2``."""
    v = _nonzero(v, "pr1")
    a = np.abs(v) / np.abs(v).max(axis=-1, keepdims=True)
    return (a.sum(axis=-1) ** 2 / (a * a).sum(axis=-1))[()]


def cos2inf(v):
    """Cosine between the l2 and l^inf one-step perturbations, ``sqrt(pr1 / d)``."""
    v = np.asarray(v, dtype=np.float64)
    return np.sqrt(pr1(v) / v.shape[-1])[()]


def entropies(v, soften: float = 1e-12):
    """Shannon entropy, log-mean entropy and their gap for ``rho ~ soften + |v|``."""
    a = soften + np.abs(np.asarray(v, dtype=np.float64))
    tot = a.sum(axis=-1, keepdims=True)
    if np.any(~(tot > 0)):
        raise DomainError("entropies: vector has zero l1 mass")
    rho = a / tot
    d = rho.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        lr = np.log(rho)
        h = -np.where(rho > 0, rho * lr, 0.0).sum(axis=-1)
    h_m = -lr.sum(axis=-1) / d
    # sum (rho - 1/d) ln(d rho) equals h_m - h and is non-negative term by term
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = (rho - 1.0 / d) * np.log(rho * d)
    dh = np.where(rho > 0, terms, np.inf).sum(axis=-1)
    return h[()], h_m[()], dh[()]


def cos_2p_exact(v, q):
    """Cosine between the l2 and l^p one-step perturbations of gradient ``v``.

    ``||v||_q^q / (||v||_2 ||v||_{2(q-1)}^{q-1})``; at q = 1 zero components count
    towards the zero-norm term, giving ``||v||_1 / (||v||_2 sqrt(d))``.
    """
    if not 1 <= q <= 2:
        raise DomainError(f"cos_2p_exact: q must lie in [1, 2], got {q!r}")
    v = _nonzero(v, "cos_2p_exact")
    a = np.abs(v) / np.abs(v).max(axis=-1, keepdims=True)
    num = (a**q).sum(axis=-1)
    den = np.sqrt((a * a).sum(axis=-1)) * np.sqrt((a ** (2.0 * (q - 1.0))).sum(axis=-1))
    return (num / den)[()]


def cos_2p_taylor(v, q, soften: float = 1e-12):
    """First-order expansion ``sqrt(pr1/d) * (1 + (q-1) * delta_h)`` around q = 1."""
    if not 1 <= q <= 2:
        raise DomainError(f"cos_2p_taylor: q must lie in [1, 2], got {q!r}")
    v = _nonzero(v, "cos_2p_taylor")
    _, _, dh = entropies(v, soften)
    return (cos2inf(v) * (1.0 + (q - 1.0) * dh))[()]


# ---------------------------------------------------------------------------
# adaptive selection


@dataclass(frozen=True)
class AdaptPolicy:
    """Barrier parameterisation for the adaptive exponent.

    Exactly one of ``beta`` (angle shrink, ``tau = cos((1-beta) theta)``) and
    ``alpha`` (cosine inflation, ``tau = (1+alpha) cos theta``) is set.
    """

    beta: Optional[float] = 0.01
    alpha: Optional[float] = None
    q_min: float = 1.01
    q_max: float = 2.0
    soften: float = 1e-12

    def __post_init__(self):
        if (self.beta is None) == (self.alpha is None):
            raise DomainError("exactly one of alpha / beta must be set")
        if (self.beta is not None and self.beta < 0) or (self.alpha is not None and self.alpha < 0):
            raise DomainError("alpha / beta must be >= 0")
        if not 1 < self.q_min < self.q_max <= 2:
            raise DomainError("need 1 < q_min < q_max <= 2")

    def tau(self, c2inf):
        c2inf = np.asarray(c2inf, dtype=np.float64)
        if self.beta is not None:
            theta = np.arccos(np.clip(c2inf, -1.0, 1.0))
            return np.cos((1.0 - self.beta) * theta)[()]
        return np.minimum((1.0 + self.alpha) * c2inf, 1.0)[()]


@dataclass
class ConcentrationReport:
    d: int
    pr: float
    pr1: float
    h: float
    h_m: float
    delta_h: float
    cos2inf: float
    q_star: float
    p_star: float
    tau: float
    q_raw: float = math.nan
    flag: str = ""

    def to_dict(self) -> dict:
        out = asdict(self)
        if math.isinf(out["p_star"]):
            out["p_star"] = "inf"
        for k in ("q_raw",):
            if isinstance(out[k], float) and not math.isfinite(out[k]):
                out[k] = None
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)


def q_threshold(pr1_val, d, delta_h, tau):
    """Smallest dual exponent keeping the first-order cosine above ``tau``."""
    return 1.0 + (tau * np.sqrt(d / np.asarray(pr1_val, dtype=np.float64)) - 1.0) / delta_h


def _select_rows(v, policy: AdaptPolicy):
    v = _nonzero(np.atleast_2d(v), "select_q")
    d = v.shape[-1]
    p1 = np.atleast_1d(pr1(v))
    c = np.sqrt(p1 / d)
    h, h_m, dh = (np.atleast_1d(t) for t in entropies(v, policy.soften))
    tau = np.atleast_1d(policy.tau(c))
    num = tau / c - 1.0
    flags = np.full(len(p1), "", dtype=object)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = 1.0 + num / dh
    degenerate = dh <= DELTA_H_FLOOR
    # flat magnitudes: any q meets the barrier when tau <= cos2inf, none does otherwise
    spread_ok = degenerate & (num <= 1e-12)
    raw = np.where(spread_ok, 1.0, raw)
    raw = np.where(degenerate & ~spread_ok, np.inf, raw)
    flags[degenerate & ~spread_ok] = "delta_h_degenerate"
    flags[~degenerate & (raw > policy.q_max)] = "clamped_high"
    q = np.clip(raw, policy.q_min, policy.q_max)
    return dict(d=d, pr1=p1, cos=c, h=h, h_m=h_m, dh=dh, tau=tau, raw=raw, q=q, flags=flags)


def select_q(v, policy: AdaptPolicy = AdaptPolicy()):
    """Adaptive exponent for one gradient: returns ``(q_star, p_star, tau, report)``."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    r = _select_rows(v, policy)
    q = float(r["q"][0])
    p = q / (q - 1.0)
    rep = ConcentrationReport(
        d=int(r["d"]), pr=float(participation_ratio(v)), pr1=float(r["pr1"][0]),
        h=float(r["h"][0]), h_m=float(r["h_m"][0]), delta_h=float(r["dh"][0]),
        cos2inf=float(r["cos"][0]), q_star=q, p_star=p, tau=float(r["tau"][0]),
        q_raw=float(r["raw"][0]), flag=str(r["flags"][0]))
    return q, p, rep.tau, rep


@dataclass
class BatchStats:
    """Per-sample statistics of a gradient batch plus the batch's adaptive exponent."""

    grad_l2: np.ndarray
    pr: np.ndarray
    pr1: np.ndarray
    delta_h: np.ndarray
    cos2inf: np.ndarray
    q_star: np.ndarray  # per sample, nan when no policy
    q_batch: float  # median of q_star

    @property
    def valid(self) -> int:
        return len(self.pr)


def batch_stats(G, policy: Optional[AdaptPolicy] = None, soften: float = 1e-12) -> BatchStats:
    """Row statistics of a gradient batch. Zero rows are excluded from the statistics."""
    G = np.asarray(G, dtype=np.float64)
    l2 = np.sqrt((G * G).sum(axis=1))
    keep = l2 > 0
    Gk = G[keep]
    if len(Gk) == 0:
        e = np.empty(0)
        return BatchStats(l2, e, e, e, e, e, policy.q_max if policy else math.nan)
    pr = np.atleast_1d(participation_ratio(Gk))
    if policy is not None:
        r = _select_rows(Gk, policy)
        p1, c, dh, q = r["pr1"], r["cos"], r["dh"], r["q"]
        qb = float(np.median(q))
    else:
        p1 = np.atleast_1d(pr1(Gk))
        c = np.sqrt(p1 / G.shape[1])
        dh = np.atleast_1d(entropies(Gk, soften)[2])
        q = np.full(len(Gk), math.nan)
        qb = math.nan
    return BatchStats(l2, pr, p1, dh, c, q, qb)


# ---------------------------------------------------------------------------
# lemma validators


@dataclass
class Lemma1Result:
    lhs_mean: float
    rhs: float
    margin: float
    stderr: float

    @property
    def z(self) -> float:
        return self.margin / self.stderr if self.stderr > 0 else math.copysign(math.inf, self.margin)


def lemma1_mc_check(g, M, trials: int, rng: np.random.Generator, chunk: int = 10_000) -> Lemma1Result:
    """Monte-Carlo comparison of ``E[||g+eta||_1/||g+eta||_2]`` with ``||g||_1/||g||_2``.

    ``g`` is normalised to unit l2 first; ``eta ~ U[-M, M]^d``.
    """
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    n2 = float(np.linalg.norm(g))
    if not n2 > 0:
        raise DomainError("lemma1_mc_check: zero gradient")
    g = g / n2
    rhs = float(np.abs(g).sum())
    total, total_sq, done = 0.0, 0.0, 0
    while done < trials:
        m = min(chunk, trials - done)
        z = g + rng.uniform(-M, M, size=(m, g.size))
        r = np.abs(z).sum(axis=1) / np.sqrt((z * z).sum(axis=1))
        d = r - rhs
        total += d.sum()
        total_sq += (d * d).sum()
        done += m
    mean = total / trials
    var = max(total_sq / trials - mean * mean, 0.0) * trials / max(trials - 1, 1)
    return Lemma1Result(rhs + mean, rhs, mean, math.sqrt(var / trials))


def lemma2_check(v, q_grid: Sequence[float] = (1.05, 1.2, 1.35, 1.5), atol: float = 1e-10) -> bool:
    """True iff ``cos_2p_exact(v, q) >= cos2inf(v) - atol`` for every q in the grid."""
    c = cos2inf(v)
    return all(np.all(cos_2p_exact(v, q) >= c - atol) for q in q_grid)


def p_from_q(q: float) -> float:
    return INF if q == 1 else q / (q - 1.0)

