"""Oracle and property suites behind the ``verify`` command.

Every suite calls the production functions through their modules, so patching
a formula there (for a mutation test) is seen here.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import concentration as conc
from .. import model as mdl
from .. import numkernel as nk
from .. import oracles
from .. import perturb as pt


@dataclass
class Check:
    label: str
    ok: bool
    detail: str = ""


@dataclass
class SuiteResult:
    name: str
    checks: list[Check] = field(default_factory=list)
    seconds: float = 0.0
    error: str = ""

    @property
    def passed(self) -> bool:
        return not self.error and bool(self.checks) and all(c.ok for c in self.checks)

    def check(self, label: str, ok, detail: str = "") -> None:
        self.checks.append(Check(label, bool(ok), detail))


def _rng(seed):
    return np.random.default_rng([seed, 77])


def suite_norms(r: SuiteResult, seed: int = 0) -> None:
    rng = _rng(seed)
    worst = 0.0
    for _ in range(20):
        v = rng.standard_normal(rng.integers(2, 40)) * 10.0 ** rng.uniform(-3, 3)
        for p in (1.0, 4 / 3, 1.5, 2.0, 3.0, 16.0, nk.INF):
            ref = oracles.mp_lp_norm(v, p)
            worst = max(worst, abs(nk.lp_norm(v, p) - ref) / ref)
    r.check("lp_norm vs 50-digit reference", worst < 1e-12, f"max rel err {worst:.2e}")
    r.check("huge components do not overflow", math.isfinite(nk.lp_norm(np.array([1e300, 1e300]), 2.0)))

    worst = 0.0
    for d in (8, 512):
        G = rng.standard_normal((200, d))
        for p in (2.0, 4.0, 16.0, 64.0):
            delta = pt.lp_step(G, pt.PerturbSpec(0.3, p, soften=0.0)).delta
            worst = max(worst, float(np.max(np.abs(nk.lp_norm(delta, p, axis=1) - 0.3))))
    r.check("||lp_step||_p = eps", worst < 1e-9, f"max dev {worst:.2e}")

    g = rng.standard_normal(30)
    d2 = pt.lp_step(g, pt.PerturbSpec(0.5, 2.0, soften=0.0)).delta
    r.check("p = 2 gives eps g / ||g||_2", np.max(np.abs(d2 - 0.5 * g / np.linalg.norm(g))) < 1e-12)
    err = 0.0
    for q in (1.1, 1.5, 1.9):
        ref = oracles.mp_lp_step(g, 0.5, q)
        err = max(err, float(np.max(np.abs(pt.lp_step(g, pt.PerturbSpec.from_q(0.5, q, soften=0.0)).delta - ref))))
    r.check("lp_step vs high-precision formula", err < 1e-12, f"max abs err {err:.2e}")
    gb = np.sign(g) * rng.uniform(0.5, 2.0, g.size)
    dq = pt.lp_step(gb, pt.PerturbSpec.from_q(0.5, 1 + 1e-6, soften=0.0)).delta
    r.check("q -> 1 recovers FGSM", np.max(np.abs(dq - pt.fgsm(gb, 0.5).delta)) < 1e-3)


def _mlp_case(rng):
    d, c = int(rng.integers(2, 7)), int(rng.integers(2, 5))
    hidden = [int(rng.integers(2, 6)) for _ in range(int(rng.integers(1, 3)))]
    params = mdl.init_mlp([d, *hidden, c], rng, "gelu" if rng.random() < 0.5 else "relu")
    n = int(rng.integers(1, 4))
    return params, rng.standard_normal((n, d)), rng.integers(0, c, n)


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def suite_autodiff(r: SuiteResult, seed: int = 0) -> None:
    rng = _rng(seed)
    worst_x, worst_w = 0.0, 0.0
    for _ in range(10):
        params, x, y = _mlp_case(rng)
        lg = mdl.xent_loss_and_grads(params, x, y)

        def loss_x(z):
            return float(mdl.xent_loss_and_grads(params, z, y, need_params=False).per_sample_loss.sum())

        worst_x = max(worst_x, _rel(lg.input_grads, oracles.fd_grad(loss_x, x)))
        w, _ = params.layers[0]

        def loss_w(wn, w=w):
            saved = w.copy()
            w[...] = wn
            out = mdl.xent_loss_and_grads(params, x, y, need_params=False).loss
            w[...] = saved
            return out

        worst_w = max(worst_w, _rel(lg.param_grads[0][0], oracles.fd_grad(loss_w, w.copy())))
    r.check("input gradients vs central differences", worst_x < 1e-4, f"max rel err {worst_x:.2e}")
    r.check("weight gradients vs central differences", worst_w < 1e-4, f"max rel err {worst_w:.2e}")
    try:
        nk.value_and_input_grad(lambda v: nk.Var(np.sin(v.value)), np.ones(3))
        ok = False
    except nk.UnsupportedPrimitive:
        ok = True
    except Exception:
        ok = False
    r.check("unsupported primitive is rejected", ok)


def suite_hvp(r: SuiteResult, seed: int = 0) -> None:
    rng = _rng(seed)
    worst = 0.0
    for _ in range(5):
        d = int(rng.integers(2, 8))
        A = rng.standard_normal((d, d))
        H = A + A.T
        v = rng.standard_normal(d)
        x = rng.standard_normal(d)
        hv = nk.hvp_from_grad(lambda z: H @ z, x, v)
        worst = max(worst, _rel(hv, H @ v))
    r.check("HVP exact on quadratics", worst < 1e-8, f"max rel err {worst:.2e}")
    params, x, y = _mlp_case(rng)
    params.activation = "gelu"
    loss_at = mdl.input_loss_fn(params, y[:1])
    x0 = x[0]
    Hfd = oracles.fd_hessian(lambda z: loss_at(z)[0], x0, h=1e-3)
    v = rng.standard_normal(x0.size)
    hv = nk.hvp_from_grad(lambda z: loss_at(z)[1], x0, v, h=1e-5)
    r.check("HVP on an MLP vs dense finite-difference Hessian", _rel(hv, Hfd @ v) < 1e-3,
            f"rel err {_rel(hv, Hfd @ v):.2e}")
    worst = 0.0
    for _ in range(5):
        d = int(rng.integers(3, 9))
        Q = np.linalg.qr(rng.standard_normal((d, d)))[0]
        w = rng.uniform(-3, 3, d)
        w[0], w[1] = 4.0, -3.5
        H = (Q * w) @ Q.T
        est = nk.extreme_eigs_from_grad(lambda z: H @ z, np.zeros(d), max_iter=2000, tol=1e-10)
        worst = max(worst, abs(est.lambda_max - 4.0), abs(est.lambda_min + 3.5))
    r.check("power iteration finds both extreme eigenvalues", worst < 1e-5, f"max err {worst:.2e}")


def _quadratic_case(rng):
    """Random convex quadratic with K < 1 at the origin; returns (g, H, eps)."""
    d = int(rng.integers(2, 11))
    Q = np.linalg.qr(rng.standard_normal((d, d)))[0]
    H = (Q * rng.uniform(0.1, 1.0, d)) @ Q.T
    g = rng.standard_normal(d)
    lam = float(np.linalg.eigvalsh(H)[-1])
    eps = rng.uniform(0.05, 0.95) * np.linalg.norm(g) / (2 * lam)
    return g, H, eps


def fixed_point_case(rng):
    g, H, eps = _quadratic_case(rng)

    def loss_at(x):
        return float(g @ x + 0.5 * x @ H @ x), g + H @ x

    x0 = np.zeros(len(g))
    K = pt.lipschitz_K(loss_at, x0, eps)
    sol = pt.fixed_point_solve(loss_at, x0, pt.PerturbSpec(eps, 2.0, soften=0.0), max_iter=50, tol=1e-10)
    ref = oracles.sphere_max_quadratic(g, H, eps)
    return K, sol, oracles.angle(sol.delta, ref)


def suite_fixed_point(r: SuiteResult, seed: int = 0) -> None:
    rng = _rng(seed)
    worst, iters, ks = 0.0, 0, []
    for _ in range(20):
        K, sol, ang = fixed_point_case(rng)
        ks.append(K)
        if K < 1:
            worst = max(worst, ang)
            iters = max(iters, sol.iterations if sol.converged else 10**9)
    r.check("all sampled cases contract (K < 1)", max(ks) < 1, f"max K {max(ks):.3f}")
    r.check("fixed point matches exact sphere maximiser", worst < 1e-3, f"max angle {worst:.2e} rad")
    r.check("converges within 50 iterations", iters <= 50, f"max iterations {iters}")


def suite_lemma1(r: SuiteResult, seed: int = 0, trials: int = 20_000) -> None:
    rng = _rng(seed)
    zs = []
    for _ in range(5):
        g = concentrated_gradient(rng, 100)
        g = g / np.linalg.norm(g)
        res = conc.lemma1_mc_check(g, 0.05 * np.max(np.abs(g)), trials, rng)
        zs.append(res.z)
    r.check("noise raises the l1/l2 ratio (z >= 3)", min(zs) >= 3, f"min z {min(zs):.1f}")


def concentrated_gradient(rng, d, pr1_frac=0.1):
    """Gaussian vector with a geometric magnitude profile; pr1 < pr1_frac * d."""
    while True:
        g = rng.standard_normal(d) * np.exp(-np.arange(d) / rng.uniform(1.0, 4.0))
        g = rng.permutation(g)
        if conc.pr1(g) < pr1_frac * d:
            return g


def suite_lemma2(r: SuiteResult, seed: int = 0, n: int = 1000) -> None:
    rng = _rng(seed)
    V = rng.standard_normal((n, 50))
    c = conc.cos2inf(V)
    bad = 0
    for q in (1.05, 1.2, 1.35, 1.5):
        bad += int(np.sum(conc.cos_2p_exact(V, q) < c - 1e-10))
    r.check("cos(l2, lp) >= cos(l2, l-inf)", bad == 0, f"{bad} violations in {4 * n}")
    r.check("lemma2_check agrees", all(conc.lemma2_check(v) for v in V[:50]))


def taylor_slope(V, qs=(1e-1, 1e-2, 1e-3)) -> float:
    errs = [float(np.mean(np.abs(conc.cos_2p_exact(V, 1 + h) - conc.cos_2p_taylor(V, 1 + h, 0.0))))
            for h in qs]
    return float(np.polyfit(np.log(qs), np.log(errs), 1)[0])


def suite_taylor(r: SuiteResult, seed: int = 0) -> None:
    rng = _rng(seed)
    V = rng.standard_normal((30, 1000))
    s = taylor_slope(V)
    r.check("remainder is second order (slope >= 1.9)", s >= 1.9, f"slope {s:.3f}")
    h = 1e-7
    V = V[:5]
    fd = (conc.cos_2p_exact(V, 1 + 2 * h) - conc.cos_2p_exact(V, 1 + h)) / h
    pred = conc.cos2inf(V) * conc.entropies(V, 0.0)[2]
    r.check("first-order coefficient is cos2inf * delta_h", _rel(fd, pred) < 1e-3, f"rel err {_rel(fd, pred):.1e}")


def suite_qstar(r: SuiteResult, seed: int = 0) -> None:
    rng = _rng(seed)
    # a wide barrier keeps q* away from the clamps so the equality is exercised
    pol = conc.AdaptPolicy(beta=0.3, q_max=2.0)
    worst, n_inner = 0.0, 0
    for _ in range(40):
        v = concentrated_gradient(rng, int(rng.integers(20, 200)), 0.5)
        q, p, tau, rep = conc.select_q(v, pol)
        if pol.q_min < rep.q_raw < pol.q_max:
            n_inner += 1
            worst = max(worst, abs(conc.cos_2p_taylor(v, q, pol.soften) - tau))
        c = rep.cos2inf
        r_tau = math.cos(0.7 * math.acos(c))
        if abs(tau - r_tau) > 1e-12 or abs(p - q / (q - 1)) > 1e-9 * p:
            worst = math.inf
    r.check("unclamped q* puts the first-order cosine exactly on the barrier", n_inner > 5 and worst < 1e-9,
            f"{n_inner} unclamped, max dev {worst:.2e}")
    d = 64
    q_u = conc.select_q(np.ones(d), pol)[0]
    r.check("uniform magnitudes select q_min", q_u == pol.q_min, f"q {q_u}")
    qs = [conc.q_threshold(p1, d, 0.5, 0.3) for p1 in (4.0, 8.0, 16.0, 32.0)]
    r.check("q threshold decreases as pr1 grows", all(a > b for a, b in zip(qs, qs[1:])))
    x = 1 + (0.3 * math.sqrt(64 / 8.0) - 1) / 0.5
    r.check("q threshold arithmetic", abs(conc.q_threshold(8.0, 64, 0.5, 0.3) - x) < 1e-14)


def suite_projections(r: SuiteResult, seed: int = 0) -> None:
    rng = _rng(seed)
    for p in (2.0, 4.0, nk.INF):
        eta = rng.standard_normal((20, 16))
        dev = float(np.max(np.abs(nk.lp_norm(pt.sphere_project(eta, p, 0.2), p, axis=1) - 0.2)))
        r.check(f"sphere projection radius (p={p:g})", dev < 1e-12, f"max dev {dev:.1e}")
    W = rng.standard_normal((3, 8))

    def batch_loss(x):
        z = x @ W.T
        return np.sum(z * z, axis=1), 2 * z @ W

    x0 = rng.uniform(0.2, 0.8, (6, 8))
    for p in (2.0, nk.INF):
        atk = pt.AttackSpec(10, 2, 0.1, p, clip_domain=(0.0, 1.0))
        delta, _, _ = pt.pgd_batch(batch_loss, x0, atk, rng)
        nrm = float(np.max(nk.lp_norm(delta, p, axis=1)))
        inside = bool(np.all(x0 + delta >= -1e-15) and np.all(x0 + delta <= 1 + 1e-15))
        r.check(f"PGD stays in the ball and the box (p={p:g})", nrm <= 0.1 * (1 + 1e-9) and inside,
                f"max norm {nrm:.6g}")
    worst = 0.0
    for d in (16, 3072):
        for p in (2.0, 4.0, 16.0, nk.INF):
            spec = pt.PerturbSpec(1.0, p, soften=0.0)
            signs = rng.choice([-1.0, 1.0], size=(200, d))
            ratio = np.max(np.linalg.norm(pt.lp_step(signs, spec).delta, axis=1))
            worst = max(worst, abs(ratio - d ** (0.5 - (0 if p == nk.INF else 1 / p))))
    r.check("maximal l2 size is d^(1/2 - 1/p)", worst < 1e-6, f"max dev {worst:.1e}")


def suite_identities(r: SuiteResult, seed: int = 0) -> None:
    rng = _rng(seed)
    V = np.concatenate([rng.standard_normal((50, 40)), rng.standard_normal((50, 40)) ** 5])
    c = conc.cos2inf(V)
    r.check("cos2inf = sqrt(pr1 / d)", np.max(np.abs(c - np.sqrt(conc.pr1(V) / 40))) < 1e-12)
    spec2 = pt.PerturbSpec(1.0, 2.0, soften=0.0)
    literal = []
    for v in V:
        a, b = pt.lp_step(v, spec2).delta, pt.fgsm(v, 1.0).delta
        literal.append(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    r.check("cos2inf equals the literal l2 / l-inf step cosine", np.max(np.abs(c - literal)) < 1e-12)
    worst = 0.0
    for v in V[:20]:
        for q in (1.2, 1.6):
            a = pt.lp_step(v, pt.PerturbSpec.from_q(1.0, q, soften=0.0)).delta
            b = pt.lp_step(v, spec2).delta
            lit = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
            worst = max(worst, abs(lit - conc.cos_2p_exact(v, q)))
    r.check("cos_2p_exact equals the literal step cosine", worst < 1e-12, f"max dev {worst:.1e}")
    dh = conc.entropies(V)[2]
    r.check("delta_h >= 0", np.all(dh >= 0))
    pr = conc.participation_ratio(V)
    r.check("1 <= PR <= d", np.all((pr >= 1 - 1e-12) & (pr <= 40 + 1e-9)))


SUITES: dict[str, Callable[[SuiteResult, int], None]] = {
    "norms": suite_norms,
    "autodiff": suite_autodiff,
    "hvp": suite_hvp,
    "fixed_point": suite_fixed_point,
    "lemma1": suite_lemma1,
    "lemma2": suite_lemma2,
    "taylor": suite_taylor,
    "qstar": suite_qstar,
    "projections": suite_projections,
    "identities": suite_identities,
}


def run_suites(names=None, seed: int = 0) -> list[SuiteResult]:
    names = list(SUITES) if not names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s): {', '.join(unknown)}")
    out = []
    for n in names:
        res = SuiteResult(n)
        t = time.perf_counter()
        try:
            SUITES[n](res, seed)
        except Exception as e:  # a crash is a failure, not an abort of the table
            res.error = f"{type(e).__name__}: {e}"
        res.seconds = time.perf_counter() - t
        out.append(res)
    return out


def format_table(results: list[SuiteResult]) -> str:
    lines = [f"{'suite':<12} {'result':<6} {'time':>7}  detail"]
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        lines.append(f"{res.name:<12} {status:<6} {res.seconds:6.2f}s")
        if res.error:
            lines.append(f"    error: {res.error}")
        for c in res.checks:
            mark = "ok " if c.ok else "BAD"
            lines.append(f"    [{mark}] {c.label}" + (f" ({c.detail})" if c.detail else ""))
    return "\n".join(lines)
