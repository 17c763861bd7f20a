"""Single-step adversarial training loops, robustness evaluation and CO detection."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import model as mdl
from .concentration import AdaptPolicy, batch_stats
from .numkernel import INF, is_inf
from .perturb import AttackSpec, PerturbSpec, lp_direction, pgd_batch, sphere_project

log = logging.getLogger(__name__)

METHODS = ("clean", "fgsm", "rs_fgsm", "lp_fixed", "lp_adaptive")
STREAMS = {"data": 0, "init": 1, "noise": 2, "pgd": 3, "dropout": 4}


def stream(seed: int, name: str) -> np.random.Generator:
    """Named, independent RNG sub-stream of a run seed."""
    return np.random.default_rng([seed, STREAMS[name]])


@dataclass
class TrainConfig:
    method: str = "lp_adaptive"
    epochs: int = 30
    batch_size: int = 128
    hidden: tuple[int, ...] = (256, 256)
    activation: str = "relu"
    optimizer: str = "adam"
    lr_max: float = 1e-3
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    dropout: float = 0.0
    dropout_in_attack: bool = False
    perturb: PerturbSpec = field(default_factory=lambda: PerturbSpec(0.1))
    adapt: Optional[AdaptPolicy] = None
    adapt_cadence: str = "batch"
    eval_attacks: list[AttackSpec] = field(default_factory=list)
    eval_every: int = 1
    eval_fgsm_eps: Optional[float] = None  # defaults to the first l^inf eval attack radius
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if (self.adapt is not None) != (self.method == "lp_adaptive"):
            raise ValueError("an adapt policy is required exactly when method='lp_adaptive'")
        if self.method == "rs_fgsm" and not is_inf(self.perturb.p):
            raise ValueError("rs_fgsm trains under the l^inf norm")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.adapt_cadence not in ("batch", "epoch"):
            raise ValueError("adapt_cadence must be 'batch' or 'epoch'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class TrainRecord:
    epoch: int
    clean_acc: float
    fgsm_acc: float
    pgd_linf_acc: float
    pgd_l2_acc: float
    mean_grad_l2: float
    mean_pr: float
    mean_pr1: float
    mean_delta_h: float
    mean_cos2inf: float
    median_q_star: float
    p_used: float
    lr: float


@dataclass
class CoEvent:
    epoch_detected: int
    pgd_drop: float
    fgsm_level: float
    pr1_drop_ratio: float


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, records):
        super().__init__(msg)
        self.records = records


# ---------------------------------------------------------------------------
# evaluation


def default_eval_attacks(eps_linf: float, eps_l2: float, steps: int = 20, restarts: int = 2,
                         clip=None) -> list[AttackSpec]:
    return [AttackSpec(steps, restarts, eps_linf, INF, clip_domain=clip, init="fgsm"),
            AttackSpec(steps, restarts, eps_l2, 2.0, clip_domain=clip)]


def evaluate(params: mdl.ModelParams, x, y, attacks, rng: np.random.Generator,
             fgsm_eps: Optional[float] = None, clip=None, batch_size: int = 512) -> dict:
    """Clean accuracy plus one robust accuracy per attack.

    A sample counts as robust only if it is classified correctly at the clean
    input and at every iterate the attack evaluates.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    pred = mdl.predict(params, x)
    out = {"clean": float((pred == y).mean())}
    if fgsm_eps is not None:
        ok = pred == y
        for s in range(0, n, batch_size):
            sl = slice(s, s + batch_size)
            g = mdl.xent_loss_and_grads(params, x[sl], y[sl], need_params=False).input_grads
            xa = x[sl] + fgsm_eps * np.sign(g)
            if clip is not None:
                xa = np.clip(xa, clip[0], clip[1])
            ok[sl] &= mdl.predict(params, xa) == y[sl]
        out["fgsm"] = float(ok.mean())
    for atk in attacks:
        ok = np.empty(n, dtype=bool)
        for s in range(0, n, batch_size):
            sl = slice(s, s + batch_size)
            loss_at = mdl.input_loss_fn(params, y[sl])
            _, _, fooled = pgd_batch(loss_at, x[sl], atk, rng,
                                     predict=lambda z: mdl.predict(params, z), y=y[sl])
            ok[sl] = ~fooled
        out[atk.name] = float(ok.mean())
    return out


# ---------------------------------------------------------------------------
# training


def _craft(cfg: TrainConfig, params, xb, yb, noise_rng, drop_rng, policy_q):
    """Return (x_adv, attack gradients, q used or None)."""
    spec = cfg.perturb
    eps = spec.epsilon
    method = cfg.method
    drop = cfg.dropout if cfg.dropout_in_attack else 0.0

    def grads(x):
        return mdl.xent_loss_and_grads(params, x, yb, need_params=False, dropout=drop,
                                       rng=drop_rng if drop > 0 else None).input_grads

    if method == "rs_fgsm":
        eta = noise_rng.uniform(-eps, eps, size=xb.shape)
        G = grads(xb + eta)
        return xb + np.clip(eta + eps * np.sign(G), -eps, eps), G, 1.0
    x_used, delta0 = xb, 0.0
    if method in ("lp_fixed", "lp_adaptive") and spec.noise_mode != "none":
        eta = noise_rng.uniform(-eps, eps, size=xb.shape)
        if spec.noise_mode in ("augment_input", "both"):
            x_used = xb + eta
        if spec.noise_mode in ("init_boundary", "both"):
            delta0 = sphere_project(eta, spec.p, eps)
    G = grads(x_used + delta0)
    if method == "clean":
        return xb, G, None
    if method == "fgsm":
        q = 1.0
    elif method == "lp_fixed":
        q = spec.q
    else:
        q = policy_q(G)
    return x_used + eps * lp_direction(G, q, spec.soften), G, q


def train(cfg: TrainConfig, data, on_record=None):
    """Run adversarial training; returns ``(params, records)``.

    ``data`` is a :class:`lpforge.harness.data.Dataset`. Evaluation uses its test
    split only. Identical config and seed give bit-identical records.
    """
    xtr, ytr = data.train()
    xte, yte = data.test()
    if len(ytr) == 0 or len(yte) == 0:
        raise ValueError("dataset needs non-empty train and test splits")
    d = xtr.shape[1]
    spec = cfg.perturb
    clip = spec.clip_domain

    data_rng, noise_rng = stream(cfg.seed, "data"), stream(cfg.seed, "noise")
    pgd_rng, drop_rng = stream(cfg.seed, "pgd"), stream(cfg.seed, "dropout")
    params = mdl.init_mlp([d, *cfg.hidden, data.n_classes], stream(cfg.seed, "init"), cfg.activation)
    steps_per_epoch = math.ceil(len(ytr) / cfg.batch_size)
    opt = mdl.OptimizerState(kind=cfg.optimizer, lr_max=cfg.lr_max, lr_min=cfg.lr_min,
                             total_steps=cfg.epochs * steps_per_epoch, momentum=cfg.momentum,
                             weight_decay=cfg.weight_decay)
    attacks = list(cfg.eval_attacks)
    fgsm_eps = cfg.eval_fgsm_eps
    if fgsm_eps is None:
        fgsm_eps = next((a.epsilon for a in attacks if is_inf(a.p)), None)
    linf_name = next((a.name for a in attacks if is_inf(a.p)), None)
    l2_name = next((a.name for a in attacks if a.p == 2), None)

    policy = cfg.adapt
    epoch_q = None
    records: list[TrainRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        perm = data_rng.permutation(len(ytr))
        acc = {k: [] for k in ("l2", "pr", "pr1", "dh", "cos", "qs")}
        q_used = []
        lr = opt.lr()

        def policy_q(G, _acc=acc):
            st = batch_stats(G, policy)
            _acc["qs"].append(st.q_star)
            if cfg.adapt_cadence == "epoch" and epoch_q is not None:
                return epoch_q
            return st.q_batch

        for s in range(0, len(ytr), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            xb, yb = xtr[idx], ytr[idx]
            x_adv, G, q = _craft(cfg, params, xb, yb, noise_rng, drop_rng, policy_q)
            if clip is not None:
                x_adv = np.clip(x_adv, clip[0], clip[1])
            st = batch_stats(G)
            acc["l2"].append(st.grad_l2)
            acc["pr"].append(st.pr)
            acc["pr1"].append(st.pr1)
            acc["dh"].append(st.delta_h)
            acc["cos"].append(st.cos2inf)
            if q is not None:
                q_used.append(q)
            lg = mdl.xent_loss_and_grads(params, x_adv, yb, dropout=cfg.dropout,
                                         rng=drop_rng if cfg.dropout > 0 else None)
            if not math.isfinite(lg.loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", records)
            lr = mdl.optimizer_step(opt, params, lg.param_grads)

        qs = np.concatenate(acc["qs"]) if acc["qs"] else np.empty(0)
        if policy is not None and len(qs):
            epoch_q = float(np.median(qs))
        if epoch % cfg.eval_every and epoch != cfg.epochs:
            continue
        res = evaluate(params, xte, yte, attacks, pgd_rng, fgsm_eps, clip)
        cat = {k: np.concatenate(v) if v else np.empty(0) for k, v in acc.items() if k != "qs"}

        def mean(a):
            return float(a.mean()) if len(a) else math.nan

        if q_used:
            p_used = _p_of(float(np.median(q_used)))
        else:
            p_used = spec.p
        rec = TrainRecord(
            epoch=epoch, clean_acc=res["clean"], fgsm_acc=res.get("fgsm", math.nan),
            pgd_linf_acc=res[linf_name] if linf_name else math.nan,
            pgd_l2_acc=res[l2_name] if l2_name else math.nan,
            mean_grad_l2=mean(cat["l2"]), mean_pr=mean(cat["pr"]), mean_pr1=mean(cat["pr1"]),
            mean_delta_h=mean(cat["dh"]), mean_cos2inf=mean(cat["cos"]),
            median_q_star=float(np.median(qs)) if len(qs) else math.nan,
            p_used=p_used, lr=lr)
        records.append(rec)
        log.info("epoch %d %s", epoch, rec)
        if on_record is not None:
            on_record(rec)
    return params, records


def _p_of(q: float) -> float:
    return INF if q == 1 else q / (q - 1.0)


# ---------------------------------------------------------------------------
# catastrophic overfitting


def detect_co(records, drop_threshold: float = 0.30, window: int = 5,
              fgsm_tolerance: float = 0.10) -> Optional[CoEvent]:
    """First epoch where multi-step accuracy collapses while single-step accuracy holds.

    Fires when ``pgd_linf_acc`` is at least ``drop_threshold`` below its peak over
    the preceding ``window`` records and ``fgsm_acc`` is no more than
    ``fgsm_tolerance`` below its running mean.
    """
    if len(records) < 2:
        raise ValueError("detect_co needs at least two records")
    pgd = np.array([r.pgd_linf_acc for r in records])
    fg = np.array([r.fgsm_acc for r in records])
    pr1 = np.array([r.mean_pr1 for r in records])
    for t in range(1, len(records)):
        lo = max(0, t - window)
        k = lo + int(np.argmax(pgd[lo:t]))
        drop = pgd[k] - pgd[t]
        if drop >= drop_threshold and fg[t] >= fg[: t + 1].mean() - fgsm_tolerance:
            ratio = (pr1[k] - pr1[t]) / pr1[k] if pr1[k] > 0 else math.nan
            return CoEvent(records[t].epoch, float(drop), float(fg[t]), float(ratio))
    return None


RECORD_FIELDS = [f.name for f in fields(TrainRecord)]
