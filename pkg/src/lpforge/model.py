"""Small feed-forward classifiers, cross-entropy gradients, optimizers, checkpoints."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk

ACTIVATIONS = ("relu", "gelu")
CKPT_MAGIC = b"LPFORGE01"


@dataclass
class ModelParams:
    """Weights ``(W, b)`` per layer with ``W`` of shape (out, in)."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} malformed")
            if i and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ValueError(f"layer {i}: input {w.shape[1]} does not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def arrays(self) -> list[np.ndarray]:
        return [a for wb in self.layers for a in wb]

    def copy(self) -> "ModelParams":
        return ModelParams([(w.copy(), b.copy()) for w, b in self.layers], self.activation)


def init_mlp(sizes, seed: int | np.random.Generator = 0, activation: str = "relu") -> ModelParams:
    """Kaiming-uniform (fan-in) MLP with layer widths ``sizes``, e.g. ``[d, 256, 256, C]``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        bb = 1.0 / math.sqrt(fan_in)
        b = rng.uniform(-bb, bb, size=fan_out)
        layers.append((w, b))
    return ModelParams(layers, activation)


def _logits_graph(params: ModelParams, xv, dropout=0.0, rng=None):
    act = nk.relu if params.activation == "relu" else nk.gelu
    h = xv
    last = len(params.layers) - 1
    wvars = []
    for i, (w, b) in enumerate(params.layers):
        wv, bv = nk.Var(w), nk.Var(b)
        wvars.append((wv, bv))
        h = nk.affine(h, wv, bv)
        if i < last:
            h = act(h)
            if dropout > 0:
                keep = rng.random(h.value.shape) >= dropout
                h = nk.mul(h, keep / (1.0 - dropout))
    return h, wvars


def forward_logits(params: ModelParams, x) -> np.ndarray:
    """Logits of shape (N, C) for a batch ``x`` of shape (N, d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(f"input shape {x.shape} does not match model input dim {params.in_dim}")
    out, _ = _logits_graph(params, nk.Var(x))
    return out.value


def predict(params: ModelParams, x) -> np.ndarray:
    return forward_logits(params, x).argmax(axis=1)


def softmax(logits) -> np.ndarray:
    return np.exp(nk.log_softmax(np.asarray(logits, dtype=np.float64)))


@dataclass
class LossGrads:
    loss: float
    input_grads: np.ndarray  # (N, d), gradient of each sample's own loss
    param_grads: list[tuple[np.ndarray, np.ndarray]] | None
    per_sample_loss: np.ndarray
    logits: np.ndarray


def xent_loss_and_grads(params: ModelParams, x, y, *, need_params: bool = True,
                        dropout: float = 0.0, rng=None) -> LossGrads:
    """Batch-mean cross-entropy with per-sample input gradients and mean parameter gradients.

    Samples do not interact in the forward pass, so the gradient of the summed
    loss with respect to row i of ``x`` is exactly the gradient of sample i's
    loss. Parameter gradients are for the batch mean.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("xent_loss_and_grads: empty or non-2D batch")
    if x.shape[1] != params.in_dim:
        raise ValueError(f"input dim {x.shape[1]} != model input dim {params.in_dim}")
    if y.shape != (x.shape[0],) or y.min() < 0 or y.max() >= params.n_classes:
        raise ValueError("labels must be integer class indices in [0, classes)")
    if dropout > 0 and rng is None:
        raise ValueError("dropout needs an rng")
    n = x.shape[0]
    xv = nk.Var(x)
    logits, wvars = _logits_graph(params, xv, dropout, rng)
    per = nk.softmax_xent(logits, y, reduction="none")
    total = nk.vsum(per)
    total.backward()
    pgrads = None
    if need_params:
        pgrads = [(wv.grad / n, bv.grad / n) for wv, bv in wvars]
    return LossGrads(float(per.value.mean()), xv.grad, pgrads, per.value.copy(), logits.value)


def input_loss_fn(params: ModelParams, y):
    """``x -> (per-sample losses, per-sample input grads)`` for batches of rows.

    A 1-D ``x`` is treated as a single sample and returns a scalar loss and a flat
    gradient; this is the ``loss_at`` form the attack generators consume.
    """
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))

    def loss_at(x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        lg = xent_loss_and_grads(params, np.atleast_2d(x), y, need_params=False)
        if single:
            return float(lg.per_sample_loss[0]), lg.input_grads[0]
        return lg.per_sample_loss, lg.input_grads

    return loss_at


# ---------------------------------------------------------------------------
# optimizers


def cosine_lr(t: float, total: float, lr_max: float, lr_min: float) -> float:
    """Cosine annealing from ``lr_max`` at t=0 to ``lr_min`` at t=total."""
    frac = min(max(t / total, 0.0), 1.0) if total > 0 else 1.0
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    kind: str = "adam"  # "adam" | "sgd"
    lr_max: float = 1e-3
    lr_min: float = 0.0
    total_steps: int = 0  # cosine horizon for sgd; 0 disables the schedule
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def lr(self) -> float:
        if self.kind == "sgd" and self.total_steps > 0:
            return cosine_lr(self.step_count, self.total_steps, self.lr_max, self.lr_min)
        return self.lr_max


def optimizer_step(state: OptimizerState, params: ModelParams, param_grads) -> float:
    """Update ``params`` in place; returns the learning rate that was used."""
    arrays = params.arrays()
    grads = [g for gb in param_grads for g in gb]
    if len(grads) != len(arrays) or any(g.shape != a.shape for g, a in zip(grads, arrays)):
        raise ValueError("gradient shapes do not match parameters")
    if not state.m:
        state.m = [np.zeros_like(a) for a in arrays]
        if state.kind == "adam":
            state.v = [np.zeros_like(a) for a in arrays]
    lr = state.lr()
    wd = state.weight_decay
    if state.kind == "sgd":
        mu = state.momentum
        for a, g, buf in zip(arrays, grads, state.m):
            buf *= mu
            buf += g + wd * a
            a -= lr * buf
    else:
        b1, b2 = state.betas
        t = state.step_count + 1
        c1, c2 = 1.0 - b1**t, 1.0 - b2**t
        for a, g, m, v in zip(arrays, grads, state.m, state.v):
            g = g + wd * a if wd else g
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            a -= lr * (m / c1) / (np.sqrt(v / c2) + state.adam_eps)
    state.step_count += 1
    return lr


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: magic | u32 activation | u32 n_layers | (u32 out, u32 in) * n_layers |
#         float64 LE payload, per layer W (row-major) then b


def save_checkpoint(params: ModelParams, path) -> None:
    act = ACTIVATIONS.index(params.activation)
    buf = [CKPT_MAGIC, struct.pack("<II", act, len(params.layers))]
    for w, _ in params.layers:
        buf.append(struct.pack("<II", *w.shape))
    for w, b in params.layers:
        buf.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(buf))


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(CKPT_MAGIC)
    act, n = struct.unpack_from("<II", raw, off)
    off += 8
    shapes = []
    for _ in range(n):
        shapes.append(struct.unpack_from("<II", raw, off))
        off += 8
    layers = []
    for out, inn in shapes:
        need = 8 * (out * inn + out)
        if off + need > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        w = np.frombuffer(raw, "<f8", out * inn, off).reshape(out, inn).astype(np.float64)
        off += 8 * out * inn
        b = np.frombuffer(raw, "<f8", out, off).astype(np.float64)
        off += 8 * out
        layers.append((w, b))
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return ModelParams(layers, ACTIVATIONS[act])
