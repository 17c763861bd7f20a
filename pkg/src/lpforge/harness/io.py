"""Records CSV, run manifests and the strict JSON training configuration."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema

from .. import __version__
from ..concentration import AdaptPolicy
from ..numkernel import INF
from ..perturb import PerturbSpec
from ..training import TrainConfig, TrainRecord, default_eval_attacks
from .data import load_idx, make_synthetic, read_dataset

CSV_HEADER = ["epoch", "clean_acc", "fgsm_acc", "pgd_linf_acc", "pgd_l2_acc", "grad_l2", "pr", "pr1",
              "delta_h", "cos2inf", "q_star", "p_used", "lr"]
# CSV column -> TrainRecord attribute
_COLUMN_FIELD = dict(zip(CSV_HEADER, ["epoch", "clean_acc", "fgsm_acc", "pgd_linf_acc", "pgd_l2_acc",
                                      "mean_grad_l2", "mean_pr", "mean_pr1", "mean_delta_h",
                                      "mean_cos2inf", "median_q_star", "p_used", "lr"]))


class ConfigError(ValueError):
    pass


def _fmt(v) -> str:
    if isinstance(v, int):
        return str(v)
    return f"{float(v):.9g}"


def write_records_csv(records, path) -> None:
    """Write records with a fixed header; floats carry 9 significant digits, infinity is ``inf``."""
    if not records:
        raise ValueError("write_records_csv: no records")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([_fmt(getattr(r, _COLUMN_FIELD[c])) for c in CSV_HEADER])


def read_records_csv(path) -> list[TrainRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected header")
    out = []
    for row in rows[1:]:
        vals = {_COLUMN_FIELD[c]: (int(v) if c == "epoch" else float(v)) for c, v in zip(CSV_HEADER, row)}
        out.append(TrainRecord(**vals))
    return out


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    config: dict
    seed: int
    version: str = __version__
    started: str = ""
    finished: str = ""
    outputs: dict = field(default_factory=dict)  # role -> path

    def add_output(self, role: str, path) -> None:
        path = str(path)
        if path in self.outputs.values():
            raise ValueError(f"output {path} listed twice")
        self.outputs[role] = path

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# ---------------------------------------------------------------------------
# config

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_P = {"oneOf": [{"type": "number", "minimum": 2}, {"const": "inf"}]}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["method", "dataset", "perturb"],
    "properties": {
        "method": {"enum": ["clean", "fgsm", "rs_fgsm", "lp_fixed", "lp_adaptive"]},
        "seed": {"type": "integer", "minimum": 0},
        "epochs": _POS_INT,
        "batch_size": _POS_INT,
        "hidden": {"type": "array", "items": _POS_INT},
        "activation": {"enum": ["relu", "gelu"]},
        "optimizer": {
            "type": "object", "additionalProperties": False,
            "properties": {"kind": {"enum": ["adam", "sgd"]}, "lr_max": _NUM, "lr_min": _NUM,
                           "momentum": _NUM, "weight_decay": _NUM},
        },
        "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "dropout_in_attack": {"type": "boolean"},
        "dataset": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["gauss_blobs", "two_spirals", "sparse_signal"]},
                "d": {"type": "integer", "minimum": 2}, "classes": {"type": "integer", "minimum": 2},
                "n_per_class": _POS_INT, "seed": {"type": "integer", "minimum": 0},
                "test_frac": _NUM, "separation": _NUM, "k": _POS_INT, "noise": _NUM, "background": _NUM,
                "path": {"type": "string"},
                "idx_images": {"type": "string"}, "idx_labels": {"type": "string"},
            },
        },
        "perturb": {
            "type": "object", "additionalProperties": False, "required": ["epsilon"],
            "properties": {"epsilon": {"type": "number", "minimum": 0}, "p": _P,
                           "soften": {"type": "number", "minimum": 0},
                           "noise_mode": {"enum": ["none", "augment_input", "init_boundary", "both"]},
                           "clip_domain": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
        },
        "adapt": {
            "type": ["object", "null"], "additionalProperties": False,
            "properties": {"beta": _NUM, "alpha": _NUM, "q_min": _NUM, "q_max": _NUM, "soften": _NUM,
                           "cadence": {"enum": ["batch", "epoch"]}},
        },
        "eval": {
            "type": "object", "additionalProperties": False,
            "properties": {"eps_linf": {"type": "number", "minimum": 0},
                           "eps_l2": {"type": "number", "minimum": 0},
                           "steps": _POS_INT, "restarts": _POS_INT, "every": _POS_INT},
        },
    },
}


@dataclass
class RunConfig:
    train: TrainConfig
    dataset: dict
    raw: dict


def _p_value(v):
    return INF if v == "inf" else float(v)


def parse_config(raw: dict) -> RunConfig:
    """Validate a config mapping against the schema and build the training config."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(x) for x in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}") from None
    ds = raw["dataset"]
    sources = [("kind" in ds), ("path" in ds), ("idx_images" in ds or "idx_labels" in ds)]
    if sum(sources) != 1:
        raise ConfigError("dataset needs exactly one of kind / path / idx_images+idx_labels")
    if sources[2] and not ("idx_images" in ds and "idx_labels" in ds):
        raise ConfigError("dataset: idx_images and idx_labels go together")
    pt = raw["perturb"]
    clip = pt.get("clip_domain")
    try:
        perturb = PerturbSpec(pt["epsilon"], _p_value(pt.get("p", "inf")), pt.get("soften", 1e-12),
                              pt.get("noise_mode", "none"), tuple(clip) if clip else None)
        ad = raw.get("adapt")
        adapt, cadence = None, "batch"
        if ad is not None:
            ad = dict(ad)
            cadence = ad.pop("cadence", "batch")
            if "alpha" in ad and "beta" not in ad:
                ad["beta"] = None
            adapt = AdaptPolicy(**ad)
        ev = raw.get("eval", {})
        eps_linf = ev.get("eps_linf", perturb.epsilon if perturb.p == INF else 8 / 255)
        attacks = default_eval_attacks(eps_linf, ev.get("eps_l2", 4 * eps_linf), ev.get("steps", 20),
                                       ev.get("restarts", 2), perturb.clip_domain)
        opt = raw.get("optimizer", {})
        cfg = TrainConfig(
            method=raw["method"], epochs=raw.get("epochs", 30), batch_size=raw.get("batch_size", 128),
            hidden=tuple(raw.get("hidden", (256, 256))), activation=raw.get("activation", "relu"),
            optimizer=opt.get("kind", "adam"), lr_max=opt.get("lr_max", 1e-3), lr_min=opt.get("lr_min", 0.0),
            momentum=opt.get("momentum", 0.9), weight_decay=opt.get("weight_decay", 0.0),
            dropout=raw.get("dropout", 0.0), dropout_in_attack=raw.get("dropout_in_attack", False),
            perturb=perturb, adapt=adapt, adapt_cadence=cadence, eval_attacks=attacks,
            eval_every=ev.get("every", 1), seed=raw.get("seed", 0))
    except ValueError as e:
        raise ConfigError(f"config error: {e}") from None
    return RunConfig(cfg, ds, raw)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_config(raw)


def load_dataset(spec: dict, base: Path | None = None):
    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() or base is None else base / p

    if "path" in spec:
        return read_dataset(resolve(spec["path"]))
    if "idx_images" in spec:
        return load_idx(resolve(spec["idx_images"]), resolve(spec["idx_labels"]))
    kw = {k: v for k, v in spec.items() if k not in ("kind", "d", "classes", "n_per_class", "seed")}
    return make_synthetic(spec["kind"], spec.get("d", 64), spec.get("classes", 2),
                          spec.get("n_per_class", 200), spec.get("seed", 0), **kw)


def nan_to_none(x):
    """JSON-safe float: NaN becomes null and infinity the string ``inf``."""
    if isinstance(x, float):
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
    return x
