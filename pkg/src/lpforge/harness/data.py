"""In-memory datasets, synthetic generators, IDX loading and the LPDS01 binary format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SYNTHETIC_KINDS = ("gauss_blobs", "two_spirals", "sparse_signal")
LPDS_MAGIC = b"LPDS01"
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

TRAIN, TEST = 0, 1


class DatasetError(ValueError):
    """Malformed dataset file; ``code`` is a short machine-readable tag."""

    def __init__(self, code: str, msg: str):
        super().__init__(f"{code}: {msg}")
        self.code = code


IdxError = DatasetError


@dataclass
class Dataset:
    name: str
    x: np.ndarray  # (N, d) float64
    y: np.ndarray  # (N,) int64
    split: np.ndarray  # (N,) uint8, TRAIN or TEST
    feature_range: tuple[float, float] = (0.0, 1.0)
    n_classes: int = 2

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.uint8)
        n = len(self.y)
        if self.x.ndim != 2 or self.x.shape[0] != n or self.split.shape != (n,):
            raise ValueError("x, y and split must agree on the sample count")
        if not np.isin(self.split, (TRAIN, TEST)).all():
            raise ValueError("split tags must be 0 (train) or 1 (test)")
        if (self.split == TRAIN).sum() < 1 or (self.split == TEST).sum() < 1:
            raise ValueError("need at least one train and one test sample")
        if n and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError("labels outside [0, n_classes)")
        lo, hi = self.feature_range
        if self.x.size and (self.x.min() < lo or self.x.max() > hi):
            raise ValueError(f"features outside feature_range {self.feature_range}")

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def train(self):
        m = self.split == TRAIN
        return self.x[m], self.y[m]

    def test(self):
        m = self.split == TEST
        return self.x[m], self.y[m]


def _split_tags(n: int, test_frac: float, rng: np.random.Generator) -> np.ndarray:
    n_test = min(max(1, int(round(test_frac * n))), n - 1)
    tags = np.zeros(n, dtype=np.uint8)
    tags[rng.permutation(n)[:n_test]] = TEST
    return tags


def _minmax(x):
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def make_synthetic(kind: str, d: int, classes: int, n_per_class: int, seed: int = 0, *,
                   test_frac: float = 0.25, separation: float = 4.0, k: int = 4,
                   noise: float = 1.0, background: float = 1.0) -> Dataset:
    """Deterministic synthetic classification data with features in [0, 1].

    ``gauss_blobs`` puts class means on a simplex of edge ``separation`` (in noise
    units) with isotropic Gaussian noise. ``two_spirals`` draws interleaved spiral
    arms in the first two coordinates. ``sparse_signal`` carries the label in only
    ``k`` coordinates; the remaining ``d - k`` coordinates are label-independent
    uniform draws of width ``background`` centred at 0.5.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"kind must be one of {SYNTHETIC_KINDS}")
    if d < 2 or classes < 2 or n_per_class < 1:
        raise ValueError("need d >= 2, classes >= 2, n_per_class >= 1")
    rng = np.random.default_rng([seed, 0])
    n = classes * n_per_class
    y = np.repeat(np.arange(classes), n_per_class)

    if kind == "gauss_blobs":
        # vertices e_c / sqrt(2) have pairwise distance 1; rotate into d dims
        m = max(d, classes)
        basis = np.linalg.qr(rng.standard_normal((m, m)))[0][:d, :classes]
        means = separation / np.sqrt(2.0) * basis.T
        x = means[y] + noise * rng.standard_normal((n, d))
        x = _minmax(x)
    elif kind == "two_spirals":
        t = rng.uniform(0.25, 1.0, size=n) * 3.0 * np.pi
        phase = 2.0 * np.pi * y / classes
        r = t / (3.0 * np.pi)
        x = 0.05 * noise * rng.standard_normal((n, d))
        x[:, 0] += r * np.cos(t + phase)
        x[:, 1] += r * np.sin(t + phase)
        x = _minmax(x)
    else:
        if not 1 <= k <= d:
            raise ValueError("sparse_signal needs 1 <= k <= d")
        if classes <= 2 ** k:
            # distinct sign codes keep the classes separable in the k coordinates
            pool = rng.permutation(2 ** k)[:classes]
            codes = np.array([[1.0 if (c >> j) & 1 else -1.0 for j in range(k)] for c in pool])
        else:
            codes = rng.choice([-1.0, 1.0], size=(classes, k))
        x = 0.5 + background * rng.uniform(-0.5, 0.5, size=(n, d))
        sig = 0.5 + 0.5 * separation / (separation + 1.0) * codes[y]
        x[:, :k] = np.clip(sig + 0.1 * noise * rng.standard_normal((n, k)), 0.0, 1.0)
    perm = rng.permutation(n)
    x, y = x[perm], y[perm]
    return Dataset(f"{kind}-d{d}-c{classes}-s{seed}", x, y, _split_tags(n, test_frac, rng),
                   (0.0, 1.0), classes)


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path, magic: int, what: str):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DatasetError("truncated", f"{path}: header shorter than 4 bytes")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DatasetError("bad-magic", f"{path}: {what} magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = got & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise DatasetError("truncated", f"{path}: dimension table cut short")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    need = int(np.prod(dims))
    payload = raw[4 + 4 * ndim:]
    if len(payload) < need:
        raise DatasetError("truncated", f"{path}: payload has {len(payload)} of {need} bytes")
    if len(payload) > need:
        raise DatasetError("trailing", f"{path}: {len(payload) - need} bytes past the payload")
    return dims, np.frombuffer(payload, dtype=np.uint8)


def load_idx(images_path, labels_path, *, test_frac: float = 0.2, seed: int = 0,
             n_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels become float64 in [0, 1].

    The files carry no split, so a seeded ``test_frac`` holdout is drawn.
    """
    idims, pix = _read_idx(images_path, IDX_IMAGES, "images")
    ldims, lab = _read_idx(labels_path, IDX_LABELS, "labels")
    if idims[0] != ldims[0]:
        raise DatasetError("count-mismatch", f"{idims[0]} images but {ldims[0]} labels")
    n = idims[0]
    x = pix.reshape(n, -1).astype(np.float64) / 255.0
    y = lab.astype(np.int64)
    if n_classes is None:
        n_classes = max(int(y.max()) + 1 if n else 2, 2)
    if n < 2:
        raise DatasetError("count-mismatch", "need at least two samples for a train/test split")
    tags = _split_tags(n, test_frac, np.random.default_rng([seed, 0]))
    return Dataset(Path(images_path).stem, x, y, tags, (0.0, 1.0), n_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N, rows, cols) and labels (N,) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    hdr = struct.pack(">II", IDX_IMAGES, images.shape[0]) + struct.pack(">II", *images.shape[1:3])
    Path(images_path).write_bytes(hdr + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# LPDS01
#
# layout: magic | u32 N | u32 d | u32 classes | f64 lo | f64 hi | u16 name length | name utf-8 |
#         f64 x (N*d, row-major) | u32 labels (N) | u8 split (N); all little-endian

_LPDS_HEAD = struct.Struct("<IIIddH")


def write_dataset(ds: Dataset, path) -> None:
    name = ds.name.encode("utf-8")
    n, d = ds.x.shape
    buf = [LPDS_MAGIC, _LPDS_HEAD.pack(n, d, ds.n_classes, *ds.feature_range, len(name)), name,
           np.ascontiguousarray(ds.x, dtype="<f8").tobytes(),
           ds.y.astype("<u4").tobytes(), ds.split.astype(np.uint8).tobytes()]
    Path(path).write_bytes(b"".join(buf))


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:len(LPDS_MAGIC)] != LPDS_MAGIC:
        raise DatasetError("bad-magic", f"{path}: not an LPDS01 dataset")
    off = len(LPDS_MAGIC)
    if len(raw) < off + _LPDS_HEAD.size:
        raise DatasetError("truncated", f"{path}: header cut short")
    n, d, classes, lo, hi, nl = _LPDS_HEAD.unpack_from(raw, off)
    off += _LPDS_HEAD.size
    need = nl + 8 * n * d + 4 * n + n
    if len(raw) - off < need:
        raise DatasetError("truncated", f"{path}: payload cut short")
    if len(raw) - off > need:
        raise DatasetError("trailing", f"{path}: trailing bytes")
    name = raw[off:off + nl].decode("utf-8")
    off += nl
    x = np.frombuffer(raw, "<f8", n * d, off).reshape(n, d).astype(np.float64)
    off += 8 * n * d
    y = np.frombuffer(raw, "<u4", n, off).astype(np.int64)
    off += 4 * n
    split = np.frombuffer(raw, np.uint8, n, off).copy()
    return Dataset(name, x, y, split, (lo, hi), classes)
