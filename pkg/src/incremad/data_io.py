"""Feature datasets: container, binary/CSV persistence and a synthetic drift generator.

Binary layout (little endian)::

    b"CLF1"  u32 version  u32 n  u32 d  u32 n_classes  u32 float_width
    n records of: d floats (float_width bytes each)  u32 label

``float_width`` is 8 (default) or 4.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, LabelError, ShapeError

MAGIC = b"CLF1"
VERSION = 1
_HEADER = struct.Struct("<4s5I")

BONA_FIDE = 0
MORPHED = 1


@dataclass(eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = ""
    doc_ids: np.ndarray | None = None
    live_ids: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be n x d, got shape {self.features.shape}")
        n = self.features.shape[0]
        if n < 1:
            raise ShapeError("a dataset needs at least one sample")
        if self.labels.shape[0] != n:
            raise ShapeError(f"{n} feature rows but {self.labels.shape[0]} labels")
        if self.n_classes < 1:
            raise ConfigError(f"n_classes must be positive, got {self.n_classes}")
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= self.n_classes))
        if bad.size:
            raise LabelError(
                f"record {bad[0]}: label {self.labels[bad[0]]} outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.n_classes == other.n_classes
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index, name: str | None = None) -> "Dataset":
        pick = (lambda a: None if a is None else a[index])
        return Dataset(self.features[index], self.labels[index], self.n_classes,
                       self.name if name is None else name,
                       pick(self.doc_ids), pick(self.live_ids))

    @staticmethod
    def concat(parts: list["Dataset"], name: str = "") -> "Dataset":
        if not parts:
            raise ShapeError("nothing to concatenate")
        return Dataset(np.concatenate([p.features for p in parts]),
                       np.concatenate([p.labels for p in parts]),
                       max(p.n_classes for p in parts), name)


def pair_difference(doc_feature, live_feature) -> np.ndarray:
    """D-MAD pair descriptor: document embedding minus live embedding."""
    doc = np.asarray(doc_feature, dtype=np.float64)
    live = np.asarray(live_feature, dtype=np.float64)
    if doc.shape != live.shape:
        raise ShapeError(f"feature shapes differ: {doc.shape} vs {live.shape}")
    return doc - live


def _record_dtype(dim: int, width: int) -> np.dtype:
    return np.dtype([("x", f"<f{width}", (dim,)), ("y", "<u4")])


def save_dataset(ds: Dataset, path, float_width: int = 8) -> None:
    if float_width not in (4, 8):
        raise ConfigError(f"float width must be 4 or 8 bytes, got {float_width}")
    n, d = ds.features.shape
    rec = np.empty(n, dtype=_record_dtype(d, float_width))
    rec["x"] = ds.features
    rec["y"] = ds.labels
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, d, ds.n_classes, float_width))
        fh.write(rec.tobytes())


def load_dataset(path) -> Dataset:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    magic, version, n, d, n_classes, width = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if n < 1 or d < 1 or n_classes < 1:
        raise FormatError(f"{path}: empty dataset (n={n}, d={d}, C={n_classes})", offset=8)
    if width not in (4, 8):
        raise FormatError(f"{path}: float width {width} not in (4, 8)", offset=20)
    dtype = _record_dtype(d, width)
    body = len(data) - _HEADER.size
    if body < n * dtype.itemsize:
        whole = body // dtype.itemsize
        raise FormatError(f"{path}: truncated at record {whole} of {n}",
                          offset=_HEADER.size + whole * dtype.itemsize)
    if body > n * dtype.itemsize:
        raise FormatError(f"{path}: trailing bytes after {n} records",
                          offset=_HEADER.size + n * dtype.itemsize)
    rec = np.frombuffer(data, dtype=dtype, count=n, offset=_HEADER.size)
    labels = rec["y"].astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{path}: record {i} has label {labels[i]} >= {n_classes}",
                          offset=_HEADER.size + i * dtype.itemsize + d * width)
    features = rec["x"].astype(np.float64)
    nonfinite = np.flatnonzero(~np.isfinite(features).all(axis=1))
    if nonfinite.size:
        i = int(nonfinite[0])
        raise FormatError(f"{path}: record {i} has non-finite features",
                          offset=_HEADER.size + i * dtype.itemsize)
    return Dataset(features, labels, int(n_classes), path.stem)


def save_csv(ds: Dataset, path) -> None:
    header = ",".join([f"f{i}" for i in range(ds.dim)] + ["label"])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for x, y in zip(ds.features, ds.labels):
            fh.write(",".join(repr(float(v)) for v in x) + f",{int(y)}\n")


def load_csv(path, n_classes: int | None = None) -> Dataset:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        d = len(header) - 1
        if d < 1 or header != [f"f{i}" for i in range(d)] + ["label"]:
            raise FormatError(f"{path}: header must be f0..f{{d-1}},label", offset=0)
        rows, labels = [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            cells = line.rstrip("\n").split(",")
            if len(cells) != d + 1:
                raise FormatError(f"{path}: line {lineno} has {len(cells)} fields, expected {d + 1}")
            try:
                rows.append([float(c) for c in cells[:-1]])
                labels.append(int(cells[-1]))
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no records")
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    return Dataset(np.asarray(rows), labels, n_classes, path.stem)


def load_any(path) -> Dataset:
    path = Path(path)
    return load_csv(path) if path.suffix.lower() == ".csv" else load_dataset(path)


@dataclass
class SynthSourceSpec:
    """Gaussian class clusters per source, each source shifted by its own offsets.

    ``shift`` is the norm of the random per-source, per-class mean offset;
    ``class_sep`` is the distance of each global class mean from the origin.
    Everything is finally multiplied by ``feature_scale``; embedding-like
    magnitudes (norms around 1) keep large distillation weights stable.
    """

    n_sources: int = 4
    shift: float = 2.0
    cov_scale: float = 1.0
    per_class: int = 150
    dim: int = 16
    seed: int = 0
    n_classes: int = 2
    class_sep: float = 1.5
    test_per_class: int = 250
    feature_scale: float = 0.25
    names: list[str] = field(default_factory=list)

    def validate(self):
        for name in ("n_sources", "per_class", "n_classes", "test_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.dim < 2:
            raise ConfigError("dim must be at least 2")
        if self.shift < 0 or self.class_sep < 0:
            raise ConfigError("shift and class_sep must be non-negative")
        if self.cov_scale <= 0 or self.feature_scale <= 0:
            raise ConfigError("cov_scale and feature_scale must be positive")


def _unit_rows(rng, n, d) -> np.ndarray:
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _draw_source(rng, class_means, spec: SynthSourceSpec, per_class: int, name: str) -> Dataset:
    offsets = spec.shift * _unit_rows(rng, spec.n_classes, spec.dim)
    feats, labels = [], []
    for c in range(spec.n_classes):
        centre = class_means[c] + offsets[c]
        feats.append(centre + np.sqrt(spec.cov_scale) * rng.normal(size=(per_class, spec.dim)))
        labels.append(np.full(per_class, c))
    features = spec.feature_scale * np.concatenate(feats)
    return Dataset(features, np.concatenate(labels), spec.n_classes, name)


def synth_sources(spec: SynthSourceSpec) -> tuple[list[Dataset], Dataset]:
    """Training sources plus a held-out test set drawn around a fresh offset.

    Each source and the test set get their own child of one ``SeedSequence``
    so no RNG stream is shared.
    """
    spec.validate()
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_sources + 2)
    class_means = spec.class_sep * _unit_rows(np.random.default_rng(children[0]),
                                              spec.n_classes, spec.dim)
    names = spec.names or [f"source{j}" for j in range(spec.n_sources)]
    sources = [
        _draw_source(np.random.default_rng(children[1 + j]), class_means, spec,
                     spec.per_class, names[j])
        for j in range(spec.n_sources)
    ]
    test = _draw_source(np.random.default_rng(children[-1]), class_means, spec,
                        spec.test_per_class, "test")
    return sources, test
