"""Task streams: synthetic odors, permuted MNIST, class imbalance, file ingestion."""

from __future__ import annotations

import gzip
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError

CIL = "class-incremental"
STREAMING = "streaming"

FLYF_MAGIC = b"FLYF"
FLYF_VERSION = 1
_FLYF_HEADER = struct.Struct("<4sHIII")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ShapeError(f"features must be a 2-D array, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError("need exactly one label per feature row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_dims(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> Dataset:
        return Dataset(self.features[index], self.labels[index], self.n_classes)

    def restrict(self, classes) -> Dataset:
        return self.subset(np.isin(self.labels, list(classes)))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True, eq=False)
class Task:
    train: Dataset
    test: Dataset | None
    classes: tuple


@dataclass(eq=False)
class TaskStream:
    tasks: list
    protocol: str
    batch_size: int = 64
    epochs_per_task: int = 1
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.protocol == CIL:
            seen = set()
            for t in self.tasks:
                if seen & set(t.classes):
                    raise ConfigError("class-incremental tasks must have disjoint class sets")
                seen |= set(t.classes)
        elif self.protocol == STREAMING:
            if self.epochs_per_task != 1:
                raise ConfigError("streaming tasks are trained exactly once")
            if len({tuple(t.classes) for t in self.tasks}) > 1:
                raise ConfigError("streaming tasks must share one class set")
        else:
            raise ConfigError(f"unknown protocol {self.protocol!r}")

    def __len__(self):
        return len(self.tasks)

    @property
    def n_classes(self) -> int:
        return self.tasks[0].train.n_classes


# ------------------------------------------------------------------ odors


@dataclass(frozen=True)
class OdorConfig:
    n_dims: int = 50
    n_classes: int = 10
    noise_sigma: float = 0.5
    train_per_class: int = 5000
    test_per_class: int = 1000
    seed: int = 0

    def __post_init__(self):
        if min(self.n_dims, self.n_classes, self.train_per_class, self.test_per_class) < 1:
            raise ConfigError("odor dimensions and counts must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be nonnegative")


def gen_odor_dataset(cfg: OdorConfig):
    """Gaussian clouds around uniform prototypes.

    Returns ``(train, test, prototypes)``; train and test use independent
    noise draws around the same prototypes.
    """
    proto_ss, train_ss, test_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    prototypes = np.random.default_rng(proto_ss).uniform(0.0, 1.0, size=(cfg.n_classes, cfg.n_dims))

    def draw(ss, per_class):
        rng = np.random.default_rng(ss)
        labels = np.repeat(np.arange(cfg.n_classes), per_class)
        noise = rng.normal(0.0, cfg.noise_sigma, size=(labels.size, cfg.n_dims))
        return Dataset(prototypes[labels] + noise, labels, cfg.n_classes)

    return draw(train_ss, cfg.train_per_class), draw(test_ss, cfg.test_per_class), prototypes


def split_cil(train: Dataset, test: Dataset | None, classes_per_task: int, seed=None,
              batch_size: int = 64, epochs: int = 1) -> TaskStream:
    """Partition the label space into consecutive tasks.

    With ``seed=None`` classes keep their natural order; otherwise the class
    order is shuffled once with that seed.
    """
    n = train.n_classes
    if classes_per_task < 1 or n % classes_per_task:
        raise ConfigError(f"{n} classes cannot be split into tasks of {classes_per_task}")
    order = np.arange(n)
    if seed is not None:
        order = np.random.default_rng(seed).permutation(n)
    tasks = []
    for start in range(0, n, classes_per_task):
        classes = tuple(int(c) for c in order[start : start + classes_per_task])
        tasks.append(Task(train.restrict(classes), None if test is None else test.restrict(classes), classes))
    return TaskStream(tasks, CIL, batch_size, epochs, {"class_order": [int(c) for c in order]})


# ------------------------------------------------------- permuted streams


@dataclass(frozen=True, eq=False)
class PermutationSpec:
    mode: str
    permutations: list
    seed: int

    def __post_init__(self):
        if self.mode not in ("input", "label"):
            raise ConfigError(f"permutation mode must be 'input' or 'label', got {self.mode!r}")


def make_permutation_spec(mode: str, n_tasks: int, size: int, seed: int, identity_first: bool = True):
    """One seeded bijection of ``range(size)`` per task."""
    perms = []
    for t in range(n_tasks):
        if t == 0 and identity_first:
            perms.append(np.arange(size))
        else:
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t,)))
            perms.append(rng.permutation(size))
    return PermutationSpec(mode, perms, seed)


def apply_permutation(ds: Dataset, mode: str, perm) -> Dataset:
    perm = np.asarray(perm)
    if mode == "input":
        return Dataset(ds.features[:, perm], ds.labels, ds.n_classes)
    return Dataset(ds.features, perm[ds.labels], ds.n_classes)


def invert_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def make_permuted_stream(base: Dataset, spec: PermutationSpec, n_tasks: int, samples_per_task: int,
                         batch_size: int = 100) -> TaskStream:
    """Streaming sequence of permuted copies of ``base``.

    Each task draws its own quota from ``base`` (without replacement when
    the pool is large enough) and applies its permutation.
    """
    if len(spec.permutations) < n_tasks:
        raise ConfigError("permutation spec has fewer permutations than tasks")
    size = base.n_dims if spec.mode == "input" else base.n_classes
    tasks = []
    classes = tuple(range(base.n_classes))
    for t in range(n_tasks):
        perm = np.asarray(spec.permutations[t])
        if perm.size != size:
            raise ShapeError(f"permutation {t} has size {perm.size}, expected {size}")
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1_000_000 + t,)))
        replace = len(base) < samples_per_task
        index = rng.choice(len(base), size=samples_per_task, replace=replace)
        tasks.append(Task(apply_permutation(base.subset(index), spec.mode, perm), None, classes))
    return TaskStream(tasks, STREAMING, batch_size, 1, {"mode": spec.mode, "seed": spec.seed})


# ------------------------------------------------------------- imbalance


@dataclass(frozen=True)
class ImbalanceSpec:
    gamma: float
    order: str = "normal"
    n_max: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 1:
            raise ConfigError("imbalance ratio gamma must be at least 1")
        if self.order not in ("normal", "reverse", "random"):
            raise ConfigError(f"imbalance order must be normal, reverse or random, got {self.order!r}")


def imbalance_sizes(n_classes: int, gamma: float, n_max: int) -> list:
    """Descending class sizes ``round(n_max * gamma^(-(k-1)/(C-1)))``."""
    if n_classes == 1:
        return [n_max]
    return [int(round(n_max * gamma ** (-k / (n_classes - 1)))) for k in range(n_classes)]


def apply_imbalance(ds: Dataset, spec: ImbalanceSpec, class_order=None) -> Dataset:
    """Subsample classes to an exponential size profile.

    ``class_order`` is the order in which classes are learned (default
    ``0..C-1``). ``normal`` gives the first-learned class the most samples,
    ``reverse`` the fewest, ``random`` shuffles the sizes with ``spec.seed``.
    """
    order = list(range(ds.n_classes)) if class_order is None else [int(c) for c in class_order]
    sizes = imbalance_sizes(len(order), spec.gamma, spec.n_max)
    if spec.order == "reverse":
        sizes = sizes[::-1]
    elif spec.order == "random":
        sizes = list(np.random.default_rng(spec.seed).permutation(sizes))
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(7,)))
    keep = []
    for cls, n_k in zip(order, sizes):
        pool = np.flatnonzero(ds.labels == cls)
        if pool.size < n_k:
            raise DataError(f"class {cls} has {pool.size} samples, {n_k} required")
        keep.append(np.sort(rng.choice(pool, size=n_k, replace=False)))
    return ds.subset(np.sort(np.concatenate(keep)))


# ------------------------------------------------------------ file codecs


def atomic_write_bytes(path, payload: bytes):
    """Write to a temporary file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_flyf(ds: Dataset) -> bytes:
    n, d = ds.features.shape
    header = _FLYF_HEADER.pack(FLYF_MAGIC, FLYF_VERSION, n, d, ds.n_classes)
    feats = np.ascontiguousarray(ds.features, dtype="<f4").tobytes()
    labels = np.ascontiguousarray(ds.labels, dtype="<u4").tobytes()
    return header + feats + labels


def decode_flyf(buf: bytes) -> Dataset:
    if len(buf) < _FLYF_HEADER.size:
        raise FormatError("FLYF header truncated", len(buf))
    magic, version, n, d, n_classes = _FLYF_HEADER.unpack_from(buf, 0)
    if magic != FLYF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FLYF_MAGIC!r}", 0)
    if version != FLYF_VERSION:
        raise FormatError(f"unsupported FLYF version {version}", 4)
    offset = _FLYF_HEADER.size
    need = offset + 4 * n * d + 4 * n
    if len(buf) < need:
        raise FormatError(f"FLYF payload truncated: {len(buf)} bytes, {need} expected", len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after FLYF payload", need)
    feats = np.frombuffer(buf, dtype="<f4", count=n * d, offset=offset).reshape(n, d).astype(np.float32)
    offset += 4 * n * d
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=offset).astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} >= n_classes {n_classes}", offset + 4 * int(bad[0]))
    return Dataset(feats, labels, int(n_classes))


def write_feature_file(path, ds: Dataset):
    atomic_write_bytes(path, encode_flyf(ds))


def load_feature_file(path) -> Dataset:
    with open(path, "rb") as fh:
        return decode_flyf(fh.read())


def _read_maybe_gzip(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path) -> Dataset:
    """Read an MNIST-style IDX image/label pair (optionally gzipped).

    Pixels are scaled to [0, 1] and flattened row-major.
    """
    img = _read_maybe_gzip(images_path)
    lab = _read_maybe_gzip(labels_path)
    if len(img) < 16:
        raise FormatError("IDX image header truncated", len(img))
    magic, n, rows, cols = struct.unpack_from(">IIII", img, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"bad IDX image magic 0x{magic:08x}", 0)
    if len(img) < 16 + n * rows * cols:
        raise FormatError("IDX image payload truncated", len(img))
    if len(lab) < 8:
        raise FormatError("IDX label header truncated", len(lab))
    lmagic, ln = struct.unpack_from(">II", lab, 0)
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"bad IDX label magic 0x{lmagic:08x}", 0)
    if ln != n:
        raise FormatError(f"image count {n} does not match label count {ln}", 4)
    if len(lab) < 8 + n:
        raise FormatError("IDX label payload truncated", len(lab))
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    feats = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    n_classes = max(10, int(labels.max()) + 1) if n else 10
    return Dataset(feats, labels, n_classes)


def encode_idx(ds: Dataset, shape=(28, 28)):
    """Inverse of :func:`load_idx` for data already in [0, 1]; returns (images, labels) bytes."""
    pixels = np.rint(np.asarray(ds.features) * 255.0).astype(np.uint8)
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, len(ds), *shape) + pixels.tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, len(ds)) + ds.labels.astype(np.uint8).tobytes()
    return img, lab
