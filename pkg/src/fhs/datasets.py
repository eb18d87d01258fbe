"""Labeled datasets, IDX ingestion, Dirichlet label-skew partitioning and the toy concept shift."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """``features`` is ``[n x input_dim]`` float64; ``labels`` ints in ``[0, n_classes)``.

    ``source`` optionally tags each row with the client it was drawn for.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    source: np.ndarray | None = None

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64, order="C")
        labels = np.array(self.labels, dtype=np.int64)
        if feats.ndim != 2 or labels.shape != (feats.shape[0],):
            raise ValueError(f"features {feats.shape} and labels {labels.shape} disagree")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        feats.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        if self.source is not None:
            src = np.array(self.source, dtype=np.int64)
            src.flags.writeable = False
            object.__setattr__(self, "source", src)

    @property
    def n(self) -> int:
        return int(self.labels.size)

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def take(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        src = None if self.source is None else self.source[idx]
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes, src)

    def where_source(self, client: int) -> "LabeledDataset":
        if self.source is None:
            raise ValueError("dataset carries no source tags")
        return self.take(np.flatnonzero(self.source == client))

    def equals(self, other: "LabeledDataset") -> bool:
        return (self.n_classes == other.n_classes
                and np.array_equal(self.labels, other.labels)
                and self.features.shape == other.features.shape
                and self.features.tobytes() == other.features.tobytes())

    def to_csv(self, path) -> None:
        """Write ``label,f0,f1,...`` rows."""
        header = "label," + ",".join(f"f{j}" for j in range(self.input_dim))
        with open(path, "w") as f:
            f.write(header + "\n")
            for y, row in zip(self.labels, self.features):
                f.write(f"{y}," + ",".join(repr(float(v)) for v in row) + "\n")


def concat_datasets(parts: list[LabeledDataset]) -> LabeledDataset:
    feats = np.concatenate([p.features for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    sources = None
    if all(p.source is not None for p in parts):
        sources = np.concatenate([p.source for p in parts])
    return LabeledDataset(feats, labels, parts[0].n_classes, sources)


@dataclass(eq=False)
class ClientDataset:
    """One client's local data.

    Reads go through :meth:`open`, which records who asked; protocol tests
    use the log to check that only the owner ever touched the rows.
    """

    client_id: int
    data: LabeledDataset = field(repr=False)
    class_histogram: np.ndarray
    origin: dict
    indices: np.ndarray | None = field(default=None, repr=False)
    access_log: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if int(np.sum(self.class_histogram)) != self.data.n:
            raise ValueError("class_histogram must sum to the number of samples")

    @property
    def n(self) -> int:
        return self.data.n

    def open(self, reader: int) -> LabeledDataset:
        self.access_log.append(int(reader))
        return self.data


def make_client(client_id: int, data: LabeledDataset, origin: dict,
                indices=None) -> ClientDataset:
    return ClientDataset(client_id, data, data.class_histogram(), dict(origin),
                         None if indices is None else np.asarray(indices, dtype=np.int64))


# -- partitioning ------------------------------------------------------------


@dataclass(frozen=True)
class PartitionSpec:
    K: int
    alpha: float
    train_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not 0 < self.train_fraction <= 1:
            raise ValueError(f"train_fraction must be in (0, 1], got {self.train_fraction}")


def subsample_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return np.arange(n)
    k = math.ceil(fraction * n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=k, replace=False))


def subsample_fraction(dataset: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Uniform sample without replacement of ``ceil(fraction * n)`` rows, original order kept."""
    idx = subsample_indices(dataset.n, fraction, seed)
    if idx.size == dataset.n:
        return dataset
    return dataset.take(idx)


EMPTY_CLIENT_RETRIES = 10


def _dirichlet_assignment(labels: np.ndarray, n_classes: int, K: int, alpha: float,
                          rng: np.random.Generator) -> list[np.ndarray]:
    parts: list[list[np.ndarray]] = [[] for _ in range(K)]
    for c in range(n_classes):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        members = rng.permutation(members)
        proportions = rng.dirichlet(np.full(K, alpha))
        counts = rng.multinomial(members.size, proportions)
        for k, chunk in enumerate(np.split(members, np.cumsum(counts)[:-1])):
            parts[k].append(chunk)
    return [np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64) for p in parts]


def dirichlet_partition(dataset: LabeledDataset, spec: PartitionSpec) -> list[ClientDataset]:
    """Label-skew split: per class, client shares ~ Dirichlet(alpha * 1_K).

    The dataset is first subsampled to ``spec.train_fraction``.  A draw that
    leaves some client empty is retried with ``seed + 1`` (up to 10 times).
    """
    if dataset.n == 0:
        raise ValueError("cannot partition an empty dataset")
    base = subsample_indices(dataset.n, spec.train_fraction, spec.seed)
    if spec.K > base.size:
        raise ValueError(f"K={spec.K} exceeds the {base.size} available samples")
    hist = dataset.class_histogram()
    if (hist == 0).any():
        raise ValueError(f"classes {np.flatnonzero(hist == 0).tolist()} have no samples")
    sub_labels = dataset.labels[base]
    for attempt in range(EMPTY_CLIENT_RETRIES + 1):
        seed = spec.seed + attempt
        rng = np.random.default_rng([seed, 1])
        parts = _dirichlet_assignment(sub_labels, dataset.n_classes, spec.K, spec.alpha, rng)
        if all(p.size for p in parts):
            break
    else:
        raise ValueError(f"every draw left a client empty after {EMPTY_CLIENT_RETRIES} retries")
    origin = {"alpha": spec.alpha, "seed": seed, "fraction": spec.train_fraction}
    return [make_client(k, dataset.take(base[p]), origin, base[p]) for k, p in enumerate(parts)]


def iid_partition(dataset: LabeledDataset, K: int, seed: int) -> list[ClientDataset]:
    rng = np.random.default_rng(seed)
    parts = np.array_split(rng.permutation(dataset.n), K)
    return [make_client(k, dataset.take(np.sort(p)), {"iid": True, "seed": seed}, np.sort(p))
            for k, p in enumerate(parts)]


def label_entropy(hist) -> float:
    """Shannon entropy (nats) of a class-count histogram."""
    h = np.asarray(hist, dtype=np.float64)
    p = h[h > 0] / h.sum()
    return float(-(p * np.log(p)).sum())


def total_variation(hist_a, hist_b) -> float:
    a = np.asarray(hist_a, dtype=np.float64)
    b = np.asarray(hist_b, dtype=np.float64)
    return 0.5 * float(np.abs(a / a.sum() - b / b.sum()).sum())


# -- toy concept shift -------------------------------------------------------

TOY_RADIUS = 3.0
TOY_STD = 1.0
TOY_CLIENTS = 3


def toy_centers(radius: float = TOY_RADIUS) -> np.ndarray:
    """``[client, class, 2]`` blob centers.

    Client ``c`` puts class 0 at angle ``120*c`` degrees and class 1 opposite
    it, so the union alternates classes around a hexagon.
    """
    centers = np.zeros((TOY_CLIENTS, 2, 2))
    for c in range(TOY_CLIENTS):
        for y in range(2):
            angle = np.deg2rad(120.0 * c + 180.0 * y)
            centers[c, y] = radius * np.array([np.cos(angle), np.sin(angle)])
    return centers


def make_toy_concept_shift(n_per_class: int, seed: int, n_test_per_class: int | None = None,
                           radius: float = TOY_RADIUS, std: float = TOY_STD
                           ) -> tuple[list[ClientDataset], LabeledDataset]:
    """Three 2-class clients over shifted Gaussian blobs, plus a held-out union test set."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    n_test = n_per_class if n_test_per_class is None else n_test_per_class
    centers = toy_centers(radius)
    rng = np.random.default_rng([seed, 5])

    def draw(c: int, count: int) -> LabeledDataset:
        feats = np.concatenate([centers[c, y] + std * rng.standard_normal((count, 2))
                                for y in range(2)])
        labels = np.repeat([0, 1], count)
        return LabeledDataset(feats, labels, 2, np.full(2 * count, c))

    train = [draw(c, n_per_class) for c in range(TOY_CLIENTS)]
    test = concat_datasets([draw(c, n_test) for c in range(TOY_CLIENTS)])
    origin = {"toy": True, "seed": seed, "n_per_class": n_per_class}
    return [make_client(c, d, origin) for c, d in enumerate(train)], test


def make_synthetic_digits(n: int, seed: int, input_dim: int = 64, n_classes: int = 10,
                          modes_per_class: int = 3, noise: float = 1.0,
                          spread: float = 1.0, stream: int = 0) -> LabeledDataset:
    """Balanced stand-in for a 10-class digit set: a Gaussian mixture with several modes per class.

    Mode centers depend only on ``(seed, input_dim, n_classes, modes_per_class, spread)``,
    so train and test draws that share those and differ in ``stream`` come
    from the same distribution.
    """
    center_rng = np.random.default_rng([seed, 11])
    centers = spread * center_rng.standard_normal((n_classes, modes_per_class, input_dim))
    rng = np.random.default_rng([seed, 12, stream, n])
    labels = np.arange(n) % n_classes
    modes = rng.integers(0, modes_per_class, size=n)
    feats = centers[labels, modes] + noise * rng.standard_normal((n, input_dim))
    return LabeledDataset(feats, labels, n_classes)


# -- IDX ---------------------------------------------------------------------


def _open_bytes(path) -> bytes:
    p = Path(path)
    if p.suffix == ".gz":
        with gzip.open(p, "rb") as f:
            return f.read()
    return p.read_bytes()


def _parse_idx(blob: bytes, expected_magic: int, ndims: int, what: str) -> tuple[tuple, bytes]:
    if len(blob) < 4:
        raise IdxFormatError(f"{what}: truncated header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{what}: bad magic 0x{magic:08x}")
    header = 4 + 4 * ndims
    if len(blob) < header:
        raise IdxFormatError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndims}I", blob[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    payload = blob[header:]
    if len(payload) < size:
        raise IdxFormatError(f"{what}: truncated payload ({len(payload)} of {size} bytes)")
    if len(payload) > size:
        raise IdxFormatError(f"{what}: {len(payload) - size} trailing bytes")
    return dims, payload


def load_idx(images_path, labels_path, n_classes: int | None = None) -> LabeledDataset:
    """Read an IDX image/label pair; images flattened and scaled to [0, 1]."""
    dims, pixels = _parse_idx(_open_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    (n_labels,), raw_labels = _parse_idx(_open_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    n, rows, cols = dims
    if n != n_labels:
        raise IdxFormatError(f"count mismatch: {n} images vs {n_labels} labels")
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(n, rows * cols) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if n else 1
    return LabeledDataset(images, labels, n_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write ``[n x rows x cols]`` uint8 images and uint8 labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        f.write(labels.tobytes())
