"""Datasets, IDX loading and non-IID client partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class InvalidConfig(ValueError):
    pass


class IdxFormatError(ValueError):
    pass


class IdxInconsistency(ValueError):
    pass


class ShardTooSmall(ValueError):
    pass


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MIN_SHARD = 5


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValueError(f"inputs {x.shape} do not match {y.shape[0]} labels")
        if self.classes < 1:
            raise ValueError("classes must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.classes)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    train: Dataset
    test: Dataset
    train_indices: np.ndarray
    test_indices: np.ndarray


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str
    clients: int
    seed: int = 0
    classes_per_client: int = 2
    alpha: float = 0.5

    def __post_init__(self):
        if self.scheme not in ("pathological", "dirichlet"):
            raise InvalidConfig(f"unknown partition scheme {self.scheme!r}")
        if self.clients < 1:
            raise InvalidConfig("clients must be >= 1")
        if self.scheme == "pathological" and self.classes_per_client < 1:
            raise InvalidConfig("classes_per_client must be >= 1")
        if self.scheme == "dirichlet" and not self.alpha > 0:
            raise InvalidConfig("alpha must be > 0")


# --- generation and loading -------------------------------------------------


def gen_synthetic(classes: int, dim: int, per_class: int, separation: float, seed: int) -> Dataset:
    """Unit-variance Gaussian blobs, one per class.

    Class means are mutually orthogonal directions (when ``classes <= dim``,
    random unit vectors otherwise) scaled by ``separation``.
    """
    if classes < 2:
        raise InvalidConfig("classes must be >= 2")
    if per_class < 10:
        raise InvalidConfig("per_class must be >= 10")
    # zero is allowed: it yields identical class-conditional distributions
    if separation < 0:
        raise InvalidConfig("separation must be non-negative")
    rng = np.random.default_rng(seed)
    if classes <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        directions = q[:, :classes].T
    else:
        directions = rng.standard_normal((classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions
    labels = np.repeat(np.arange(classes), per_class)
    inputs = means[labels] + rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(inputs[order], labels[order], classes)


def _read_idx(path: Path, magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    body = raw[header:]
    expected = int(np.prod(dims))
    if len(body) != expected:
        raise IdxFormatError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return dims, body


def load_idx(images_path, labels_path, classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair (MNIST layout) into a Dataset with pixels in [0, 1]."""
    img_dims, img_body = _read_idx(images_path, IDX_IMAGES_MAGIC)
    lab_dims, lab_body = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if img_dims[0] != lab_dims[0]:
        raise IdxInconsistency(f"{img_dims[0]} images but {lab_dims[0]} labels")
    n = img_dims[0]
    pixels = np.frombuffer(img_body, dtype=np.uint8).reshape(n, -1).astype(np.float64) / 255.0
    labels = np.frombuffer(lab_body, dtype=np.uint8).astype(np.int64)
    if classes is None:
        classes = int(labels.max()) + 1 if n else 1
    return Dataset(pixels, labels, classes)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


# --- partitioning -----------------------------------------------------------


def largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` that round ``quotas`` (which sum to total)."""
    quotas = np.asarray(quotas, dtype=np.float64)
    counts = np.floor(quotas).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps ties in index order
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def split_train_test(ds: Dataset, allocation, seed, client_id: int = 0) -> ClientShard:
    """80/20 split of one client's allocation, stratified over labels with >= 5 samples.

    Labels with fewer than five samples are pooled and split at random. The
    test size is round(n / 5) exactly; per-group test counts use largest
    remainder so the stratified total never drifts.
    """
    idx = np.asarray(allocation, dtype=np.int64)
    n = idx.size
    if n < MIN_SHARD:
        raise ShardTooSmall(f"client {client_id}: allocation of {n} samples, need at least {MIN_SHARD}")
    rng = np.random.default_rng(seed)
    labels = ds.labels[idx]
    groups = []
    pooled = []
    for lab in np.unique(labels):
        members = idx[labels == lab]
        if members.size >= MIN_SHARD:
            groups.append(members)
        else:
            pooled.append(members)
    if pooled:
        groups.append(np.concatenate(pooled))
    n_test = (n + 2) // 5
    sizes = np.array([g.size for g in groups])
    test_counts = largest_remainder(sizes / 5.0, n_test)
    train, test = [], []
    for g, k in zip(groups, test_counts):
        g = rng.permutation(g)
        test.append(g[:k])
        train.append(g[k:])
    train_idx = np.sort(np.concatenate(train))
    test_idx = np.sort(np.concatenate(test))
    return ClientShard(client_id, ds.subset(train_idx), ds.subset(test_idx), train_idx, test_idx)


def _shards(ds: Dataset, allocations: list[np.ndarray], seed: int) -> list[ClientShard]:
    return [
        split_train_test(ds, alloc, np.random.SeedSequence([seed, 7, cid]), client_id=cid)
        for cid, alloc in enumerate(allocations)
    ]


def pathological_allocations(ds: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Sort-and-shard label skew: each client receives shards of exactly k distinct classes."""
    C, k = spec.clients, spec.classes_per_client
    present = np.unique(ds.labels)
    n_shards = C * k
    if k > present.size:
        raise InvalidConfig(f"classes_per_client={k} exceeds the {present.size} classes present")
    if n_shards < present.size:
        raise InvalidConfig(f"clients * classes_per_client = {n_shards} < {present.size} classes")
    if n_shards > len(ds):
        raise InvalidConfig(f"{n_shards} shards requested from {len(ds)} samples")
    rng = np.random.default_rng([spec.seed, 11])
    by_class = [np.flatnonzero(ds.labels == c) for c in present]
    sizes = np.array([m.size for m in by_class])
    # every class gets at least one shard, the rest in proportion to class size
    extra = largest_remainder((n_shards - present.size) * sizes / sizes.sum(), n_shards - present.size)
    per_class = 1 + extra
    shards = []
    for members, count in zip(by_class, per_class):
        if count > members.size:
            raise InvalidConfig(f"class with {members.size} samples cannot fill {count} shards")
        shards.extend(np.array_split(rng.permutation(members), count))
    # dealing shard j to slot j mod C sends consecutive shards of one class to
    # distinct clients as long as no class has more than C shards
    owners = rng.permutation(C)
    allocations: list[list[np.ndarray]] = [[] for _ in range(C)]
    for j, shard in enumerate(shards):
        allocations[owners[j % C]].append(shard)
    return [np.sort(np.concatenate(a)) for a in allocations]


def dirichlet_allocations(ds: Dataset, spec: PartitionSpec, min_samples: int = 1) -> list[np.ndarray]:
    """Per-class Dirichlet(alpha) proportions over clients, largest-remainder rounding.

    Clients left with fewer than ``min_samples`` samples are topped up one
    sample at a time from the currently largest client.
    """
    C = spec.clients
    if C * min_samples > len(ds):
        raise InvalidConfig(f"{C} clients x {min_samples} samples exceeds dataset size {len(ds)}")
    rng = np.random.default_rng([spec.seed, 13])
    buckets: list[list[int]] = [[] for _ in range(C)]
    for c in range(ds.classes):
        members = rng.permutation(np.flatnonzero(ds.labels == c))
        if members.size == 0:
            continue
        props = rng.dirichlet(np.full(C, spec.alpha))
        counts = largest_remainder(props * members.size, members.size)
        start = 0
        for cid, cnt in enumerate(counts):
            buckets[cid].extend(members[start : start + cnt].tolist())
            start += cnt
    sizes = np.array([len(b) for b in buckets])
    while sizes.min() < min_samples:
        poor = int(np.argmin(sizes))
        rich = int(np.argmax(sizes))
        buckets[poor].append(buckets[rich].pop())
        sizes[poor] += 1
        sizes[rich] -= 1
    return [np.sort(np.array(b, dtype=np.int64)) for b in buckets]


def partition_pathological(ds: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    if spec.scheme != "pathological":
        raise InvalidConfig(f"expected a pathological spec, got {spec.scheme!r}")
    return _shards(ds, pathological_allocations(ds, spec), spec.seed)


def partition_dirichlet(ds: Dataset, spec: PartitionSpec, min_samples: int = MIN_SHARD) -> list[ClientShard]:
    if spec.scheme != "dirichlet":
        raise InvalidConfig(f"expected a dirichlet spec, got {spec.scheme!r}")
    return _shards(ds, dirichlet_allocations(ds, spec, min_samples), spec.seed)


def partition(ds: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    if spec.scheme == "pathological":
        return partition_pathological(ds, spec)
    return partition_dirichlet(ds, spec)


def label_entropy(labels: np.ndarray, classes: int) -> float:
    """Shannon entropy (nats) of a label histogram."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=classes).astype(float)
    if counts.sum() == 0:
        return 0.0
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
