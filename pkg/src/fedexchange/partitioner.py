"""Synthetic dataset generation and i.i.d. / non-i.i.d. client partitioning."""

from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .errors import ConfigurationError, IngestionError, InternalError


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise ConfigurationError("features must be a 2-D matrix")
        if len(self.features) != len(self.labels):
            raise ConfigurationError("features and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigurationError(f"labels must lie in [0, {self.class_count})")
        present = np.bincount(self.labels, minlength=self.class_count)
        if (present == 0).any():
            missing = np.flatnonzero(present == 0).tolist()
            raise ConfigurationError(f"classes {missing} have no samples")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class CovariateTransform:
    """Per-client feature shift ``x -> Q diag(scale) x + noise``.

    ``rotation_seed=None`` means identity. ``angle`` bounds the rotation: the
    matrix is ``expm(angle * A)`` for a seeded skew-symmetric ``A`` of unit
    spectral norm; ``angle=None`` draws a Haar-random orthogonal matrix.
    With ``per_class`` each class gets its own rotation (concept drift).
    """

    rotation_seed: int | None = None
    scale: tuple[float, ...] | None = None
    noise_sigma: float = 0.0
    angle: float | None = None
    noise_seed: int = 0
    per_class: bool = False

    def __post_init__(self) -> None:
        if self.scale is not None and any(not s > 0 for s in self.scale):
            raise ConfigurationError("scale factors must be positive")
        if not self.noise_sigma >= 0:
            raise ConfigurationError("noise_sigma must be >= 0")

    def rotation(self, dim: int, class_index: int | None = None) -> np.ndarray:
        if self.rotation_seed is None:
            return np.eye(dim)
        entropy = [self.rotation_seed] if class_index is None else [self.rotation_seed, class_index]
        rng = np.random.default_rng(entropy)
        g = rng.standard_normal((dim, dim))
        if self.angle is None:
            q, r = np.linalg.qr(g)
            return q * np.sign(np.diag(r))
        skew = g - g.T
        norm = np.linalg.norm(skew, 2)
        if norm == 0.0 or self.angle == 0.0:
            return np.eye(dim)
        return expm(self.angle * skew / norm)


@dataclass(frozen=True, eq=False)
class Shard:
    owner: int
    indices: np.ndarray
    transform: CovariateTransform | None = None

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64)
        if len(np.unique(idx)) != len(idx):
            raise ConfigurationError(f"shard of client {self.owner} has duplicate indices")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class ShardView:
    """Materialised features and labels of a shard (after any covariate shift)."""

    features: np.ndarray
    labels: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.labels)


def generate_dataset(
    class_count: int,
    dim: int,
    samples_per_class: int,
    class_separation: float,
    seed: int,
) -> Dataset:
    """Gaussian mixture: class ``c`` is ``N(mu_c, I)`` with ``|mu_c| = class_separation``."""
    if min(class_count, dim, samples_per_class) < 1:
        raise ConfigurationError("class_count, dim and samples_per_class must be >= 1")
    if not class_separation > 0:
        raise ConfigurationError("class_separation must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((class_count, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= class_separation
    labels = np.repeat(np.arange(class_count), samples_per_class)
    features = means[labels] + rng.standard_normal((len(labels), dim))
    return Dataset(features, labels.astype(np.int64), class_count, seed)


def load_csv(path: str | Path, class_count: int | None = None, seed: int = 0) -> Dataset:
    """Read ``f0..f{d-1},label`` rows. Schema problems raise ``IngestionError`` with the row."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file (row 1)") from None
        header = [h.strip() for h in header]
        if len(header) < 2 or header[-1] != "label":
            raise IngestionError(f"{path}: row 1: last column must be 'label'")
        expected = [f"f{i}" for i in range(len(header) - 1)]
        if header[:-1] != expected:
            raise IngestionError(f"{path}: row 1: feature columns must be named f0..f{len(expected) - 1}")
        rows: list[list[float]] = []
        labels: list[int] = []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(
                    f"{path}: row {row_no}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                rows.append([float(v) for v in row[:-1]])
                label = int(row[-1])
            except ValueError as exc:
                raise IngestionError(f"{path}: row {row_no}: {exc}") from None
            if label < 0 or (class_count is not None and label >= class_count):
                raise IngestionError(f"{path}: row {row_no}: label {label} out of range")
            labels.append(label)
    if not labels:
        raise IngestionError(f"{path}: no data rows")
    count = class_count if class_count is not None else max(labels) + 1
    try:
        return Dataset(np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64), count, seed)
    except ConfigurationError as exc:
        raise IngestionError(f"{path}: {exc}") from None


def split_holdout(
    pool: np.ndarray, fraction: float, seed: int | Sequence[int]
) -> tuple[np.ndarray, np.ndarray]:
    """Split ``pool`` into (held-out, remainder) with ``floor(fraction * len)`` held out."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigurationError(f"holdout fraction must lie in [0, 1), got {fraction}")
    perm = np.random.default_rng(seed).permutation(np.asarray(pool, dtype=np.int64))
    k = math.floor(fraction * len(perm))
    return np.sort(perm[:k]), np.sort(perm[k:])


def _pool(dataset: Dataset, indices: np.ndarray | None) -> np.ndarray:
    pool = np.arange(dataset.n) if indices is None else np.asarray(indices, dtype=np.int64)
    if len(pool) == 0:
        raise ConfigurationError("cannot partition an empty dataset")
    return pool


def _client_list(client_ids: Sequence[int]) -> list[int]:
    ids = list(client_ids)
    if not ids:
        raise ConfigurationError("at least one client is required")
    if len(set(ids)) != len(ids):
        raise ConfigurationError("client ids must be unique")
    return ids


def _split_sizes(n: int, parts: int) -> list[int]:
    base, extra = divmod(n, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def partition_iid(
    dataset: Dataset,
    client_ids: Sequence[int],
    seed: int,
    indices: np.ndarray | None = None,
) -> list[Shard]:
    """Shuffle, then cut equal contiguous slices; the remainder goes to the lowest ids."""
    ids = _client_list(client_ids)
    perm = np.random.default_rng(seed).permutation(_pool(dataset, indices))
    order = sorted(ids)
    sizes = dict(zip(order, _split_sizes(len(perm), len(order))))
    shards, start = [], 0
    for cid in ids:
        shards.append(Shard(cid, perm[start : start + sizes[cid]]))
        start += sizes[cid]
    return shards


def partition_pathological(
    dataset: Dataset,
    client_ids: Sequence[int],
    labels_per_client: int,
    seed: int,
    indices: np.ndarray | None = None,
) -> list[Shard]:
    """Label-sorted shards: every client sees exactly ``min(L, C)`` labels.

    The label-sorted pool is cut into ``clients * L`` single-label slots; slot
    ``s`` holds label ``order[floor(s * C / S)]`` and client position ``j``
    takes slots ``j, j + m, ..., j + (L - 1) m``, which always land on distinct
    labels.
    """
    ids = _client_list(client_ids)
    pool = _pool(dataset, indices)
    c = dataset.class_count
    m, per = len(ids), labels_per_client
    if not 1 <= per <= c:
        raise ConfigurationError(f"labels_per_client must lie in [1, {c}], got {per}")
    n_slots = m * per
    if n_slots < c:
        raise ConfigurationError(
            f"clients x labels_per_client = {n_slots} is below class_count {c}; "
            "some labels would be left unassigned"
        )
    rng = np.random.default_rng(seed)
    label_order = rng.permutation(c)
    slot_label = label_order[(np.arange(n_slots) * c) // n_slots]
    position_of = dict(zip(ids, rng.permutation(m).tolist()))

    slot_indices: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * n_slots
    pool_labels = dataset.labels[pool]
    for label in range(c):
        slots = np.flatnonzero(slot_label == label)
        members = rng.permutation(pool[pool_labels == label])
        if len(members) < len(slots):
            raise ConfigurationError(
                f"label {label} has {len(members)} samples but is spread over {len(slots)} "
                f"shards; at most {len(members)} clients may hold it"
            )
        start = 0
        for slot, size in zip(slots, _split_sizes(len(members), len(slots))):
            slot_indices[slot] = members[start : start + size]
            start += size

    shards = []
    for cid in ids:
        j = position_of[cid]
        parts = [slot_indices[j + t * m] for t in range(per)]
        shards.append(Shard(cid, np.concatenate(parts)))
    return shards


def quantity_skew_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """``floor(ratio_i * n)`` each, remainder to the largest ratio (first on ties)."""
    if any(r < 0 for r in ratios):
        raise ConfigurationError("partition.ratios must be non-negative")
    if abs(math.fsum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"partition.ratios must sum to 1, got {math.fsum(ratios)!r}")
    # Rounding to 9 places keeps e.g. 0.29 * 100 from flooring to 28.
    sizes = [math.floor(round(r * n, 9)) for r in ratios]
    remainder = n - sum(sizes)
    if remainder < 0:
        raise ConfigurationError("partition.ratios over-allocate the dataset")
    largest = max(range(len(ratios)), key=lambda i: (ratios[i], -i))
    sizes[largest] += remainder
    return sizes


def partition_quantity_skew(
    dataset: Dataset,
    client_ids: Sequence[int],
    ratios: Sequence[float],
    seed: int,
    indices: np.ndarray | None = None,
) -> list[Shard]:
    ids = _client_list(client_ids)
    if len(ratios) != len(ids):
        raise ConfigurationError(
            f"partition.ratios has {len(ratios)} entries for {len(ids)} clients"
        )
    # Ties on the largest ratio go to the lowest client id.
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    sizes_sorted = quantity_skew_sizes(
        len(_pool(dataset, indices)), [ratios[i] for i in order]
    )
    sizes = [0] * len(ids)
    for rank, i in enumerate(order):
        sizes[i] = sizes_sorted[rank]
    perm = np.random.default_rng(seed).permutation(_pool(dataset, indices))
    shards, start = [], 0
    for cid, size in zip(ids, sizes):
        shards.append(Shard(cid, perm[start : start + size]))
        start += size
    return shards


def transform_features(
    features: np.ndarray,
    labels: np.ndarray,
    transform: CovariateTransform,
) -> np.ndarray:
    """Apply a covariate transform to a block of rows; returns a new array."""
    dim = features.shape[1]
    if transform.scale is not None and len(transform.scale) != dim:
        raise InternalError(
            f"transform has {len(transform.scale)} scale factors for {dim} features"
        )
    scaled = features * np.asarray(transform.scale) if transform.scale is not None else features.copy()
    if transform.per_class:
        out = np.empty_like(scaled)
        for label in np.unique(labels):
            rows = labels == label
            out[rows] = scaled[rows] @ transform.rotation(dim, int(label)).T
    else:
        out = scaled @ transform.rotation(dim).T
    if transform.noise_sigma > 0:
        rng = np.random.default_rng(transform.noise_seed)
        out += transform.noise_sigma * rng.standard_normal(out.shape)
    return out


def apply_covariate_shift(
    dataset: Dataset, shard: Shard, transform: CovariateTransform
) -> ShardView:
    """Transformed copy of the shard's rows; the dataset itself is never touched."""
    features = dataset.features[shard.indices]
    labels = dataset.labels[shard.indices]
    if features.shape[1] != dataset.dim:
        raise InternalError("feature dimension mismatch")
    return ShardView(transform_features(features, labels, transform), labels.copy(), shard.indices)


def shard_view(dataset: Dataset, shard: Shard) -> ShardView:
    if shard.transform is not None:
        return apply_covariate_shift(dataset, shard, shard.transform)
    return ShardView(
        dataset.features[shard.indices].copy(), dataset.labels[shard.indices].copy(), shard.indices
    )


def make_covariate_transforms(
    client_ids: Sequence[int],
    dim: int,
    seed: int,
    angle: float | None = 0.5,
    scale_range: tuple[float, float] = (0.8, 1.25),
    noise_sigma: float = 0.5,
    per_class: bool = False,
) -> dict[int, CovariateTransform]:
    """One seeded transform per client for the non-pathological regime."""
    lo, hi = scale_range
    if not 0 < lo <= hi:
        raise ConfigurationError(f"scale_range must satisfy 0 < lo <= hi, got {scale_range}")
    transforms = {}
    for cid in client_ids:
        rng = np.random.default_rng([seed, cid])
        scale = tuple(float(s) for s in rng.uniform(lo, hi, dim))
        transforms[cid] = CovariateTransform(
            rotation_seed=int(rng.integers(2**31)),
            scale=scale,
            noise_sigma=noise_sigma,
            angle=angle,
            noise_seed=int(rng.integers(2**31)),
            per_class=per_class,
        )
    return transforms


def label_histogram(labels: np.ndarray, class_count: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=class_count)
