"""Softmax learner (optional tanh hidden layer), FedAvg rules and the synthetic generator.

Parameters live in one flat float64 vector laid out as ``W1, b1, W2, b2`` for the
hidden-layer network, or ``W, b`` for plain softmax regression. Weight matrices
are stored row-major with shape ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import json
import math
import struct
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import (
    AggregationError,
    ConfigurationError,
    GeneratorEmptyError,
    InternalError,
    NumericalDivergenceError,
)
from .partitioner import ShardView


@dataclass(frozen=True)
class Arch:
    input_dim: int
    class_count: int
    hidden_dim: int = 0

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.class_count < 1 or self.hidden_dim < 0:
            raise ConfigurationError(f"invalid architecture {self}")

    @property
    def param_count(self) -> int:
        d, c, h = self.input_dim, self.class_count, self.hidden_dim
        return d * c + c if h == 0 else d * h + h + h * c + c

    @property
    def backbone_count(self) -> int:
        """Size of the input->hidden block (zero for a linear model)."""
        return self.input_dim * self.hidden_dim + self.hidden_dim if self.hidden_dim else 0


@dataclass(frozen=True, eq=False)
class Model:
    params: np.ndarray
    arch: Arch
    frozen_mask: np.ndarray

    def __post_init__(self) -> None:
        params = np.array(self.params, dtype=np.float64)
        mask = np.array(self.frozen_mask, dtype=bool)
        n = self.arch.param_count
        if params.shape != (n,) or mask.shape != (n,):
            raise InternalError(
                f"expected {n} params and mask entries, got {params.shape} and {mask.shape}"
            )
        if not np.isfinite(params).all():
            raise NumericalDivergenceError(-1, -1, "non-finite model parameters")
        params.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "frozen_mask", mask)

    @property
    def unfrozen_count(self) -> int:
        return int((~self.frozen_mask).sum())

    def with_params(self, params: np.ndarray) -> Model:
        return Model(params, self.arch, self.frozen_mask)

    def with_mask(self, mask: np.ndarray) -> Model:
        return Model(self.params, self.arch, mask)

    def same_as(self, other: Model) -> bool:
        """Bit-for-bit equality of params, mask and architecture."""
        return (
            self.arch == other.arch
            and self.params.tobytes() == other.params.tobytes()
            and self.frozen_mask.tobytes() == other.frozen_mask.tobytes()
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.1
    l2_penalty: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError("train.epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("train.batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("train.learning_rate must be positive")
        if not self.l2_penalty >= 0:
            raise ConfigurationError("train.l2_penalty must be >= 0")


def _frozen_count(fraction: float, n: int) -> int:
    # Rounding first keeps k/n * n from landing just below k.
    return math.floor(round(fraction * n, 9))


def init_model(
    arch: Arch,
    init: str = "zeros",
    scale: float = 0.1,
    seed: int = 0,
    pretrain_frozen_fraction: float = 0.0,
) -> Model:
    """Fresh model; the first ``floor(fraction * |params|)`` entries are frozen."""
    if not 0.0 <= pretrain_frozen_fraction <= 1.0:
        raise ConfigurationError(
            f"pretrain_frozen_fraction must lie in [0, 1], got {pretrain_frozen_fraction}"
        )
    n = arch.param_count
    if init == "zeros":
        params = np.zeros(n)
    elif init == "seeded_uniform":
        params = np.random.default_rng(seed).uniform(-scale, scale, n)
    else:
        raise ConfigurationError(f"unknown init {init!r}; expected 'zeros' or 'seeded_uniform'")
    mask = np.zeros(n, dtype=bool)
    mask[: _frozen_count(pretrain_frozen_fraction, n)] = True
    return Model(params, arch, mask)


def _unpack(p: np.ndarray, arch: Arch) -> tuple[np.ndarray, ...]:
    d, c, h = arch.input_dim, arch.class_count, arch.hidden_dim
    if h == 0:
        return p[: d * c].reshape(d, c), p[d * c :]
    i = 0
    w1 = p[i : i + d * h].reshape(d, h)
    i += d * h
    b1 = p[i : i + h]
    i += h
    w2 = p[i : i + h * c].reshape(h, c)
    i += h * c
    return w1, b1, w2, p[i:]


def logits(model: Model, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.arch.input_dim:
        raise InternalError(f"expected (*, {model.arch.input_dim}) features, got {x.shape}")
    if model.arch.hidden_dim == 0:
        w, b = _unpack(model.params, model.arch)
        return x @ w + b
    w1, b1, w2, b2 = _unpack(model.params, model.arch)
    return np.tanh(x @ w1 + b1) @ w2 + b2


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _normalised_weights(n: int, sample_weight: np.ndarray | None) -> np.ndarray:
    if sample_weight is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(sample_weight, dtype=np.float64)
    return w / w.sum()


def loss(
    model: Model,
    features: np.ndarray,
    labels: np.ndarray,
    l2: float = 0.0,
    sample_weight: np.ndarray | None = None,
) -> float:
    """Mean cross-entropy plus ``l2/2 * |unfrozen params|^2``."""
    y = np.asarray(labels, dtype=np.int64)
    logp = _log_softmax(logits(model, features))
    w = _normalised_weights(len(y), sample_weight)
    ce = -float(np.dot(w, logp[np.arange(len(y)), y]))
    free = model.params[~model.frozen_mask]
    return ce + 0.5 * l2 * float(np.dot(free, free))


def _loss_and_gradient(
    params: np.ndarray,
    arch: Arch,
    frozen: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    l2: float,
    sample_weight: np.ndarray | None,
) -> tuple[float, np.ndarray]:
    n = len(y)
    w = _normalised_weights(n, sample_weight)
    rows = np.arange(n)
    h = arch.hidden_dim
    if h == 0:
        wt, b = _unpack(params, arch)
        z = x @ wt + b
        hidden = None
    else:
        w1, b1, w2, b2 = _unpack(params, arch)
        hidden = np.tanh(x @ w1 + b1)
        z = hidden @ w2 + b2
    logp = _log_softmax(z)
    ce = -float(np.dot(w, logp[rows, y]))
    delta = np.exp(logp)
    delta[rows, y] -= 1.0
    delta *= w[:, None]

    if h == 0:
        grad = np.concatenate([(x.T @ delta).ravel(), delta.sum(axis=0)])
    else:
        g_w2 = hidden.T @ delta
        g_b2 = delta.sum(axis=0)
        back = (delta @ w2.T) * (1.0 - hidden**2)
        grad = np.concatenate([(x.T @ back).ravel(), back.sum(axis=0), g_w2.ravel(), g_b2])

    reg = 0.0
    if l2:
        free = ~frozen
        grad = grad + l2 * np.where(free, params, 0.0)
        reg = 0.5 * l2 * float(np.dot(params[free], params[free]))
    grad[frozen] = 0.0
    return ce + reg, grad


def gradient(
    model: Model,
    features: np.ndarray,
    labels: np.ndarray,
    l2: float = 0.0,
    sample_weight: np.ndarray | None = None,
) -> np.ndarray:
    """Analytic gradient of :func:`loss`; exactly zero at frozen positions."""
    y = np.asarray(labels, dtype=np.int64)
    if len(y) == 0:
        raise ConfigurationError("gradient needs a non-empty batch")
    x = np.asarray(features, dtype=np.float64)
    return _loss_and_gradient(
        model.params, model.arch, model.frozen_mask, x, y, l2, sample_weight
    )[1]


def train_local(
    model: Model,
    view: ShardView,
    config: TrainConfig,
    sample_weight: np.ndarray | None = None,
) -> Model:
    """Mini-batch SGD; returns a new model and leaves frozen entries bit-identical."""
    if config.epochs == 0:
        return model
    x = np.asarray(view.features, dtype=np.float64)
    y = np.asarray(view.labels, dtype=np.int64)
    if len(y) == 0:
        raise ConfigurationError("cannot train on an empty shard")
    sw = None if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    free = ~model.frozen_mask
    params = model.params.copy()
    for epoch in range(config.epochs):
        order = rng.permutation(len(y))
        for batch, start in enumerate(range(0, len(y), config.batch_size)):
            idx = order[start : start + config.batch_size]
            value, grad = _loss_and_gradient(
                params,
                model.arch,
                model.frozen_mask,
                x[idx],
                y[idx],
                config.l2_penalty,
                None if sw is None else sw[idx],
            )
            if not math.isfinite(value):
                raise NumericalDivergenceError(epoch, batch)
            # Overflow is reported below as a typed error, not a numpy warning.
            with np.errstate(over="ignore", invalid="ignore"):
                params[free] -= config.learning_rate * grad[free]
            if not np.isfinite(params).all():
                raise NumericalDivergenceError(epoch, batch, "non-finite parameters")
    return model.with_params(params)


def predict(model: Model, features: np.ndarray) -> np.ndarray:
    # np.argmax returns the lowest index on ties.
    return np.argmax(logits(model, features), axis=1)


def evaluate(model: Model, features: np.ndarray, labels: np.ndarray) -> float:
    y = np.asarray(labels)
    if len(y) == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, features) == y))


def _pairwise_sum(terms: list[np.ndarray]) -> np.ndarray:
    while len(terms) > 1:
        terms = [
            terms[i] + terms[i + 1] if i + 1 < len(terms) else terms[i]
            for i in range(0, len(terms), 2)
        ]
    return terms[0]


def _check_compatible(models: Sequence[Model], weights: Sequence[float]) -> None:
    if not models:
        raise AggregationError("need at least one model to aggregate")
    if len(weights) != len(models):
        raise AggregationError(f"{len(weights)} weights for {len(models)} models")
    first = models[0]
    for m in models[1:]:
        if m.arch != first.arch:
            raise AggregationError(f"architecture mismatch: {m.arch} vs {first.arch}")
        if m.frozen_mask.tobytes() != first.frozen_mask.tobytes():
            raise AggregationError("frozen masks differ between models")
    for w in weights:
        if not (w > 0 and math.isfinite(w)):
            raise AggregationError(f"aggregation weights must be positive, got {w!r}")


def _weighted_mean(models: Sequence[Model], weights: Sequence[float]) -> np.ndarray:
    # Canonical order makes the result independent of argument order, bit for bit.
    pairs = sorted(
        zip(weights, (m.params for m in models)), key=lambda wp: (wp[0], wp[1].tobytes())
    )
    total = math.fsum(weights)
    ref = pairs[0][1]
    if len(pairs) == 1:
        return ref.copy()
    terms = [(w / total) * (p - ref) for w, p in pairs]
    out = ref + _pairwise_sum(terms)
    stacked = np.stack([p for _, p in pairs])
    return np.clip(out, stacked.min(axis=0), stacked.max(axis=0))


def fedavg(models: Sequence[Model], weights: Sequence[float] | None = None) -> Model:
    """Weighted parameter average ``sum(w_i p_i) / sum(w_i)``."""
    weights = [1.0] * len(models) if weights is None else list(weights)
    _check_compatible(models, weights)
    return models[0].with_params(_weighted_mean(models, weights))


def partial_fedavg(models: Sequence[Model], weights: Sequence[float] | None = None) -> Model:
    """Average unfrozen entries; frozen entries are copied from ``models[0]``."""
    weights = [1.0] * len(models) if weights is None else list(weights)
    _check_compatible(models, weights)
    local = models[0]
    if local.frozen_mask.all():
        return local
    averaged = _weighted_mean(models, weights)
    return local.with_params(np.where(local.frozen_mask, local.params, averaged))


def pretrain_foundation(
    arch: Arch,
    view: ShardView,
    config: TrainConfig,
    scale: float = 0.5,
    seed: int = 0,
    freeze_backbone: bool = True,
) -> Model:
    """Train the whole network on a held-out split, then reset the head.

    The returned model keeps the trained input->hidden block (frozen when
    ``freeze_backbone``) and a zeroed classifier head.
    """
    if arch.hidden_dim == 0:
        raise ConfigurationError("a foundation model needs hidden_dim > 0")
    model = init_model(arch, "seeded_uniform", scale=scale, seed=seed)
    model = train_local(model, view, config)
    params = model.params.copy()
    params[arch.backbone_count :] = 0.0
    mask = np.zeros(arch.param_count, dtype=bool)
    if freeze_backbone:
        mask[: arch.backbone_count] = True
    return Model(params, arch, mask)


@dataclass(frozen=True, eq=False)
class Generator:
    """Class-conditional diagonal Gaussian fitted on one shard."""

    means: np.ndarray
    variances: np.ndarray
    counts: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    @property
    def class_count(self) -> int:
        return len(self.counts)


def fit_generator(
    view: ShardView, class_count: int, variance_floor: float = 1e-3
) -> Generator:
    """Per-class mean and population variance (clamped to ``variance_floor``)."""
    if not variance_floor > 0:
        raise ConfigurationError("variance_floor must be positive")
    x = np.asarray(view.features, dtype=np.float64)
    y = np.asarray(view.labels, dtype=np.int64)
    if len(y) == 0:
        raise ConfigurationError("cannot fit a generator on an empty shard")
    dim = x.shape[1]
    means = np.zeros((class_count, dim))
    variances = np.full((class_count, dim), variance_floor)
    counts = np.bincount(y, minlength=class_count)
    for label in np.flatnonzero(counts):
        rows = x[y == label]
        means[label] = rows.mean(axis=0)
        variances[label] = np.maximum(rows.var(axis=0), variance_floor)
    return Generator(means, variances, counts)


def sample_synthetic(generator: Generator, n: int, seed: int | Sequence[int]) -> ShardView:
    """Draw ``n`` labelled samples; depends on the shard only through means/variances/counts."""
    if not generator.present.any():
        raise GeneratorEmptyError("generator has no present class")
    if n < 0:
        raise ConfigurationError("sample count must be >= 0")
    dim = generator.means.shape[1]
    if n == 0:
        return ShardView(np.empty((0, dim)), np.empty(0, dtype=np.int64))
    rng = np.random.default_rng(seed)
    probs = generator.counts / generator.counts.sum()
    labels = rng.choice(generator.class_count, size=n, p=probs)
    noise = rng.standard_normal((n, dim))
    features = generator.means[labels] + np.sqrt(generator.variances[labels]) * noise
    return ShardView(features, labels.astype(np.int64))


_MAGIC = b"FXMD"
_VERSION = 1


def _rle(mask: np.ndarray) -> list[list[int]]:
    runs: list[list[int]] = []
    for value in mask.tolist():
        if runs and runs[-1][0] == int(value):
            runs[-1][1] += 1
        else:
            runs.append([int(value), 1])
    return runs


def serialize_model(model: Model) -> bytes:
    """``FXMD`` | u16 version | u32 header length | JSON header | little-endian f8 params."""
    header = json.dumps(
        {
            "arch": {
                "input_dim": model.arch.input_dim,
                "class_count": model.arch.class_count,
                "hidden_dim": model.arch.hidden_dim,
            },
            "frozen_mask_rle": _rle(model.frozen_mask),
            "param_count": model.arch.param_count,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    body = model.params.astype("<f8").tobytes()
    return _MAGIC + struct.pack("<HI", _VERSION, len(header)) + header + body


def payload_bytes(blob: bytes) -> int:
    """Length of the parameter section of a serialized model."""
    _, header_len = struct.unpack_from("<HI", blob, len(_MAGIC))
    return len(blob) - len(_MAGIC) - 6 - header_len


def deserialize_model(blob: bytes) -> Model:
    if blob[: len(_MAGIC)] != _MAGIC:
        raise InternalError("not a serialized model (bad magic)")
    version, header_len = struct.unpack_from("<HI", blob, len(_MAGIC))
    if version != _VERSION:
        raise InternalError(f"unsupported model format version {version}")
    start = len(_MAGIC) + 6
    header = json.loads(blob[start : start + header_len])
    arch = Arch(**header["arch"])
    mask = np.concatenate(
        [np.full(length, bool(value)) for value, length in header["frozen_mask_rle"]]
        or [np.zeros(0, dtype=bool)]
    )
    params = np.frombuffer(blob[start + header_len :], dtype="<f8").astype(np.float64)
    if len(params) != header["param_count"]:
        raise InternalError("parameter section length does not match header")
    return Model(params, arch, mask)
