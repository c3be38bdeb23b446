"""Device capability, channel cost and packet sizing."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from .errors import ConfigurationError, InternalError


class ActionKind(str, enum.Enum):
    SHARE_MODEL = "ShareModel"
    SHARE_PARTIAL_MODEL = "SharePartialModel"
    SHARE_RAW_DATA = "ShareRawData"
    SHARE_SYNTHETIC_DATA = "ShareSyntheticData"

    @property
    def is_model(self) -> bool:
        return self in (ActionKind.SHARE_MODEL, ActionKind.SHARE_PARTIAL_MODEL)

    @property
    def is_data(self) -> bool:
        return not self.is_model

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class DeviceResources:
    """Battery and memory levels in [0, 1] plus the per-round byte budget."""

    power: float
    mem: float
    bandwidth: float

    def __post_init__(self) -> None:
        for name in ("power", "mem"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {value!r}")
        # A zero budget models a device whose link is down: it selects nothing.
        if not self.bandwidth >= 0.0:
            raise ConfigurationError(f"bandwidth must be >= 0, got {self.bandwidth!r}")


@dataclass(frozen=True)
class SizeModel:
    bytes_per_sample: int = 3072
    bytes_per_param: int = 4
    model_compression: float = 1.0
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.bytes_per_sample <= 0 or self.bytes_per_param <= 0:
            raise ConfigurationError("bytes_per_sample and bytes_per_param must be positive")
        if not 0.0 < self.model_compression <= 1.0:
            raise ConfigurationError(
                f"model_compression must lie in (0, 1], got {self.model_compression!r}"
            )
        if not self.alpha > 0.0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha!r}")


@dataclass(frozen=True)
class PayloadDescriptor:
    """What an action carries: a parameter count for model actions, samples for data."""

    param_count: int | None = None
    sample_count: int | None = None


def compute_capacity(resources: DeviceResources) -> float:
    return resources.power * resources.mem


def comm_cost(bandwidth: float, size: float, alpha: float = 1.0) -> float:
    """Channel time, in rounds, to push ``size`` bytes over ``bandwidth`` bytes/round."""
    if not bandwidth > 0:
        raise ConfigurationError(f"bandwidth must be positive, got {bandwidth!r}")
    if size < 0:
        raise ConfigurationError(f"size must be non-negative, got {size!r}")
    return alpha * size / bandwidth


def packet_size(
    kind: ActionKind, payload: PayloadDescriptor, size_model: SizeModel
) -> int:
    """Bytes on the wire for one action.

    Model payloads are ``params * bytes_per_param * compression`` rounded up to
    whole bytes; for a partial model the caller passes the unfrozen count.
    Data payloads are exactly linear in the sample count.
    """
    try:
        kind = ActionKind(kind)
    except ValueError:
        raise InternalError(f"unknown action kind {kind!r}") from None
    if kind.is_model:
        if payload.param_count is None or payload.param_count < 0:
            raise InternalError(f"{kind} needs a non-negative param_count")
        raw = payload.param_count * size_model.bytes_per_param * size_model.model_compression
        return math.ceil(raw)
    if payload.sample_count is None or payload.sample_count < 0:
        raise InternalError(f"{kind} needs a non-negative sample_count")
    return payload.sample_count * size_model.bytes_per_sample
