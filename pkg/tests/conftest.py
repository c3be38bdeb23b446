"""Shared builders for tests that need hand-made client states."""

from __future__ import annotations

import numpy as np
import pytest

from fedexchange.cost_model import DeviceResources
from fedexchange.decision_engine import ActionHistory
from fedexchange.learner import Arch, fit_generator, init_model
from fedexchange.partitioner import Shard, ShardView, label_histogram
from fedexchange.simulator import ClientState, ReceivedData

CLASSES = 4
DIM = 3


def make_client(
    cid: int,
    accuracy: float = 0.5,
    labels: list[int] | None = None,
    power: float = 1.0,
    mem: float = 1.0,
    bandwidth: float = 1e9,
    trusted_peers: set[int] | None = None,
    frozen_fraction: float = 0.0,
    k_degree: int = 1,
) -> ClientState:
    """A client with a tiny shard; features are deterministic in ``cid``."""
    labels = [0, 1, 2, 3] * 5 if labels is None else labels
    y = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(cid)
    x = rng.standard_normal((len(y), DIM))
    idx = np.arange(len(y), dtype=np.int64) + 1000 * cid
    view = ShardView(x, y, idx)
    arch = Arch(DIM, CLASSES)
    model = init_model(arch, pretrain_frozen_fraction=frozen_fraction)
    return ClientState(
        id=cid,
        shard=Shard(cid, idx),
        view=view,
        model=model,
        resources=DeviceResources(power, mem, bandwidth),
        k_degree=k_degree,
        generator=fit_generator(view, CLASSES) if len(y) else None,
        received=ReceivedData(DIM),
        action_history=ActionHistory(),
        label_hist=label_histogram(y, CLASSES),
        trusted_peers=set() if trusted_peers is None else trusted_peers,
        accuracy=accuracy,
        best_accuracy=accuracy,
    )


@pytest.fixture
def client_factory():
    return make_client


# Filled by tests/test_acceptance.py: criterion number -> (passed, detail).
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        )
