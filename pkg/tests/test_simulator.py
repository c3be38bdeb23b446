from __future__ import annotations

import csv
import io
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedexchange import learner
from fedexchange.config import STRATEGY_KINDS, ConvergenceSpec, DatasetSpec, ScenarioConfig, TopologyConfig
from fedexchange.cost_model import ActionKind, PayloadDescriptor, packet_size
from fedexchange.decision_engine import Action, EngineConfig
from fedexchange.errors import ConfigurationError, SimulationError
from fedexchange.network_graph import ChurnConfig
from fedexchange.simulator import (
    METRICS_COLUMNS,
    RoundRecord,
    _execute,
    detect_convergence,
    init_state,
    run_round,
    run_simulation,
)


def small(**changes) -> ScenarioConfig:
    base = ScenarioConfig(
        clients=4,
        rounds=4,
        seed=1,
        dataset=DatasetSpec(class_count=4, dim=5, samples_per_class=30),
        topology=TopologyConfig(p=0.8, trust_fraction=0.5),
        convergence=ConvergenceSpec(early_stop=False),
    )
    return replace(base, **changes)


# ---- convergence ---------------------------------------------------------------


def test_convergence_examples():
    assert detect_convergence([0.5] * 5, 3, 0.01) == 0
    assert detect_convergence([0.1 * i for i in range(8)], 2, 0.01) is None
    assert detect_convergence([0.2, 0.5, 0.70, 0.705, 0.709, 0.71], 3, 0.01) == 2


def test_convergence_rejects_bad_parameters():
    with pytest.raises(SimulationError):
        detect_convergence([0.1], 0, 0.01)
    with pytest.raises(SimulationError):
        detect_convergence([0.1], 1, 0.0)


@given(st.lists(st.floats(0, 1), max_size=20), st.integers(1, 5), st.floats(1e-4, 0.5))
def test_convergence_matches_brute_force(series, window, eps):
    got = detect_convergence(series, window, eps)
    spans = [
        r for r in range(len(series) - window + 1)
        if max(series[r : r + window]) - min(series[r : r + window]) <= eps
    ]
    assert got == (spans[0] if spans else None)


# ---- whole runs ----------------------------------------------------------------


def test_zero_rounds_rejected():
    with pytest.raises(ConfigurationError):
        small(rounds=0)


def test_single_client_equals_local_training():
    config = small(clients=1)
    log = run_simulation(config)
    assert log.total_bytes == 0 and all(not r.actions for r in log.rows)

    state = init_state(config)
    client = state.clients[0]
    model = client.model
    for r in range(config.rounds):
        seed = int(np.random.SeedSequence([config.seed, 8, config.train.seed, 0, r]).generate_state(1)[0])
        model = learner.train_local(model, client.view, replace(config.train, seed=seed))
        acc = learner.evaluate(model, state.test_view.features, state.test_view.labels)
        assert log.rows[r].accuracy == acc


def test_identical_models_stay_bit_identical_after_fedavg():
    state = init_state(small(clients=2))
    a, b = state.clients[0], state.clients[1]
    b.model = a.model
    b.view = a.view
    action = Action(
        ActionKind.SHARE_MODEL, 1, 0, PayloadDescriptor(param_count=a.model.arch.param_count),
        packet_size(ActionKind.SHARE_MODEL, PayloadDescriptor(param_count=a.model.arch.param_count), state.config.size_model),
    )
    records = {cid: RoundRecord(0, cid, 0.0, 0.0) for cid in (0, 1)}
    _execute(state, {0: [action]}, records)
    assert a.model.params.tobytes() == b.model.params.tobytes()
    assert records[0].bytes_received == records[1].bytes_sent == action.cost


def test_best_accuracy_is_running_max():
    log = run_simulation(small(rounds=6))
    for cid in range(4):
        rows = [r for r in log.rows if r.client_id == cid]
        running = np.maximum.accumulate([r.accuracy for r in rows])
        assert [r.best_accuracy for r in rows] == running.tolist()


def test_model_only_strategy_logs_no_data_actions():
    config = small(rounds=6)
    config = replace(config, engine=replace(config.engine, allowed=STRATEGY_KINDS["s3"]))
    log = run_simulation(config)
    kinds = {a.kind for r in log.rows for a in r.actions}
    assert kinds <= {"ShareModel"}


def test_model_only_on_trusting_clique():
    config = small(topology=TopologyConfig(model="complete", trust_fraction=1.0), rounds=6)
    config = replace(config, engine=replace(config.engine, allowed=STRATEGY_KINDS["s3"]))
    log = run_simulation(config)
    kinds = {a.kind for r in log.rows for a in r.actions}
    assert kinds == {"ShareModel"}


def test_all_kinds_filter_matches_unfiltered_engine():
    config = small()
    explicit = replace(config, engine=replace(config.engine, allowed=frozenset(ActionKind)))
    assert run_simulation(config).to_csv() == run_simulation(explicit).to_csv()


def test_synthetic_only_with_full_trust_under_both_branches():
    topo = TopologyConfig(model="complete", trust_fraction=1.0)
    prose = small(topology=topo)
    prose = replace(prose, engine=replace(prose.engine, allowed=STRATEGY_KINDS["s2"]))
    assert run_simulation(prose).total_bytes == 0
    literal = replace(prose, engine=replace(prose.engine, trust_branch="paper_literal"))
    counts = run_simulation(literal).action_counts
    assert counts.get("ShareSyntheticData", 0) > 0


def test_seed_changes_results():
    a = run_simulation(small(seed=1)).to_csv()
    b = run_simulation(small(seed=2)).to_csv()
    assert a != b


def test_same_seed_is_byte_identical():
    assert run_simulation(small()).to_csv() == run_simulation(small()).to_csv()


def test_csv_schema():
    text = run_simulation(small()).to_csv()
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == METRICS_COLUMNS
    assert len(rows) - 1 == 4 * 4


def test_early_stop_when_everyone_converged():
    config = small(rounds=30, convergence=ConvergenceSpec(window=2, epsilon=1.0, early_stop=True))
    log = run_simulation(config)
    assert log.rounds_run == 2
    assert log.network_convergence_round() == 0


def test_raw_rows_come_only_from_raw_actions():
    config = small(rounds=5, topology=TopologyConfig(model="complete", trust_fraction=1.0))
    state = init_state(config)
    owners = {int(i): c.id for c in state.clients.values() for i in c.view.indices}
    for _ in range(config.rounds):
        run_round(state)
    for client in state.clients.values():
        for src, idx in client.received.raw_from.items():
            assert all(owners[i] == src for i in idx)
        pulled = sum(
            a.cost // config.size_model.bytes_per_sample
            for r in state.metrics.rows if r.client_id == client.id
            for a in r.actions if a.kind == "ShareRawData"
        )
        assert pulled == sum(len(v) for v in client.received.raw_from.values())


# ---- ledger under churn ------------------------------------------------------------


def check_ledger(config: ScenarioConfig) -> None:
    state = init_state(config)
    for _ in range(config.rounds):
        run_round(state)
        rows = state.metrics.round_rows(state.round - 1)
        assert sum(r.bytes_sent for r in rows) == sum(r.bytes_received for r in rows)
        for r in rows:
            assert r.bytes_sent <= state.clients[r.client_id].resources.bandwidth
            assert r.bytes_received <= state.clients[r.client_id].resources.bandwidth
            assert r.bytes_received == sum(a.cost for a in r.actions)


@settings(max_examples=15, deadline=None)
@given(
    st.integers(0, 2**16),
    st.floats(0, 0.3),
    st.floats(0, 0.5),
    st.floats(0, 0.3),
    st.sampled_from(["iid", "pathological"]),
)
def test_bytes_ledger_under_churn(seed, p_leave, p_join, p_rewire, regime):
    config = small(
        seed=seed,
        rounds=5,
        churn=ChurnConfig(p_leave=p_leave, p_join=p_join, p_rewire=p_rewire, p_rejoin=0.3),
        engine=EngineConfig(k_degree=2, share_fraction=0.5),
    )
    config = replace(config, partition=replace(config.partition, regime=regime))
    check_ledger(config)
