from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest
import yaml

from fedexchange.cli import (
    CONFIG_FILE,
    MANIFEST_FILE,
    METRICS_FILE,
    SUMMARY_FILE,
    compare_runs,
    main,
    run_one,
)
from fedexchange.config import config_hash, env_overrides, from_dict, parse_config, serialize_config
from fedexchange.cost_model import ActionKind
from fedexchange.errors import ConfigurationError, SchemaError
from fedexchange.simulator import METRICS_COLUMNS

TINY = {
    "name": "tiny",
    "clients": 3,
    "rounds": 3,
    "seed": 4,
    "dataset": {"class_count": 3, "dim": 4, "samples_per_class": 20},
    "convergence": {"early_stop": False},
}


def write_config(tmp_path: Path, data: dict, name: str = "c.yaml") -> Path:
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


def fake_run(root: Path, name: str, final: float, key: str = "k") -> Path:
    root.mkdir(parents=True)
    (root / METRICS_FILE).write_text(",".join(METRICS_COLUMNS) + "\n")
    summary = {"name": name, "seed": 1, "final_mean_best_accuracy": final, "scenario_key": key}
    (root / SUMMARY_FILE).write_text(json.dumps(summary))
    return root


# ---- config --------------------------------------------------------------------


def test_minimal_config_takes_defaults():
    config = from_dict({"clients": 3, "rounds": 5})
    assert config.clients == 3 and config.rounds == 5
    assert config.dataset.class_count == 10
    assert config.engine.allowed == frozenset(ActionKind)


def test_round_trip_preserves_hash(tmp_path):
    config = from_dict(TINY)
    path = tmp_path / "round.yaml"
    path.write_text(serialize_config(config))
    again = parse_config(path)
    assert again == config
    assert config_hash(again) == config_hash(config)


def test_same_file_parsed_twice_has_same_hash(tmp_path):
    path = write_config(tmp_path, TINY)
    assert config_hash(parse_config(path)) == config_hash(parse_config(path))


def test_env_overrides_are_yaml_scalars(tmp_path):
    env = {
        "FEDEXCHANGE__ROUNDS": "7",
        "FEDEXCHANGE__ENGINE__ALLOWED": "[ShareModel]",
        "FEDEXCHANGE__TRAIN__LEARNING_RATE": "0.05",
        "UNRELATED": "1",
    }
    assert env_overrides(env) == {
        "rounds": 7,
        "engine": {"allowed": ["ShareModel"]},
        "train": {"learning_rate": 0.05},
    }
    config = parse_config(write_config(tmp_path, TINY), environ=env)
    assert config.rounds == 7 and config.dataset.dim == 4
    assert config.engine.allowed == frozenset({ActionKind.SHARE_MODEL})


def test_unknown_keys_warn_or_fail(caplog):
    data = {**TINY, "colour": "blue"}
    assert from_dict(data).clients == 3
    assert "colour" in caplog.text
    with pytest.raises(SchemaError, match="colour"):
        from_dict(data, strict=True)


def test_wrong_type_is_schema_error():
    with pytest.raises(SchemaError, match="clients"):
        from_dict({"clients": "many"})


def test_value_rule_is_configuration_error():
    data = {
        "clients": 2,
        "partition": {"regime": "quantity_skew", "ratios": [0.6, 0.6]},
    }
    with pytest.raises(ConfigurationError, match="partition.ratios") as info:
        from_dict(data)
    assert not isinstance(info.value, SchemaError)


# ---- cli exit codes ------------------------------------------------------------------


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(write_config(tmp_path, TINY)), "--out", str(out)]) == 0
    for name in (METRICS_FILE, SUMMARY_FILE, CONFIG_FILE, MANIFEST_FILE):
        assert (out / name).is_file()
    rows = list(csv.reader((out / METRICS_FILE).open()))
    assert tuple(rows[0]) == METRICS_COLUMNS
    assert len(rows) - 1 == 3 * 3
    summary = json.loads((out / SUMMARY_FILE).read_text())
    manifest = json.loads((out / MANIFEST_FILE).read_text())
    assert summary["config_hash"] == manifest["config_hash"]
    assert parse_config(out / CONFIG_FILE) == from_dict(TINY)
    assert "tiny seed 4" in capsys.readouterr().out


def test_run_is_byte_identical(tmp_path):
    cfg = str(write_config(tmp_path, TINY))
    main(["run", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["run", "--config", cfg, "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / METRICS_FILE).read_bytes() == (tmp_path / "b" / METRICS_FILE).read_bytes()


def test_several_seeds_get_subdirectories(tmp_path):
    cfg = str(write_config(tmp_path, TINY))
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "1", "2"]) == 0
    assert json.loads((tmp_path / "o" / "seed-2" / SUMMARY_FILE).read_text())["seed"] == 2


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_unknown_preset_exits_2(tmp_path):
    assert main(["preset", "bogus", "--out", str(tmp_path)]) == 2


def test_schema_error_exits_3(tmp_path):
    cfg = write_config(tmp_path, {"clients": "three"})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_strict_unknown_key_exits_3(tmp_path):
    cfg = str(write_config(tmp_path, {**TINY, "extra": 1}))
    assert main(["--strict", "run", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_bad_ratios_exit_4_and_name_the_key(tmp_path, capsys):
    data = {**TINY, "partition": {"regime": "quantity_skew", "ratios": [0.4, 0.4, 0.4]}}
    assert main(["run", "--config", str(write_config(tmp_path, data)), "--out", str(tmp_path / "o")]) == 4
    assert "partition.ratios" in capsys.readouterr().err


def test_unwritable_output_exits_5(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = str(write_config(tmp_path, TINY))
    assert main(["run", "--config", cfg, "--out", str(blocker / "sub")]) == 5


# ---- compare -------------------------------------------------------------------


def test_compare_run_against_itself_has_zero_spread(tmp_path):
    run_one(from_dict(TINY), tmp_path / "r")
    report = compare_runs([tmp_path / "r", tmp_path / "r"])
    assert report["spread"] == 0.0


def test_compare_spread_of_two_finals(tmp_path):
    fake_run(tmp_path / "a", "a", 0.80)
    fake_run(tmp_path / "b", "b", 0.71)
    report = compare_runs([tmp_path])
    assert report["spread"] == pytest.approx(0.09)
    assert report["best"] == "a"


def test_compare_cli_writes_json(tmp_path, capsys):
    fake_run(tmp_path / "runs" / "a", "a", 0.80)
    fake_run(tmp_path / "runs" / "b", "b", 0.71)
    out = tmp_path / "report.json"
    assert main(["compare", str(tmp_path / "runs"), "--json", str(out)]) == 0
    assert json.loads(out.read_text())["spread"] == pytest.approx(0.09)
    assert "spread 0.090000" in capsys.readouterr().out


def test_compare_missing_or_mismatched_logs_exit_3(tmp_path):
    assert main(["compare", str(tmp_path / "absent")]) == 3
    fake_run(tmp_path / "x", "x", 0.5, key="one")
    fake_run(tmp_path / "y", "y", 0.6, key="two")
    assert main(["compare", str(tmp_path / "x"), str(tmp_path / "y")]) == 3
    bad = fake_run(tmp_path / "z", "z", 0.5)
    (bad / METRICS_FILE).write_text("round,acc\n")
    assert main(["compare", str(bad)]) == 3
