import pytest
import yaml

from config import (
    ConfigError,
    FsmConfig,
    RunConfig,
    TcnConfig,
    dump_run_config,
    load_run_config,
    parse_override,
)


def test_defaults_round_trip_through_yaml(tmp_path):
    cfg = RunConfig()
    dump_run_config(cfg, tmp_path / "config.yaml")
    assert load_run_config(tmp_path / "config.yaml") == cfg


def test_dotted_override():
    cfg = load_run_config(None, ["fsm.alpha=0.75", "tcn.dilations=[1, 4]"])
    assert cfg.fsm.alpha == 0.75
    assert cfg.tcn.dilations == (1, 4)
    assert cfg.window == RunConfig().window


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"fsm": {"debounce_k": 5}, "train": {"seed": 9}}))
    cfg = load_run_config(path, ["train.seed=11"])
    assert cfg.fsm.debounce_k == 5
    assert cfg.train.seed == 11


@pytest.mark.parametrize("data", [
    {"fsm": {"alfa": 0.5}},
    {"network": {}},
    {"fsm": 3},
])
def test_unknown_or_malformed_keys_rejected(data):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(data)


@pytest.mark.parametrize("override", ["fsm.nope=1", "fsm=1", "nosuch.key=1", "alpha"])
def test_bad_overrides_rejected(override):
    with pytest.raises(ConfigError):
        load_run_config(None, [override])


def test_override_values_are_validated():
    with pytest.raises(ConfigError):
        load_run_config(None, ["fsm.alpha=0"])
    with pytest.raises(ConfigError):
        load_run_config(None, ["fsm.debounce_k=0"])


def test_parse_override_reads_yaml_scalars():
    assert parse_override("synth.noise=false") == ("synth.noise", False)
    assert parse_override("eval.iou_threshold=0.4") == ("eval.iou_threshold", 0.4)


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_run_config("does/not/exist.yaml")


def test_receptive_field_default_fits_window():
    assert TcnConfig().receptive_field == 7
    assert RunConfig().window.h >= TcnConfig().receptive_field


@pytest.mark.parametrize("kwargs", [
    {"alpha": 0.0}, {"alpha": 1.5}, {"debounce_k": 0},
    {"debounce_k": 5, "aux_reset_frames": 4}, {"debounce_k": 5, "attempt_timeout_frames": 3},
])
def test_fsm_config_invariants(kwargs):
    with pytest.raises(ConfigError):
        FsmConfig(**kwargs)
