import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from dmdlab.config import ExperimentConfig, config_from_dict, dump_config, load_config
from dmdlab.errors import ConfigError


def test_hash_stable_under_key_reordering(tmp_path):
    a = tmp_path / "a.yaml"
    b = tmp_path / "b.yaml"
    a.write_text("train:\n  iters: 300\n  batch: 64\nseeds: [1, 2]\nout: x\n")
    b.write_text("out: x\nseeds: [1, 2]\ntrain:\n  batch: 64\n  iters: 300\n")
    assert load_config(a).hash() == load_config(b).hash()


def test_hash_sees_values():
    assert config_from_dict({"seeds": [1]}).hash() != config_from_dict({"seeds": [2]}).hash()


@pytest.mark.parametrize("raw", [{"bogus": 1}, {"train": {"lamda_ida": 0.9}}, {"train": 3}])
def test_unknown_or_malformed_keys_rejected(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


@pytest.mark.parametrize("raw", [{"seeds": []}, {"train": {"lambda_ida": 0.0}}, {"eval": {"every": 0}},
                                 {"net": {"n_cond": 2}}, {"schedule": "vp"}])
def test_invalid_values_are_config_errors(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("train: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_dump_is_sorted_and_round_trips(tmp_path):
    cfg = ExperimentConfig()
    text = dump_config(cfg)
    assert "\r" not in text
    top = [ln.split(":")[0] for ln in text.splitlines() if ln and not ln.startswith(" ") and not ln.startswith("-")]
    assert top == sorted(top)
    p = tmp_path / "c.yaml"
    p.write_text(text)
    assert load_config(p) == cfg and load_config(p).hash() == cfg.hash()


@settings(max_examples=30, deadline=None)
@given(st.floats(0.5, 1.0), st.integers(1, 30), st.floats(0.0, 2.0), st.lists(st.integers(0, 99), min_size=1, max_size=4))
def test_round_trip_property(lam, ttur, isg, seeds):
    cfg = config_from_dict({"train": {"lambda_ida": lam, "ttur_f": ttur, "lambda_isg": isg}, "seeds": seeds})
    back = config_from_dict(yaml.safe_load(dump_config(cfg)))
    assert back == cfg and back.hash() == cfg.hash()
