import pytest

from fusionlm import config as runcfg
from fusionlm.errors import ConfigError


def test_parse_with_comments():
    text = "# desk run\nfusion = middle  # fused between layers\n\nlstm_units=32\n"
    assert runcfg.parse_kv(text) == {"fusion": "middle", "lstm_units": "32"}
    with pytest.raises(ConfigError):
        runcfg.parse_kv("just words")


def test_resolve_types_and_overrides():
    r = runcfg.resolve({"lstm_units": "32", "linear_dim": "none", "learning_rate": "0.5"},
                       {"lstm_units": 64, "seed": None})
    assert r == {"lstm_units": 64, "linear_dim": None, "learning_rate": 0.5}


def test_unknown_and_bad_values():
    with pytest.raises(ConfigError, match="dropout"):
        runcfg.resolve({"dropout": "0.1"}, {})
    with pytest.raises(ConfigError):
        runcfg.resolve({"lstm_units": "many"}, {})


def test_load_and_dump(tmp_path):
    (tmp_path / "r.cfg").write_text("fusion=late\nseed=3\n")
    cfg = runcfg.load_run_config(tmp_path / "r.cfg", {"seed": 4})
    assert runcfg.dump(cfg) == "fusion=late\nseed=4\n"
    with pytest.raises(ConfigError):
        runcfg.load_run_config(tmp_path / "absent.cfg")
