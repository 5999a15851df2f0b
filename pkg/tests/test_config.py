import pytest

from mdat.config import ConfigError, RunConfig, dump_config, load_config


def test_defaults_validate():
    cfg = load_config()
    cfg.validate()
    assert cfg.bt.mode == "pivotbt" and cfg.model.dtype == "float32"


def test_file_then_overrides(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\ntotal_updates = 50\nwarmup = 5\n[corpus]\nword_orders = identity,reverse,rotate\n")
    cfg = load_config(p, {"train-total-updates": "70", "bt-mode": "off"})
    assert cfg.train.total_updates == 70 and cfg.train.warmup == 5
    assert cfg.corpus.word_orders == ["identity", "reverse", "rotate"]
    assert cfg.bt.mode == "off"


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown option"):
        load_config(None, {"train-speed": "1"})
    p = tmp_path / "c.ini"
    p.write_text("[nope]\na = 1\n")
    with pytest.raises(ConfigError, match="section"):
        load_config(p)
    p.write_text("[train]\nspeed = 1\n")
    with pytest.raises(ConfigError, match="speed"):
        load_config(p)


def test_bad_values():
    with pytest.raises(ConfigError):
        load_config(None, {"train-total-updates": "many"})
    with pytest.raises(ConfigError):
        load_config(None, {"decode-collapse": "maybe"})
    cfg = load_config(None, {"bt-mode": "sideways"})
    with pytest.raises(ConfigError, match="sideways"):
        cfg.validate()
    with pytest.raises(ConfigError):
        load_config("/nonexistent/file.ini")


def test_dump_roundtrip(tmp_path):
    cfg = load_config(None, {"model-d-model": "32", "corpus-word-orders": "identity,reverse,rotate",
                             "ablate-seeds": "1,2"})
    p = tmp_path / "dump.ini"
    p.write_text(dump_config(cfg))
    back = load_config(p)
    assert back == cfg
    assert back.seeds() == [1, 2]


def test_derived_objects():
    cfg = RunConfig()
    assert cfg.model_config(50, seed=3).seed == 3
    assert cfg.decode_options("ngram-beam").method == "ngram-beam"
    assert cfg.bt_policy("off").mode == "off"
