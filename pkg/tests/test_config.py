import pytest

from mcl import config
from mcl.errors import ConfigurationError


def test_defaults():
    c = config.GlobalConfig()
    t = c.train
    assert (t.batch_size, t.lr_max, t.lr_min, t.tau, t.delta, t.taylor_t) == (32, 1.6e-4, 0.0, 0.5, 1.0, 3)
    assert t.loss_weights == (1.0, 1.0, 1.0) and t.mode == "mutual"
    assert (c.pipeline.tile_size, c.pipeline.crop_size, c.pipeline.image_size) == (500, 224, 224)
    assert c.validate() == []


def test_file_then_override(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("tau = 1.0\nepochs = 3\n")
    assert config.load_config(path).train.tau == 1.0
    cfg = config.load_config(path, {"tau": 0.5})
    assert cfg.train.tau == 0.5 and cfg.train.epochs == 3


def test_rendered_defaults_roundtrip(tmp_path):
    text = config.render_config()
    assert "# published default" in text
    path = tmp_path / "defaults.toml"
    path.write_text(text)
    assert config.load_config(path).hash() == config.GlobalConfig().hash()


@pytest.mark.parametrize("key,value,fragment", [
    ("tau", -1, "tau must be > 0"),
    ("tau", 0, "tau must be > 0"),
    ("delta", -0.1, "delta must be >= 0"),
    ("taylor_t", 0, "taylor_t"),
    ("mode", "dual", "mode must be one of"),
])
def test_range_errors_name_the_constraint(key, value, fragment):
    with pytest.raises(ConfigurationError) as exc:
        config.build_config({key: value})
    assert any(fragment in p for p in exc.value.problems)


def test_all_problems_reported():
    with pytest.raises(ConfigurationError) as exc:
        config.build_config({"tau": -1, "delta": -1, "taylor_t": 0, "bogus": 1})
    assert len(exc.value.problems) == 4
    assert "unknown config key 'bogus'" in exc.value.problems


def test_nested_tables_rejected(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[train]\ntau = 1.0\n")
    with pytest.raises(ConfigurationError):
        config.load_config(path)


def test_list_values_coerced():
    cfg = config.build_config({"loss_weights": "1,0,0", "backbone_channels": [8, 16]})
    assert cfg.train.loss_weights == (1.0, 0.0, 0.0) and cfg.train.backbone_channels == (8, 16)


def test_hash_tracks_values():
    assert config.build_config({"tau": 0.1}).hash() != config.GlobalConfig().hash()
    assert config.build_config({}).hash() == config.GlobalConfig().hash()


def test_mutual_needs_two_samples():
    with pytest.raises(ConfigurationError):
        config.train_config(batch_size=1)
    assert config.train_config(batch_size=1, mode="single-ffpe").batch_size == 1
