import pytest

from brimpr_lab.config import ConfigError, RunConfig, dump_config, load_config, parse_config_text, parse_schedule


def test_defaults_roundtrip_through_text(tmp_path):
    cfg = RunConfig()
    path = tmp_path / "run.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_reference_defaults():
    cfg = RunConfig()
    assert (cfg.prompts, cfg.mask_ratio, cfg.tau0, cfg.d0, cfg.lr, cfg.window, cfg.k) == (10, 0.5, 0.2, 5.0, 1e-4, 10, 5.0)
    assert cfg.n_source == 32


def test_file_then_overrides(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nlr = 0.01\nbatch-size = 8  # trailing\ncontinual = yes\n")
    cfg = load_config(path, {"lr": "0.5", "seed": None})
    assert cfg.lr == 0.5 and cfg.batch_size == 8 and cfg.continual is True


def test_env_seed(monkeypatch):
    monkeypatch.setenv("BRIMPR_SEED", "17")
    assert load_config().seed == 17
    assert load_config(overrides={"seed": "3"}).seed == 3


@pytest.mark.parametrize("text", ["lr 0.1", "nope = 1", "lr = fast", "adapt = maybe"])
def test_bad_config_text(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_invalid_values_become_config_errors():
    with pytest.raises(ConfigError):
        load_config(overrides={"separation": "0.1", "noise": "0.5"})
    with pytest.raises(ConfigError):
        load_config(overrides={"dim": "30", "heads": "4"})
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.cfg")


def test_schedule_parsing():
    s = parse_schedule("0@clean,20@gaussian-noise:5")
    assert [(t, c.kind, c.severity) for t, c in s] == [(0, "gaussian-noise", 0), (20, "gaussian-noise", 5)]
    assert parse_schedule("token-dropout:2")[0][1].severity == 2
    for bad in ("0@fog:1", "x@clean", "5@clean,2@clean", "0@gaussian-noise:9"):
        with pytest.raises(ConfigError):
            parse_schedule(bad)
    cfg = load_config(overrides={"schedule_a": "0@clean,3@channel-scale:4"})
    assert cfg.stream_config().spec_at("a", 3).kind == "channel-scale"
