import pytest

from mattekit.config import ConfigError, PipelineConfig, load_config, parse_config


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    assert load_config(p) == PipelineConfig()
    assert load_config(None) == PipelineConfig()


def test_round_trip():
    cfg = parse_config("""
seed: 7
workers: 3
dataset:
  d_max: 9
  crop_sizes: [64, 96]
  train_size: 64
model:
  width_multiplier: 0.125
  stage2:
    kernel: 5
training:
  lr: 0.001
  stage1_steps: 20
loss:
  w_l: 0.25
eval:
  d_list: [2, 5]
paths:
  foregrounds: fg/
""")
    assert cfg.seed == 7 and cfg.dataset.seed == 7 and cfg.training.seed == 7
    assert cfg.stage1.width_multiplier == cfg.stage2.width_multiplier == 0.125
    assert cfg.stage2.kernel == 5
    assert cfg.dataset.crop_sizes == (64, 96)
    assert cfg.eval.d_list == (2, 5)
    assert cfg.paths["foregrounds"] == "fg/"
    assert parse_config(cfg.to_yaml()) == cfg
    assert parse_config(PipelineConfig().to_yaml()) == PipelineConfig()


def test_unknown_key_named_with_line():
    with pytest.raises(ConfigError, match=r"line 3: unknown key 'lerning_rate'"):
        parse_config("seed: 1\ntraining:\n  lerning_rate: 0.1\n")


def test_unknown_top_level_section():
    with pytest.raises(ConfigError, match="'optimiser'"):
        parse_config("optimiser: {}\n")


def test_malformed_yaml_has_line():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("seed: 1\n\tdataset: 2\nworkers: 1\n")


def test_invalid_value_rejected():
    with pytest.raises(ConfigError, match="invalid training"):
        parse_config("training:\n  lr: -1\n")
    with pytest.raises(ConfigError, match="seed"):
        parse_config("seed: -3\n")
    with pytest.raises(ConfigError, match="mapping"):
        parse_config("dataset: 5\n")


def test_with_seed_propagates():
    cfg = PipelineConfig().with_seed(42)
    assert (cfg.seed, cfg.dataset.seed, cfg.training.seed, cfg.eval.seed) == (42,) * 4


def test_file_errors_name_path(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("nope: 1\n")
    with pytest.raises(ConfigError, match="bad.yaml"):
        load_config(p)
