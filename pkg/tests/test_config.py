import pytest

from ota.config import (RunConfig, apply_overrides, build_run_config, irf_config,
                        load_run_config, ota_config, vq_configs)
from ota.core import ConfigError


def test_empty_config_is_valid_defaults():
    cfg, record = load_run_config(None)
    assert cfg == RunConfig()
    assert record["config_file"] is None


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="unknown config section"):
        build_run_config({"nonsense": {}})


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        build_run_config({"vq": {"codebook_bits": 8}})


def test_toml_roundtrip(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('output_dir = "runs/x"\n\n[vq]\nn_codes = 64\n\n[seeds]\nmaster = 3\n')
    cfg, record = load_run_config(path)
    assert cfg.vq.n_codes == 64
    assert cfg.seeds.master == 3
    assert cfg.output_dir == "runs/x"
    assert record["digest"] == cfg.digest()


def test_json_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text('{"vq": {"n_codes": 32}}')
    cfg, _ = load_run_config(path)
    assert cfg.vq.n_codes == 32


def test_overrides_beat_file(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[vq]\nn_codes = 64\n")
    cfg, record = load_run_config(path, ["vq.n_codes=128", "output_dir=elsewhere"])
    assert cfg.vq.n_codes == 128
    assert cfg.output_dir == "elsewhere"
    assert record["overrides"] == ["vq.n_codes=128", "output_dir=elsewhere"]


def test_bad_override_syntax_rejected():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no_equals_sign"])


def test_digest_changes_with_any_field():
    base = RunConfig()
    tweaked, _ = load_run_config(None, ["digg.target_count=4999"])
    assert base.digest() != tweaked.digest()


def test_derived_stage_configs():
    cfg = RunConfig()
    icfg = irf_config(cfg)
    assert list(icfg.stage4.lr_grid) == [1e-2, 1e-3, 1e-4, 1e-5]
    assert list(icfg.stage4.wd_grid) == [1e-3, 1e-4, 1e-5]
    assert list(icfg.stage3.lr_grid) == [1.0, 0.1, 0.01, 0.001]
    assert icfg.stage3.optimizer.kind == "sgd_nesterov"
    assert icfg.stage3.optimizer.momentum == 0.9

    vq_cfg, vq_stage = vq_configs(cfg)
    assert vq_cfg.n_codes == 256
    assert vq_stage.optimizer.kind == "adam"

    ocfg = ota_config(cfg)
    assert ocfg.digg_target == 5000
    assert ocfg.mask.scheme == "bottom_half"
    assert ocfg.distill.epochs == 70
