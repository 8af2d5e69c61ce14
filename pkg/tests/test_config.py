import json
from dataclasses import replace

import pytest

from turbidspike.config import (
    ConfigError,
    PipelineConfig,
    RunManifest,
    config_digest,
    finish_manifest,
    load_config,
    parse_override,
    start_manifest,
    with_overrides,
)


def test_defaults_are_consistent():
    cfg = PipelineConfig()
    assert cfg.preprocess.time_steps == cfg.train.time_steps == 50
    sae = cfg.sae_config()
    assert sae.input_shape == (2, 64, 64) and sae.latent_dim == 128 and sae.theta_out == 1e6


def test_theta_out_follows_loss():
    cfg = load_config(overrides=["train.loss=\"van_rossum\""])
    assert cfg.sae_config().theta_out == cfg.sae.theta
    assert load_config(overrides=["sae.theta_out=5.0"]).sae_config().theta_out == 5.0


def test_32_bins_drop_a_stage():
    cfg = load_config(overrides=["preprocess.bins=[32, 32]", "scene.detector_shape=[32, 32]"])
    assert cfg.sae_config().channels == (64, 128)


def test_override_parsing():
    assert parse_override("phantom.mu_s=6") == ("phantom", "mu_s", 6)
    assert parse_override("preprocess.filters=[]") == ("preprocess", "filters", [])
    assert parse_override("run.dataset_images=/data/x.idx") == ("run", "dataset_images", "/data/x.idx")
    for bad in ("phantom.mu_s", "nosuch.key=1", "mu_s=1"):
        with pytest.raises(ConfigError):
            parse_override(bad)


def test_overrides_apply_and_coerce():
    cfg = load_config(overrides=["phantom.mu_s=6", "run.seed=3", "preprocess.filters=['stc']"])
    assert cfg.phantom.mu_s == 6.0 and isinstance(cfg.phantom.mu_s, float)
    assert cfg.run.seed == 3 and cfg.preprocess.filters == ("stc",)


def test_digest_stable_under_key_reordering():
    a = load_config(text="[phantom]\nmu_s = 6.0\ng = 0.8\n[run]\nseed = 2\n")
    b = load_config(text="[run]\nseed = 2\n[phantom]\ng = 0.8\nmu_s = 6.0\n")
    assert a.digest() == b.digest()
    assert config_digest({"a": 1, "b": [1, 2]}) == config_digest({"b": [1, 2], "a": 1})
    assert a.digest() != load_config(text="[run]\nseed = 3\n").digest()


def test_dump_reloads_identically():
    cfg = load_config(overrides=["phantom.thickness=2.5", "preprocess.filters=[]", "sae.channels=[8, 16]"])
    assert with_overrides(cfg) == cfg
    assert load_config(text=cfg.dumps()).digest() == cfg.digest()


def test_data_digest_ignores_training():
    cfg = PipelineConfig()
    assert with_overrides(cfg, "train.epochs=3").data_digest() == cfg.data_digest()
    assert with_overrides(cfg, "run.dataset_images='/x'").data_digest() == cfg.data_digest()
    assert with_overrides(cfg, "phantom.mu_s=2").data_digest() != cfg.data_digest()


@pytest.mark.parametrize("text", [
    "[phantom]\nmu_z = 1\n",
    "[nosuch]\na = 1\n",
    "[phantom]\nmu_s = -1\n",
    "[preprocess]\ntime_steps = 20\n",
    "[preprocess]\nbins = [48, 48]\n",
    "[preprocess]\nfilters = ['median']\n",
    "[preprocess]\nroi = [10, 10, 64, 64]\n",
    "[run]\nseed = 'abc'\n",
    "not toml ===",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        load_config(text=text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.toml")


def test_manifest_roundtrip(tmp_path):
    cfg = PipelineConfig()
    (tmp_path / "in.bin").write_bytes(b"abc")
    man = start_manifest("demo", cfg, {"run": 0}, [tmp_path / "in.bin"])
    (tmp_path / "out.bin").write_bytes(b"xyz")
    path = finish_manifest(man, tmp_path, [tmp_path / "out.bin"])
    back = RunManifest.read(path)
    assert back.config_digest == cfg.digest()
    assert back.deterministic_dict() == man.deterministic_dict()
    data = json.loads(path.read_text())
    assert set(data["inputs"].values()) == {"ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"}
    assert RunManifest.read(tmp_path).command == "demo"
