import os

import pytest

from spineage.config import (
    DESK_CHANNELS,
    WORKDIR_ENV,
    ConfigException,
    load_config,
    parse_config,
    preset,
)
from spineage.model import FULL_SCALE, SpineAgeNet


def test_desk_preset():
    config = preset("desk").validate()

    assert config.synth.shape == (96, 192, 8)
    assert config.net.input_shape == (8, 96, 192)
    assert config.net.channels == DESK_CHANNELS
    assert config.hdbscan.epsilon[70] == 0.3


def test_full_scale_preset_keeps_reference_widths():
    config = preset("full_scale").validate()

    assert config.net.input_shape == FULL_SCALE.input_shape == (14, 384, 793)
    assert SpineAgeNet(config.net).parameter_count() == 2950401
    with pytest.raises(ConfigException):
        preset("laptop")


def test_parse_config_coerces_values():
    config = parse_config("""
[pipeline]
seed = 4
region = lumbar
split_fractions = 0.6, 0.2, 0.2

[synth]
shape = 32, 64, 4

[hdbscan]
epsilon = 30:0.5, 80:2

[net]
channels = 2, 2, 2, 2, 2
""")

    assert config.seed == 4
    assert config.region == "lumbar"
    assert config.split_fractions == (0.6, 0.2, 0.2)
    assert config.synth.shape == (32, 64, 4)
    assert config.net.input_shape == (4, 32, 64)
    assert config.net.channels == (2, 2, 2, 2, 2)
    assert config.hdbscan.epsilon == {30: 0.5, 80: 2.0}


@pytest.mark.parametrize("text", [
    "[pipeline]\nregion = spleen\n",
    "[pipeline]\nloss = huber\n",
    "[pipeline]\nsplit_fractions = 0.5, 0.5, 0.5\n",
    "[pipeline]\ndata_fraction = 0\n",
    "[umap]\nn_neighbors = 1\n",
    "[synth]\nshape = 8, 8, 8\n",
    "[net]\ninput_shape = 4, 32, 32\n",
])
def test_invalid_values_fail_validation(text):
    with pytest.raises(ConfigException):
        parse_config(text).with_seed(0).validate()


@pytest.mark.parametrize("text", [
    "[pipeline]\ncolour = red\n",
    "[extras]\nkey = value\n",
    "[pipeline]\nseed = seven\n",
    "[pipeline]\nsynth = 3\n",
    "not an ini file",
])
def test_unknown_keys_and_bad_syntax(text):
    with pytest.raises(ConfigException):
        parse_config(text)


def test_load_config_applies_seed_and_environment(tmp_path, monkeypatch):
    path = tmp_path / "run.ini"
    path.write_text("[pipeline]\nseed = 3\n")
    monkeypatch.setenv(WORKDIR_ENV, str(tmp_path / "out"))

    config = load_config(str(path))
    assert config.workdir == str(tmp_path / "out")
    assert config.synth.seed == config.train.seed == config.stats.seed == 3

    overridden = load_config(str(path), seed=11)
    assert overridden.seed == overridden.umap.seed == overridden.net.seed == 11


def test_shipped_desk_config_matches_preset(monkeypatch):
    monkeypatch.delenv(WORKDIR_ENV, raising=False)
    config = load_config(os.path.join(os.path.dirname(__file__), "..", "config", "desk.ini"))
    desk = preset("desk").with_seed(0)

    for stage in ("generate", "cluster", "split", "train", "evaluate", "biomarkers", "gradcam"):
        assert config.stage_hash(stage) == desk.stage_hash(stage)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigException):
        load_config(str(tmp_path / "absent.ini"))


def test_stage_hash_tracks_only_its_slice():
    config = preset("desk")
    before = {stage: config.stage_hash(stage) for stage in ("generate", "train", "gradcam")}
    config.gradcam_subjects = 3

    assert config.stage_hash("generate") == before["generate"]
    assert config.stage_hash("train") == before["train"]
    assert config.stage_hash("gradcam") != before["gradcam"]
    assert config.stage_hash("train", ["a"]) != config.stage_hash("train", ["b"])


def test_data_fraction_belongs_to_train():
    config = preset("desk")
    split, train = config.stage_hash("split"), config.stage_hash("train")
    config.data_fraction = 0.5

    assert config.stage_hash("split") == split
    assert config.stage_hash("train") != train


if __name__ == "__main__":
    test_desk_preset()
    test_stage_hash_tracks_only_its_slice()
