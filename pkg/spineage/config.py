"""
Pipeline configuration: a dataclass tree read from an INI file.

    [pipeline]
    seed = 7
    n_subjects = 1700
    region = lumbar

    [hdbscan]
    epsilon = 30:1.0, 40:0.7, 50:1.0, 60:0.7, 70:0.3, 80:0.3

Every key must name an existing field; values are coerced to the field's type.
"""
import configparser
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Dict

from .clustering import DEFAULT_EPSILON, MIN_CLUSTER_FRACTION
from .embedding import UmapConfig
from .eval_stats import StatsConfig
from .model import NetConfig, TrainConfig, input_shape_for
from .report_features import Region
from .synthvol import FULL_SCALE_SHAPE, SynthConfig
from .utils import config_digest

logger = logging.getLogger(__name__)

WORKDIR_ENV = "SPINEAGE_WORKDIR"
DEFAULT_WORKDIR = "spineage-run"

REGIONS = ("whole",) + tuple(region.value for region in Region)
LOSS_NAMES = ("mse", "smooth_l1")

# desk-scale network widths; NetConfig defaults to the full reference widths
DESK_CHANNELS = (8, 16, 16, 32, 32)
DESK_TOP_CHANNELS = 16


class ConfigException(Exception):
    pass


@dataclass
class HdbscanSettings:
    min_samples: int = 5
    min_cluster_fraction: float = MIN_CLUSTER_FRACTION
    epsilon: Dict[int, float] = field(default_factory=lambda: dict(DEFAULT_EPSILON))


@dataclass
class PipelineConfig:
    seed: int = 0
    n_subjects: int = 1700
    split_fractions: tuple = (0.8, 0.1, 0.1)
    data_fraction: float = 1.0
    loss: str = "mse"
    region: str = "whole"
    n_rescan: int = 40
    gradcam_subjects: int = 20
    workdir: str = DEFAULT_WORKDIR
    synth: SynthConfig = field(default_factory=SynthConfig)
    umap: UmapConfig = field(default_factory=UmapConfig)
    hdbscan: HdbscanSettings = field(default_factory=HdbscanSettings)
    net: NetConfig = field(default_factory=lambda: NetConfig(channels=DESK_CHANNELS,
                                                             top_channels=DESK_TOP_CHANNELS))
    train: TrainConfig = field(default_factory=TrainConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)

    def validate(self):
        if self.n_subjects < 1:
            raise ConfigException("n_subjects must be positive, got {}".format(self.n_subjects))
        if len(self.split_fractions) != 3 or min(self.split_fractions) <= 0:
            raise ConfigException("split_fractions needs three positive values, got {}".format(
                self.split_fractions))
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigException("split_fractions must sum to 1, got {}".format(sum(self.split_fractions)))
        if not 0 < self.data_fraction <= 1:
            raise ConfigException("data_fraction must be in (0, 1], got {}".format(self.data_fraction))
        if self.loss not in LOSS_NAMES:
            raise ConfigException("Unknown loss {!r}; expected one of {}".format(self.loss, ", ".join(LOSS_NAMES)))
        if self.region not in REGIONS:
            raise ConfigException("Unknown region {!r}; expected one of {}".format(
                self.region, ", ".join(REGIONS)))
        if self.n_rescan < 0 or self.gradcam_subjects < 0:
            raise ConfigException("n_rescan and gradcam_subjects must be nonnegative")
        if self.hdbscan.min_samples < 1 or not 0 < self.hdbscan.min_cluster_fraction < 1:
            raise ConfigException("hdbscan needs min_samples >= 1 and min_cluster_fraction in (0, 1)")
        if any(value < 0 for value in self.hdbscan.epsilon.values()):
            raise ConfigException("hdbscan epsilon values must be nonnegative")
        if self.train.epochs < 1 or self.train.batch_size < 1:
            raise ConfigException("train epochs and batch_size must be positive")
        if self.stats.bootstrap_reps < 0 or not 0 < self.stats.confidence < 1:
            raise ConfigException("stats needs bootstrap_reps >= 0 and confidence in (0, 1)")

        for name, section in (("synth", self.synth), ("umap", self.umap), ("net", self.net)):
            try:
                section.validate()
            except Exception as exc:
                raise ConfigException("[{}] {}".format(name, exc))

        expected = input_shape_for(self.synth.shape)
        if self.net.input_shape != expected:
            raise ConfigException("[net] input_shape {} does not match the [synth] grid {}".format(
                self.net.input_shape, expected))

        return self

    def with_seed(self, seed):
        """Master seed propagated to every seeded component."""
        self.seed = seed
        self.synth.seed = seed
        self.umap.seed = seed
        self.net.seed = seed
        self.train.seed = seed
        self.stats.seed = seed
        return self

    def stage_slice(self, stage):
        """The part of the configuration a stage's outputs depend on."""
        slices = {
            "generate": {"seed": self.seed, "n_subjects": self.n_subjects, "synth": _plain(self.synth)},
            "cluster": {"umap": _plain(self.umap), "hdbscan": _plain(self.hdbscan)},
            "split": {"seed": self.seed, "split_fractions": list(self.split_fractions)},
            "train": {"data_fraction": self.data_fraction, "loss": self.loss, "region": self.region,
                      "net": _plain(self.net), "train": _plain(self.train)},
            "evaluate": {"n_rescan": self.n_rescan, "stats": _plain(self.stats)},
            "biomarkers": {"stats": _plain(self.stats)},
            "gradcam": {"gradcam_subjects": self.gradcam_subjects},
        }
        return slices[stage]

    def stage_hash(self, stage, upstream=()):
        return config_digest([stage, self.stage_slice(stage), list(upstream)])


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {item.name: _plain(getattr(value, item.name)) for item in dataclasses.fields(value)}
    if isinstance(value, dict):
        return {str(key): _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


def _coerce(raw, default, key):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return lowered in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [item.strip() for item in raw.split(",") if item.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(item) for item in items)
        if isinstance(default, dict):
            table = {}
            for item in raw.split(","):
                bracket, value = item.split(":")
                table[int(bracket)] = float(value)
            return table
    except ValueError:
        raise ConfigException("Invalid value {!r} for {}".format(raw, key))
    return raw


def _apply(target, section_name, items):
    names = {item.name for item in dataclasses.fields(target)}
    for key, raw in items:
        if key not in names or dataclasses.is_dataclass(getattr(target, key)):
            raise ConfigException("Unknown key {!r} in [{}]".format(key, section_name))
        setattr(target, key, _coerce(raw, getattr(target, key), "[{}] {}".format(section_name, key)))


SECTIONS = ("pipeline", "synth", "umap", "hdbscan", "net", "train", "stats")


def parse_config(text, source="<string>") -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigException("Cannot parse {}: {}".format(source, exc))

    config = preset("desk")
    for section_name in parser.sections():
        if section_name not in SECTIONS:
            raise ConfigException("Unknown section [{}] in {}".format(section_name, source))
        target = config if section_name == "pipeline" else getattr(config, section_name)
        _apply(target, section_name, parser.items(section_name))

    # the network input follows the synthetic grid unless set explicitly
    if not parser.has_option("net", "input_shape"):
        config.net.input_shape = input_shape_for(config.synth.shape)

    return config


def load_config(path=None, seed=None) -> PipelineConfig:
    """Read, apply the seed override and ``SPINEAGE_WORKDIR``, then validate."""
    if path is None:
        config = preset("desk")
    else:
        try:
            with open(path, 'r') as config_file:
                config = parse_config(config_file.read(), source=path)
        except OSError as exc:
            raise ConfigException("Cannot read config {}: {}".format(path, exc))

    config.with_seed(config.seed if seed is None else seed)
    if os.environ.get(WORKDIR_ENV):
        config.workdir = os.environ[WORKDIR_ENV]

    return config.validate()


def preset(name) -> PipelineConfig:
    if name == "desk":
        return PipelineConfig()
    if name == "full_scale":
        config = PipelineConfig(synth=SynthConfig(shape=FULL_SCALE_SHAPE))
        config.net = NetConfig(input_shape=input_shape_for(FULL_SCALE_SHAPE))
        return config
    raise ConfigException("Unknown preset {!r}".format(name))
