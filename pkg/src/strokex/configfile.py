"""Run configuration: stage hyperparameters, presets and JSON overrides.

Defaults follow the published training schedule (batch 8; 40/10/20 epochs
for the registration, segmentation and extraction stages; learning rate 1e-4
halved every 10/2/5 epochs; lambda 0.5; gamma 5; refinement weight 0.5). The
desk preset shrinks channel widths and epoch counts so the whole pipeline
runs on a laptop-class machine.
"""

import dataclasses
import json
import pathlib
from dataclasses import dataclass, field

from .exceptions import ConfigException

# JSON spellings that differ from the attribute names
_JSON_ALIASES = {"lambda": "lambda_"}


@dataclass
class StageConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-4
    lr_halve_every: int = 10


@dataclass
class ContentConfig(StageConfig):
    epochs: int = 10
    lr: float = 1e-3
    lr_halve_every: int = 5
    embedding_dim: int = 128
    holdout: float = 0.1


@dataclass
class RecognizerConfig(StageConfig):
    epochs: int = 10
    lr: float = 1e-3
    lr_halve_every: int = 5


@dataclass
class SDNetConfig(StageConfig):
    epochs: int = 40
    lr_halve_every: int = 10
    lambda_: float = 0.5
    gamma: float = 5.0
    refine_weight: float = 0.5
    single_field: bool = False


@dataclass
class SegNetConfig(StageConfig):
    epochs: int = 10
    lr_halve_every: int = 2
    max_prior_offset: int = 5
    no_prior: bool = False
    oracle_prior: bool = False


@dataclass
class ExtractNetConfig(StageConfig):
    epochs: int = 20
    lr_halve_every: int = 5
    crop_size: int = 128
    no_prior: bool = False
    no_semantic: bool = False
    oracle_prior: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = False
    desk_scale: bool = False
    channel_scale: float = 1.0
    device: str = "auto"
    data_dir: str = "data"
    content: ContentConfig = field(default_factory=ContentConfig)
    recognizer: RecognizerConfig = field(default_factory=RecognizerConfig)
    sdnet: SDNetConfig = field(default_factory=SDNetConfig)
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    extractnet: ExtractNetConfig = field(default_factory=ExtractNetConfig)

    def to_dict(self):

        return _to_json(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data):
        """Build a config from a (possibly partial) JSON mapping

        Parameters:
        -----------
        data : dict
            nested mapping; unknown keys are rejected

        Raises:
        -------
        ConfigException
            unknown key or wrongly typed value

        Returns:
        --------
        RunConfig
            defaults with the mapping merged on top
        """
        config = cls()
        config.update(data)
        return config

    def update(self, data):

        _merge(self, data, "")
        self.validate()

    def validate(self):

        if self.channel_scale <= 0:
            raise ConfigException("channel_scale must be positive")

        for name in ("content", "recognizer", "sdnet", "segnet", "extractnet"):
            stage = getattr(self, name)
            if stage.epochs < 0 or stage.batch_size < 1:
                raise ConfigException(
                    f"{name}: epochs must be >= 0 and batch_size >= 1"
                )
            if stage.lr <= 0 or stage.lr_halve_every < 1:
                raise ConfigException(
                    f"{name}: lr must be positive and lr_halve_every >= 1"
                )

        if not 0 <= self.segnet.max_prior_offset <= 16:
            raise ConfigException("segnet.max_prior_offset must be in [0, 16]")

    def apply_desk_preset(self):
        """Quarter channel widths and short schedules for desk-scale runs"""

        self.desk_scale = True
        self.channel_scale = 0.25
        self.content.epochs = 5
        self.recognizer.epochs = 5
        self.sdnet.epochs = 8
        self.segnet.epochs = 4
        self.extractnet.epochs = 6


def load_config(path=None, overrides=None, desk=False, base=None):
    """Resolve a run configuration from defaults, a preset and JSON files

    Parameters:
    -----------
    path : str | pathlib.Path (default: None)
        JSON file with overrides
    overrides : dict (default: None)
        additional overrides applied after the file
    desk : bool (default: False)
        apply the desk-scale preset before overrides
    base : dict (default: None)
        stored snapshot to start from instead of the defaults

    Raises:
    -------
    ConfigException
        unreadable file or invalid values

    Returns:
    --------
    RunConfig
        resolved configuration
    """
    config = RunConfig.from_dict(base) if base else RunConfig()
    if desk:
        config.apply_desk_preset()

    if path:
        path = pathlib.Path(path)
        try:
            with open(path) as fp:
                config.update(json.load(fp))
        except FileNotFoundError:
            raise ConfigException(f"config file '{path}' not found") from None
        except json.JSONDecodeError as err:
            raise ConfigException(f"config file '{path}': {err}") from None

    if overrides:
        config.update(overrides)

    config.validate()
    return config


def _merge(target, data, prefix):

    if not isinstance(data, dict):
        raise ConfigException(f"'{prefix or 'config'}' must be a JSON object")

    known = {f.name: f for f in dataclasses.fields(target)}
    for key, value in data.items():
        name = _JSON_ALIASES.get(key, key)
        if name not in known:
            raise ConfigException(f"unknown config key '{prefix}{key}'")

        current = getattr(target, name)
        if dataclasses.is_dataclass(current):
            _merge(current, value, f"{prefix}{key}.")
            continue

        match current:
            case bool():
                if not isinstance(value, bool):
                    raise ConfigException(f"'{prefix}{key}' must be a boolean")
            case int():
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigException(f"'{prefix}{key}' must be an integer")
            case float():
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigException(f"'{prefix}{key}' must be a number")
                value = float(value)
            case str():
                if not isinstance(value, str):
                    raise ConfigException(f"'{prefix}{key}' must be a string")

        setattr(target, name, value)


def _to_json(data):

    if isinstance(data, dict):
        inverse = {v: k for k, v in _JSON_ALIASES.items()}
        return {inverse.get(k, k): _to_json(v) for k, v in data.items()}
    return data
