"""JSON run configurations for the CLI commands.

Every file carries a `schema_version`; unknown keys and missing required
fields raise ConfigError naming the offending field.
"""
import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from app.agents.trainer import TrainConfig
from app.errors import ConfigError

SCHEMA_VERSION = 1


@dataclass
class ModelSection:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 64


@dataclass
class CorpusSection:
    kind: str = 'grammar'
    n_sentences: int = 4000
    seed: int = 0
    path: str = None


@dataclass
class PretrainRunConfig:
    schema_version: int
    seed: int
    steps: int
    batch_size: int = 32
    lr: float = 1e-3
    mask_prob: float = 0.15
    weight_decay: float = 0.01
    reserved_count: int = 64
    log_every: int = 100
    model: ModelSection = field(default_factory=ModelSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)

    def to_dict(self):
        return asdict(self)


@dataclass
class FinetuneRunConfig:
    schema_version: int
    task: str = 'easy'
    k: int = 16
    seeds: list = field(default_factory=lambda: [13, 21, 42, 87, 100])
    template_length: int = 3
    train: dict = field(default_factory=dict)
    grid: dict = None

    def train_config(self):
        try:
            return TrainConfig(**self.train)
        except TypeError as e:
            raise ConfigError(str(e), field='train') from e

    def to_dict(self):
        return asdict(self)


_NESTED = {'model': ModelSection, 'corpus': CorpusSection}
_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def _check_type(name, value, expected):
    if value is None:
        return value
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    ok = {
        int: isinstance(value, int) and not isinstance(value, bool),
        float: isinstance(value, float),
        str: isinstance(value, str),
        bool: isinstance(value, bool),
        list: isinstance(value, list),
        dict: isinstance(value, dict),
    }.get(expected, True)
    if not ok:
        raise ConfigError(f"expected {expected.__name__}, got {type(value).__name__}", field=name)
    return value


def _build(cls, data, prefix=''):
    if not isinstance(data, dict):
        raise ConfigError("expected a JSON object", field=prefix.rstrip('.') or 'config')
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}", field=prefix + unknown[0])
    values = {}
    for name, spec in known.items():
        path = prefix + name
        if name not in data:
            if spec.default is MISSING and spec.default_factory is MISSING:
                raise ConfigError("missing required field", field=path)
            continue
        if name in _NESTED:
            values[name] = _build(_NESTED[name], data[name], path + '.')
        else:
            values[name] = _check_type(path, data[name], spec.type)
    return cls(**values)


def _check_version(data):
    if not isinstance(data, dict):
        raise ConfigError("expected a JSON object", field='config')
    if 'schema_version' not in data:
        raise ConfigError("missing required field", field='schema_version')
    if data['schema_version'] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {data['schema_version']!r}", field='schema_version')


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding='utf-8'))
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} not found", field='config') from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON ({e})", field='config') from e


def parse_pretrain_config(data, seed_override=None):
    """
    Validate a pre-training config.

    Args:
        data (dict): Parsed JSON
        seed_override (int): Seed taken from the environment, replacing the file's seed

    Returns:
        PretrainRunConfig: The config
    """
    _check_version(data)
    config = _build(PretrainRunConfig, data)
    if config.steps < 0:
        raise ConfigError("steps must be >= 0", field='steps')
    if not 0 < config.mask_prob <= 1:
        raise ConfigError("mask_prob must be in (0, 1]", field='mask_prob')
    if config.reserved_count < 1:
        raise ConfigError("reserved_count must be >= 1", field='reserved_count')
    if config.corpus.kind not in ('grammar', 'file'):
        raise ConfigError(f"unknown corpus kind {config.corpus.kind!r}", field='corpus.kind')
    if config.corpus.kind == 'file' and not config.corpus.path:
        raise ConfigError("file corpus needs a path", field='corpus.path')
    if seed_override is not None:
        config.seed = int(seed_override)
    return config


def parse_finetune_config(data):
    """
    Validate a fine-tuning config; the `train` block takes TrainConfig fields.

    Episode seeds come from `seeds` (the fixed protocol set), never from the
    environment.
    """
    _check_version(data)
    config = _build(FinetuneRunConfig, data)
    for name, value in config.train.items():
        if name not in _TRAIN_FIELDS:
            raise ConfigError(f"unknown key {name!r}", field=f'train.{name}')
        config.train[name] = _check_type(f'train.{name}', value, _TRAIN_FIELDS[name])
    config.train_config()
    return config


def load_pretrain_config(path, seed_override=None):
    return parse_pretrain_config(read_json(path), seed_override)


def load_finetune_config(path):
    return parse_finetune_config(read_json(path))


def load_grid(path):
    """A grid file maps TrainConfig field names to candidate lists."""
    data = read_json(path)
    if isinstance(data, dict) and 'grid' in data:
        data = data['grid']
    if not data:
        raise ConfigError("grid is empty", field='grid')
    return data
