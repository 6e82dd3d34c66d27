"""Experiment configuration: TOML files with dotted keys, flag overrides,
defaults, type checks and the resolved ``ExperimentConfig``."""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .autodiff import SgdConfig
from .channel import ChannelConfig
from .data import AugmentConfig, BlobMixture, Dataset, load_raw
from .errors import ConfigError
from .loss import InfoNceConfig
from .trainer import REGIMES, TrainConfig, get_regime


@dataclass(frozen=True)
class Option:
    kind: str
    default: object


# Desk-scale defaults.  ``None`` marks an optional key.
OPTIONS = {
    "seed": Option("int", 0),
    "seeds": Option("ints", None),
    "regimes": Option("strs", list(REGIMES)),
    "thresholds": Option("floats", [2.2, 2.0, 1.8]),
    "output_dir": Option("str", "runs"),
    "data.source": Option("str", "blobs"),
    "data.classes": Option("int", 20),
    "data.per_class": Option("int", 200),
    "data.test_per_class": Option("int", 50),
    "data.dim": Option("int", 64),
    "data.separation": Option("float", 3.0),
    "data.seed": Option("int", None),
    "data.train_path": Option("str", None),
    "data.test_path": Option("str", None),
    "train.pretrain_epochs": Option("int", 30),
    "train.finetune_epochs": Option("int", 100),
    "train.batch_size": Option("int", 128),
    "train.learning_rate": Option("float", 0.02),
    "train.momentum": Option("float", 0.0),
    "train.pretrain_learning_rate": Option("float", 0.1),
    "train.pretrain_momentum": Option("float", 0.9),
    "train.max_rounds": Option("int", None),
    "model.hidden_dims": Option("ints", [256, 128]),
    "model.feature_dim": Option("int", 32),
    "model.receiver_hidden_dims": Option("ints", [128]),
    "channel.kind": Option("strs", ["AWGN", "Rayleigh"]),
    "channel.snr_db": Option("floats", [10.0]),
    "channel.power": Option("float", 1.0),
    "channel.equalize": Option("bool", True),
    "channel.eq_epsilon": Option("float", 1e-3),
    "infonce.temperature": Option("float", 0.1),
    "infonce.exclude_self": Option("bool", True),
    "augment.jitter_sigma": Option("float", 1.0),
    "augment.mask_prob": Option("float", 0.1),
    "augment.scale_range": Option("floats", [0.8, 1.2]),
}

_NAMES = {"int": "an integer", "float": "a number", "bool": "true or false", "str": "a string"}


def _coerce_scalar(key, kind, value):
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected {_NAMES[kind]}, got {value!r}", key=key)
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected {_NAMES[kind]}, got {value!r}", key=key)
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"expected {_NAMES[kind]}, got {value!r}", key=key)
        return value
    if not isinstance(value, str):
        raise ConfigError(f"expected {_NAMES[kind]}, got {value!r}", key=key)
    return value


def coerce(key: str, value):
    """Type-check ``value`` against the option table; lists accept a bare scalar."""
    if key not in OPTIONS:
        raise ConfigError("unknown key", key=key)
    kind = OPTIONS[key].kind
    if kind[:-1] in _NAMES:
        items = value if isinstance(value, list) else [value]
        return [_coerce_scalar(key, kind[:-1], v) for v in items]
    return _coerce_scalar(key, kind, value)


def flatten(table: dict, prefix: str = "") -> dict:
    flat = {}
    for name, value in table.items():
        key = f"{prefix}{name}"
        if isinstance(value, dict):
            flat.update(flatten(value, key + "."))
        else:
            flat[key] = value
    return flat


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return flatten(tomllib.load(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def resolve(values: dict | None = None) -> dict:
    """Defaults overlaid with ``values``; every key checked, every value typed."""
    resolved = {key: opt.default for key, opt in OPTIONS.items()}
    for key, value in (values or {}).items():
        resolved[key] = coerce(key, value)
    if resolved["seeds"] is None:
        resolved["seeds"] = [resolved["seed"]]
    return resolved


@dataclass(frozen=True)
class DataConfig:
    source: str = "blobs"
    classes: int = 20
    per_class: int = 200
    test_per_class: int = 50
    dim: int = 64
    separation: float = 3.0
    seed: int | None = None
    train_path: str | None = None
    test_path: str | None = None

    def __post_init__(self):
        if self.source not in ("blobs", "file"):
            raise ConfigError("must be 'blobs' or 'file'", key="data.source")
        if self.source == "file" and not self.train_path:
            raise ConfigError("required when data.source = 'file'", key="data.train_path")
        if self.test_per_class < 0:
            raise ConfigError("must be >= 0", key="data.test_per_class")

    def load(self, seed: int) -> tuple[Dataset, Dataset | None]:
        """(train, test) for experiment ``seed``; blobs share one mixture per seed."""
        if self.source == "file":
            train = load_raw(self.train_path)
            return train, (load_raw(self.test_path) if self.test_path else None)
        s = seed if self.seed is None else self.seed
        mixture = BlobMixture(self.classes, self.dim, self.separation, [s, 0])
        train = mixture.sample(self.per_class, [s, 1])
        test = mixture.sample(self.test_per_class, [s, 2]) if self.test_per_class >= 2 else None
        return train, test


@dataclass(frozen=True)
class ExperimentConfig:
    regimes: tuple
    channels: tuple
    thresholds: tuple
    train: TrainConfig
    data: DataConfig
    output_dir: Path
    seeds: tuple
    values: dict

    @property
    def config_hash(self) -> str:
        """sha256 over every resolved value except where the output goes."""
        payload = {k: v for k, v in self.values.items() if k != "output_dir"}
        blob = json.dumps(payload, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def runs(self):
        """(seed, channel) work units; each covers every regime."""
        return list(itertools.product(self.seeds, self.channels))


def build(values: dict) -> ExperimentConfig:
    v = resolve(values)
    regimes = tuple(get_regime(name).name for name in v["regimes"])
    if not regimes:
        raise ConfigError("must list at least one regime", key="regimes")
    if len(set(regimes)) != len(regimes):
        raise ConfigError("duplicate regime", key="regimes")
    if not v["thresholds"]:
        raise ConfigError("must list at least one threshold", key="thresholds")
    if not v["seeds"]:
        raise ConfigError("must list at least one seed", key="seeds")
    if not v["channel.kind"] or not v["channel.snr_db"]:
        raise ConfigError("need at least one channel kind and one SNR", key="channel.kind")
    channels = tuple(
        ChannelConfig(kind, snr, v["channel.power"], v["channel.equalize"], v["channel.eq_epsilon"])
        for kind, snr in itertools.product(v["channel.kind"], v["channel.snr_db"])
    )
    if len(v["augment.scale_range"]) != 2:
        raise ConfigError("expected [lo, hi]", key="augment.scale_range")
    train = TrainConfig(
        pretrain_epochs=v["train.pretrain_epochs"],
        finetune_epochs=v["train.finetune_epochs"],
        batch_size=v["train.batch_size"],
        sgd=_sgd(v, "train.learning_rate", "train.momentum"),
        pretrain_sgd=_sgd(v, "train.pretrain_learning_rate", "train.pretrain_momentum"),
        infonce=InfoNceConfig(v["infonce.temperature"], v["infonce.exclude_self"]),
        channel=channels[0],
        augment=AugmentConfig(v["augment.jitter_sigma"], v["augment.mask_prob"], tuple(v["augment.scale_range"])),
        hidden_dims=tuple(v["model.hidden_dims"]),
        feature_dim=v["model.feature_dim"],
        receiver_hidden_dims=tuple(v["model.receiver_hidden_dims"]),
        max_rounds=v["train.max_rounds"],
        seed=v["seeds"][0],
    )
    data = DataConfig(
        v["data.source"],
        v["data.classes"],
        v["data.per_class"],
        v["data.test_per_class"],
        v["data.dim"],
        v["data.separation"],
        v["data.seed"],
        v["data.train_path"],
        v["data.test_path"],
    )
    if any(math.isinf(t) or math.isnan(t) for t in v["thresholds"]):
        raise ConfigError("must be finite", key="thresholds")
    return ExperimentConfig(
        regimes=regimes,
        channels=channels,
        thresholds=tuple(v["thresholds"]),
        train=train,
        data=data,
        output_dir=Path(v["output_dir"]),
        seeds=tuple(v["seeds"]),
        values=v,
    )


def _sgd(v, lr_key, momentum_key) -> SgdConfig:
    try:
        return SgdConfig(v[lr_key], v[momentum_key])
    except ValueError as exc:
        raise ConfigError(str(exc), key=lr_key if not v[lr_key] > 0 else momentum_key) from exc


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (flat dotted keys)."""
    values = read_config_file(path) if path is not None else {}
    values.update(overrides or {})
    return build(values)


def render_values(values: dict) -> str:
    """The resolved configuration as TOML-compatible ``key = value`` lines."""
    lines = []
    for key in sorted(values):
        value = values[key]
        if value is None:
            continue
        lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines)


def _toml_value(value) -> str:
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return json.dumps(value)
