"""Layered run configuration.

Values come from built-in defaults, then a JSON file of flat dotted keys
(``{"train.epochs": 20, "model.embed_dim": 64}``), then environment
variables ``BINSE_<SECTION>__<KEY>`` (``BINSE_TRAIN__EPOCHS=20``), then
command-line flags.  Later layers win.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .dsp import StftConfig
from .losses import LossWeights
from .model import TINY_CONFIG, ModelConfig
from .spatial import HeadModelConfig
from .training import TRAIN_SNR_RANGE, TrainConfig

ENV_PREFIX = "BINSE_"


class ConfigError(ValueError):
    pass


def _data_defaults() -> dict:
    return {
        "count": 200,
        "ratios": [8, 1, 1],
        "snr_min": TRAIN_SNR_RANGE[0],
        "snr_max": TRAIN_SNR_RANGE[1],
        "noise": ["wgn", "ssn"],
        "duration": 2.0,
    }


def _train_defaults() -> dict:
    d = TrainConfig().to_dict()
    del d["loss_weights"]
    return d


@dataclass
class CliConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    head: HeadModelConfig = field(default_factory=HeadModelConfig)
    data: dict = field(default_factory=_data_defaults)
    seed: int = 0
    jobs: int = 1

    @property
    def loss(self) -> LossWeights:
        return self.train.loss_weights

    def flat(self) -> dict:
        """Every setting as a flat dotted-key dict (the form config files use)."""
        out = {}
        for section, values in (("stft", self.stft.to_dict()), ("model", self.model.to_dict()),
                                ("train", _strip_weights(self.train.to_dict())),
                                ("loss", asdict(self.train.loss_weights)),
                                ("head", asdict(self.head)), ("data", dict(self.data))):
            for k, v in values.items():
                out[f"{section}.{k}"] = list(v) if isinstance(v, tuple) else v
        out["seed"] = self.seed
        out["jobs"] = self.jobs
        return out

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.flat(), indent=1, sort_keys=True) + "\n")


def _strip_weights(d: dict) -> dict:
    d = dict(d)
    d.pop("loss_weights", None)
    return d


def _defaults(tiny: bool = False) -> dict:
    model = ModelConfig(**TINY_CONFIG) if tiny else ModelConfig()
    return CliConfig(model=model).flat()


def _coerce(key: str, value, default):
    """Parse ``value`` (from a file, env var or flag) to the type of ``default``."""
    if isinstance(value, str) and not isinstance(default, str):
        text = value.strip()
        if isinstance(default, (list, tuple)) and not text.startswith("["):
            items = [t.strip() for t in text.split(",") if t.strip()]
            value = [_coerce(key, t, default[0]) if default else t for t in items]
        else:
            try:
                value = json.loads(text)
            except json.JSONDecodeError:
                if default is None:
                    return text
                raise ConfigError(f"{key}: cannot parse {value!r}") from None
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def _apply(flat: dict, updates: dict, source: str) -> None:
    for key, value in updates.items():
        if key not in flat:
            raise ConfigError(f"{source}: unknown setting {key!r}")
        flat[key] = _coerce(key, value, flat[key])


def env_overrides(environ=None) -> dict:
    """Settings from ``BINSE_SECTION__KEY`` variables (``BINSE_SEED`` for top-level keys)."""
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        out[key] = value
    return out


def build_config(path=None, overrides: dict | None = None, environ=None, tiny: bool = False) -> CliConfig:
    flat = _defaults(tiny)
    if path is not None:
        try:
            file_values = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        _apply(flat, file_values, str(path))
    _apply(flat, env_overrides(environ), "environment")
    _apply(flat, {k: v for k, v in (overrides or {}).items() if v is not None}, "command line")
    return from_flat(flat)


def from_flat(flat: dict) -> CliConfig:
    sections: dict[str, dict] = {}
    for key, value in flat.items():
        if "." in key:
            section, name = key.split(".", 1)
            sections.setdefault(section, {})[name] = value
    try:
        weights = LossWeights(**sections["loss"])
        return CliConfig(
            stft=StftConfig(**sections["stft"]),
            model=ModelConfig(**sections["model"]),
            train=TrainConfig(**sections["train"], loss_weights=weights),
            head=HeadModelConfig(**sections["head"]),
            data=sections["data"],
            seed=flat["seed"],
            jobs=flat["jobs"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
