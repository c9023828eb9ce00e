"""Run configuration: a sectioned key=value file validated strictly.

Unknown sections or keys are rejected (first offender named), and every
cross-field constraint is re-checked by constructing the owning dataclasses
at load time, so a config that parses is a config that runs.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .loss import MarginSpec
from .model import ViTConfig, VARIANT_PRESETS, config_for, EMBED_DIM
from .optim import TrainConfig
from .patches import PatchGridSpec

# section -> key -> (type, default); None default means required
_SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "data": {
        "root": (str, ""),
        "image_size": (int, 112),
        "dataset_name": (str, ""),
        "channels": (int, 1),
    },
    "model": {
        "variant": (str, "T"),
        "patch": (int, None),
        "stride": (int, None),
        "depth": (int, 0),
        "width": (int, 0),
        "heads": (int, 0),
        "embed_dim": (int, EMBED_DIM),
    },
    "loss": {
        "scale": (float, 64.0),
        "margin": (float, 0.35),
        "sample_rate": (float, 0.3),
        "seed": (int, -1),  # -1: derive from the training seed
    },
    "train": {
        "lr": (float, 0.001),
        "weight_decay": (float, 0.1),
        "epochs": (int, 100),
        "warmup_epochs": (int, 10),
        "batch_size": (int, 32),
        "seed": (int, 0),
        "clip_norm": (float, 0.0),
    },
    "eval": {
        "impostor_ratio": (float, 10.0),
        "repeats": (int, 5),
        "seed": (int, 0),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.values[section][key]

    # -- derived objects, each re-validating its own invariants --

    def grid(self) -> PatchGridSpec:
        return PatchGridSpec(self.get("data", "image_size"),
                             self.get("model", "patch"), self.get("model", "stride"))

    def vit_config(self) -> ViTConfig:
        variant = self.get("model", "variant")
        channels = self.get("data", "channels")
        if variant in VARIANT_PRESETS:
            return config_for(variant, self.grid(), channels=channels)
        if variant != "custom":
            raise ConfigError(f"model.variant must be T/S/B/L or custom, got {variant!r}")
        depth, width, heads = (self.get("model", "depth"), self.get("model", "width"),
                               self.get("model", "heads"))
        if not (depth and width and heads):
            raise ConfigError("custom variant requires model.depth, model.width, model.heads")
        return ViTConfig(variant="custom", depth=depth, width=width, heads=heads,
                         grid=self.grid(), embed_dim=self.get("model", "embed_dim"),
                         channels=channels)

    def margin_spec(self) -> MarginSpec:
        return MarginSpec(scale=self.get("loss", "scale"), margin=self.get("loss", "margin"),
                          sample_rate=self.get("loss", "sample_rate"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(base_lr=self.get("train", "lr"),
                           weight_decay=self.get("train", "weight_decay"),
                           epochs=self.get("train", "epochs"),
                           warmup_epochs=self.get("train", "warmup_epochs"),
                           batch_size=self.get("train", "batch_size"),
                           seed=self.get("train", "seed"),
                           clip_norm=self.get("train", "clip_norm"))

    @property
    def loss_seed(self) -> int | None:
        seed = self.get("loss", "seed")
        return None if seed == -1 else seed

    def dataset_name(self, data_root: str) -> str:
        return self.get("data", "dataset_name") or Path(data_root).name

    def validate(self) -> None:
        """Re-run every cross-field constraint; raises ConfigError on failure."""
        self.vit_config()
        self.margin_spec()
        self.train_config()
        if self.get("eval", "repeats") < 1:
            raise ConfigError("eval.repeats must be at least 1")
        if self.get("eval", "impostor_ratio") <= 0:
            raise ConfigError("eval.impostor_ratio must be positive")


def _convert(section: str, key: str, kind: type, raw: str):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{section}.{key}: expected {kind.__name__}, got {raw!r}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
    for section, keys in _SCHEMA.items():
        values[section] = {}
        for key, (kind, default) in keys.items():
            if parser.has_option(section, key):
                values[section][key] = _convert(section, key, kind, parser[section][key])
            elif default is None:
                raise ConfigError(f"{source}: missing required key {section}.{key}")
            else:
                values[section][key] = default
    cfg = RunConfig(values=values)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), source=str(path))


def dump_config(cfg: RunConfig) -> str:
    """Serialize back to the sectioned text form (semantically idempotent)."""
    parser = configparser.ConfigParser(interpolation=None)
    for section, keys in cfg.values.items():
        parser[section] = {key: str(value) for key, value in keys.items()}
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def apply_overrides(cfg: RunConfig, overrides: dict[tuple[str, str], object]) -> RunConfig:
    """Set keyed overrides like ``('model', 'patch') -> 8`` from the CLI."""
    for (section, key), value in overrides.items():
        if value is None:
            continue
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown override {section}.{key}")
        kind, _ = _SCHEMA[section][key]
        cfg.values[section][key] = kind(value)
    cfg.validate()
    return cfg
