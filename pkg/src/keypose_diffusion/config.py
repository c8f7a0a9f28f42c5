"""Versioned key-value run configuration.

The file is INI-style with sections; every key has a type and default.
Command-line ``--set section.key=value`` overrides win over the file,
which wins over the defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .exceptions import ConfigError, VersionMismatchError

CONFIG_VERSION = 1


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SCHEMA = {
    "run.task": (str, "bimodal_reach"),
    "run.k_objects": (int, 2),
    "run.n_demos": (int, 500),
    "run.seed": (int, 0),
    "run.dataset": (str, "dataset.dads"),
    "run.output_dir": (str, "run"),
    "model.embed_dim": (int, 120),
    "model.n_heads": (int, 4),
    "model.n_blocks": (int, 4),
    "model.history_len": (int, 3),
    "model.traj_len": (int, 1),
    "model.attention": (str, "relative"),
    "model.update_scene": (_bool, True),
    "model.pos_scale": (float, 0.5),
    "model.fps_fraction": (float, 0.2),
    "schedule.diffusion_steps": (int, 100),
    "schedule.pos_schedule": (str, "scaled_linear"),
    "schedule.rot_schedule": (str, "squared_cosine"),
    "schedule.beta_min": (float, 1e-4),
    "schedule.beta_max": (float, 0.02),
    "schedule.variance": (str, "posterior"),
    "train.objective": (str, "diffusion"),
    "train.steps": (int, 2000),
    "train.batch_size": (int, 64),
    "train.lr": (float, 1e-4),
    "train.weight_decay": (float, 5e-4),
    "train.w1": (float, 30.0),
    "train.w2": (float, 10.0),
    "train.dtype": (str, "float32"),
    "eval.n_episodes": (int, 100),
    "eval.seed": (int, 123),
}

POSITIVE = ("run.k_objects", "run.n_demos", "model.embed_dim", "model.n_heads", "model.n_blocks",
            "model.history_len", "model.traj_len", "model.pos_scale", "model.fps_fraction",
            "schedule.diffusion_steps", "schedule.beta_min", "schedule.beta_max", "train.batch_size",
            "train.lr", "train.w1", "train.w2", "eval.n_episodes")


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v[1] for k, v in SCHEMA.items()})

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, name: str) -> dict:
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(name + ".")}

    def set(self, key: str, raw) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        kind = SCHEMA[key][0]
        try:
            if kind is _bool:
                self.values[key] = raw if isinstance(raw, bool) else _bool(raw)
            else:
                self.values[key] = kind(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for {key}: {exc}") from None

    def validate(self) -> "RunConfig":
        for key in POSITIVE:
            if self.values[key] <= 0:
                raise ConfigError(f"{key} must be positive, got {self.values[key]}")
        for key in ("train.steps", "train.weight_decay"):
            if self.values[key] < 0:
                raise ConfigError(f"{key} must be non-negative")
        if self.values["model.embed_dim"] % 6:
            raise ConfigError("model.embed_dim must be divisible by 6")
        if self.values["train.objective"] not in ("diffusion", "regression"):
            raise ConfigError("train.objective must be 'diffusion' or 'regression'")
        return self

    def to_text(self) -> str:
        lines = ["[meta]", f"config_version = {CONFIG_VERSION}"]
        current = None
        for key, value in self.values.items():
            sec, name = key.split(".", 1)
            if sec != current:
                lines += ["", f"[{sec}]"]
                current = sec
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{name} = {value}")
        return "\n".join(lines) + "\n"

    def estimator_params(self) -> dict:
        m, s, t = self.section("model"), self.section("schedule"), self.section("train")
        params = dict(m)
        params.update(s)
        params.update({k: v for k, v in t.items() if k != "objective"})
        params["random_state"] = self["run.seed"]
        return params


def parse_overrides(items) -> list[tuple[str, str]]:
    out = []
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, value = item.split("=", 1)
        out.append((key.strip(), value.strip()))
    return out


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then the file at ``path`` (if given), then ``overrides``."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {' '.join(str(exc).split())}") from None
        if not parser.has_option("meta", "config_version"):
            raise ConfigError("config is missing meta.config_version")
        try:
            version = int(parser.get("meta", "config_version"))
        except ValueError:
            raise ConfigError("meta.config_version must be an integer") from None
        if version != CONFIG_VERSION:
            raise VersionMismatchError(f"config version {version}, expected {CONFIG_VERSION}")
        for sec in parser.sections():
            if sec == "meta":
                continue
            for name, value in parser.items(sec):
                cfg.set(f"{sec}.{name}", value)
    for key, value in parse_overrides(overrides):
        cfg.set(key, value)
    return cfg.validate()
