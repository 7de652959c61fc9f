"""Experiment configuration files.

Grammar: INI sections ``[data]``, ``[model]``, ``[train]``, ``[eval]``,
``[run]`` holding ``key = value`` lines; ``#`` and ``;`` start comments.
Every key is optional and falls back to the default in :data:`SCHEMA`.
Unknown sections or keys are rejected. :func:`render` writes the resolved
configuration with every default materialized; feeding that file back in
reproduces the same run.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path

from .inference import TrainConfig
from .model import DEFAULT_EXTRACTOR, ModelSpec, parse_extractor

DATA_DIR_ENV = "CALGP_DATA_DIR"


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is ``section.key`` when known."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _choice(*options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")

    return check


def _at_least(lo):
    def check(v):
        if v < lo:
            raise ValueError(f"must be >= {lo}")

    return check


def _positive(v):
    if not v > 0:
        raise ValueError("must be positive")


def _prob(v):
    if not 0.0 < v <= 1.0:
        raise ValueError("must lie in (0, 1]")


def _learning_rate(v):
    if not 0.0 <= v <= 1.0:
        raise ValueError("must lie in [0, 1]")


def _extractor(v):
    parse_extractor(v)


# section -> key -> (type, default, validator)
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "source": (str, "idx", _choice("idx", "synthetic")),
        "train_images": (str, "mnist/train-images-idx3-ubyte", None),
        "train_labels": (str, "mnist/train-labels-idx1-ubyte", None),
        "test_images": (str, "mnist/t10k-images-idx3-ubyte", None),
        "test_labels": (str, "mnist/t10k-labels-idx1-ubyte", None),
        "ood_images": (str, "", None),
        "ood_labels": (str, "", None),
        "n_train": (int, 10000, _at_least(0)),
        "n_test": (int, 0, _at_least(0)),
        "synthetic_n": (int, 1000, _at_least(1)),
        "synthetic_test_n": (int, 1000, _at_least(1)),
        "synthetic_classes": (int, 2, _at_least(2)),
        "synthetic_dim": (int, 2, _at_least(1)),
        "synthetic_separation": (float, 10.0, _at_least(0.0)),
    },
    "model": {
        "extractor": (str, DEFAULT_EXTRACTOR, _extractor),
        "kernel": (str, "arc", _choice("arc", "rbf")),
        "n_rf": (int, 1024, _at_least(1)),
        "spectral": (str, "explicit", _choice("explicit", "sorf")),
        "depth": (int, 1, _at_least(1)),
        "hidden_width": (int, 64, _at_least(1)),
        "sigma": (float, 1.0, _positive),
        "lengthscale": (float, 1.0, _positive),
        "keep_prob_w": (float, 0.5, _prob),
        "keep_prob_psi": (float, 0.5, _prob),
        "keep_prob_omega": (float, 0.5, _prob),
        "learn_omega": (_bool, False, None),
        "learn_theta": (_bool, False, None),
    },
    "train": {
        "batch_size": (int, 1000, _at_least(1)),
        "learning_rate": (float, 0.001, _learning_rate),
        "epochs": (int, 30, _at_least(0)),
        "n_mc": (int, 1, _at_least(1)),
        "clip_norm": (float, 100.0, _positive),
        "record_wall_time": (_bool, False, None),
    },
    "eval": {
        "samples": (int, 50, _at_least(1)),
        "bins": (int, 10, _at_least(1)),
        "entropy_bins": (int, 30, _at_least(1)),
        "confidence": (str, "midpoint", _choice("midpoint", "mean")),
        "svg": (_bool, True, None),
    },
    "run": {
        "seed": (int, 0, _at_least(0)),
        "out": (str, "runs/default", None),
    },
}


@dataclass
class ExperimentConfig:
    values: dict  # section -> key -> typed value

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def with_overrides(self, **dotted) -> "ExperimentConfig":
        """Copy with ``section__key=value`` overrides, validated like file input."""
        raw = {s: {k: _fmt(v) for k, v in keys.items()} for s, keys in self.values.items()}
        for name, value in dotted.items():
            section, key = name.split("__", 1)
            raw.setdefault(section, {})[key] = _fmt(value)
        return from_mapping(raw)

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(seed=self.seed, **self.values["train"])
        except ValueError as exc:
            raise ConfigError("train", str(exc)) from None

    def model_spec(self, input_shape, num_classes: int) -> ModelSpec:
        m = self.values["model"]
        try:
            return ModelSpec(input_shape=tuple(input_shape), num_classes=num_classes, **m)
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from None

    def data_path(self, key: str) -> Path | None:
        value = self.values["data"][key]
        if not value:
            return None
        p = Path(value)
        if not p.is_absolute():
            base = os.environ.get(DATA_DIR_ENV)
            if base:
                p = Path(base) / p
        return p


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def from_mapping(raw: dict) -> ExperimentConfig:
    values = {}
    for section, keys in raw.items():
        if section not in SCHEMA:
            raise ConfigError(section, f"unknown section [{section}]")
        for key in keys:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
    for section, fields in SCHEMA.items():
        given = raw.get(section, {})
        out = {}
        for key, (typ, default, check) in fields.items():
            if key not in given:
                out[key] = default
                continue
            text = given[key]
            try:
                value = typ(text.strip()) if typ is not str else text.strip()
                if check is not None:
                    check(value)
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}", f"{exc} (got {text!r})") from None
            out[key] = value
        values[section] = out
    if values["model"]["learn_omega"] and values["model"]["spectral"] == "sorf":
        raise ConfigError("model.learn_omega", "learned frequencies require spectral = explicit")
    data = values["data"]
    if data["source"] == "synthetic" and data["synthetic_classes"] > 2 * data["synthetic_dim"]:
        raise ConfigError("data.synthetic_classes", "at most 2 * synthetic_dim classes are supported")
    return ExperimentConfig(values)


def parse_text(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"), strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc).splitlines()[0]) from None
    raw = {s: dict(cp.items(s)) for s in cp.sections()}
    return from_mapping(raw)


def load(path) -> ExperimentConfig:
    return parse_text(Path(path).read_text())


def default() -> ExperimentConfig:
    return from_mapping({})


def render(cfg: ExperimentConfig) -> str:
    lines = []
    for section, fields in SCHEMA.items():
        lines.append(f"[{section}]")
        for key in fields:
            lines.append(f"{key} = {_fmt(cfg.values[section][key])}")
        lines.append("")
    return "\n".join(lines)
