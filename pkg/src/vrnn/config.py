"""Run configuration as a sectioned key-value document.

A config file has ``[model]``, ``[train]`` and ``[run]`` sections::

    [model]
    family = vrnn
    hidden = 32

    [train]
    lr = 0.003

    [run]
    seed = 0
    eval_samples = 40

Layering, lowest to highest precedence: dataclass defaults, a named preset,
a config file, ``--set section.key=value`` overrides and dedicated flags.
"""

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from importlib import resources

from .errors import ContractError
from .models import ModelConfig
from .optim import TrainConfig

SECTIONS = ("model", "train", "run")


@dataclass
class RunSection:
    seed: int = 0
    eval_samples: int = 40

    def __post_init__(self):
        if self.eval_samples < 1:
            raise ContractError(f"eval_samples must be >= 1, got {self.eval_samples}")
        if self.seed < 0:
            raise ContractError(f"seed must be non-negative, got {self.seed}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunSection = field(default_factory=RunSection)

    @property
    def seed(self):
        return self.run.seed

    def train_config(self):
        """Training settings with the run seed as the single root seed."""
        return replace(self.train, seed=self.run.seed)


_TRAIN_SKIP = {"seed"}


def _parse_value(kind, text, key):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ContractError(f"bad value {text!r} for {key}") from exc


def _section_fields(cls, section):
    return {f.name: f.type for f in fields(cls) if not (section == "train" and f.name in _TRAIN_SKIP)}


_CLASSES = {"model": ModelConfig, "train": TrainConfig, "run": RunSection}


def apply_values(cfg, values):
    """Return a new RunConfig with ``{"section.key": "text"}`` applied."""
    parts = {s: {} for s in SECTIONS}
    for full, text in values.items():
        if "." not in full:
            raise ContractError(f"setting {full!r} must be written as section.key")
        section, key = full.split(".", 1)
        if section not in SECTIONS:
            raise ContractError(f"unknown config section {section!r}")
        known = _section_fields(_CLASSES[section], section)
        if key not in known:
            raise ContractError(f"unknown setting {full!r}")
        parts[section][key] = _parse_value(known[key], text, full)
    try:
        return RunConfig(
            replace(cfg.model, **parts["model"]),
            replace(cfg.train, **parts["train"]),
            replace(cfg.run, **parts["run"]),
        )
    except TypeError as exc:
        raise ContractError(str(exc)) from exc


def parse_config(text, base=None):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ContractError(f"unreadable config: {exc}") from exc
    values = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ContractError(f"unknown config section [{section}]")
        for key, val in cp.items(section):
            values[f"{section}.{key}"] = val
    return apply_values(base or RunConfig(), values)


def read_config(path, base=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg):
    """Serialize every resolved setting; parses back to an equal RunConfig."""
    out = io.StringIO()
    for i, (section, obj) in enumerate((("model", cfg.model), ("train", cfg.train), ("run", cfg.run))):
        if i:
            out.write("\n")
        out.write(f"[{section}]\n")
        for name in _section_fields(type(obj), section):
            out.write(f"{name} = {_fmt(getattr(obj, name))}\n")
    return out.getvalue()


def preset_names():
    return sorted(p.name[:-4] for p in resources.files("vrnn.presets").iterdir() if p.name.endswith(".ini"))


def load_preset(name, base=None):
    path = resources.files("vrnn.presets") / f"{name}.ini"
    if not path.is_file():
        raise ContractError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return parse_config(path.read_text(encoding="utf-8"), base)
