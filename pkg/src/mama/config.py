"""Run configuration: one INI section per module, flag overrides, echo to disk."""

from __future__ import annotations

import configparser
import copy
import dataclasses
import enum
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data_model import SplitSpec
from .encoders import EncoderConfig
from .errors import ConfigError
from .evaluation import DESK_FINETUNE, FULL_FINETUNE, FinetuneConfig, ProbeConfig
from .losses import LossConfig
from .multiview import AugmentConfig
from .synthetic import SynthConfig
from .trainer import LOSS_PRESETS, PRESETS, PretrainConfig, TrainConfig

SEED_ENV = "MAMA_SEED"


@dataclass
class PipelineOptions:
    strategy: str = "intra-study"
    caption_style: str = "structured"
    mask_prob: float = 0.8
    use_lora: bool = True
    template_path: str | None = None
    checkpoint_every: int = 0


@dataclass
class EvalOptions:
    mode: str = "zeroshot"
    fraction: float = 1.0
    target: str | None = None  # record field to predict; defaults from the class count
    prompt_style: str = "structured"
    fill_meta: bool = True
    temperature_for_probs: float = 0.07


@dataclass
class SimmapOptions:
    sentence_index: int | None = None  # None selects each caption's findings sentence
    format: str = "csv"
    normalize: bool = True
    split: str = "test"
    limit: int = 0


def _coerce(raw: str, default: Any, name: str):
    text = raw.strip()
    if text.lower() in ("none", "") and not isinstance(default, str):
        return None
    try:
        if isinstance(default, bool):
            b = configparser.ConfigParser.BOOLEAN_STATES.get(text.lower())
            if b is None:
                raise ValueError(text)
            return b
        if isinstance(default, enum.Enum):
            return type(default)(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return text


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_SECTIONS = ("synth", "split", "encoder", "train", "loss", "augment", "pretrain", "probe", "finetune",
             "eval", "simmap")
# owned by [train]; the loss switch-on step always follows it
_HIDDEN = {"loss": {"delta"}}
# fields whose default is None need an explicit type for parsing
_NULLABLE = {("synth", "class_prior"): (0.0,), ("synth", "target"): "", ("pretrain", "template_path"): "",
             ("eval", "target"): "", ("simmap", "sentence_index"): 0}


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=lambda: copy.deepcopy(PRESETS["desk"]))
    loss: LossConfig = field(default_factory=lambda: copy.deepcopy(LOSS_PRESETS["desk"]))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    pretrain: PipelineOptions = field(default_factory=PipelineOptions)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    finetune: FinetuneConfig = field(default_factory=lambda: copy.deepcopy(DESK_FINETUNE))
    eval: EvalOptions = field(default_factory=EvalOptions)
    simmap: SimmapOptions = field(default_factory=SimmapOptions)
    preset: str = "desk"

    # --- construction --------------------------------------------------------

    @classmethod
    def from_preset(cls, name: str) -> "RunConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        cfg = cls(preset=name)
        cfg.train = copy.deepcopy(PRESETS[name])
        cfg.loss = copy.deepcopy(LOSS_PRESETS[name])
        cfg.finetune = copy.deepcopy(DESK_FINETUNE if name == "desk" else FULL_FINETUNE)
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}".splitlines()[0]) from None
        preset = parser.get("run", "preset", fallback="desk") if parser.has_section("run") else "desk"
        cfg = cls.from_preset(preset)
        for section in parser.sections():
            if section == "run":
                unknown = set(parser[section]) - {"preset"}
                if unknown:
                    raise ConfigError(f"unknown key [run] {sorted(unknown)[0]}")
                continue
            for key, raw in parser[section].items():
                cfg.set(section, key, raw)
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text)

    def set(self, section: str, key: str, raw: str) -> None:
        """Apply one ``section.key = raw`` override; unknown sections and keys are errors."""
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        obj = getattr(self, section)
        names = {f.name for f in dataclasses.fields(obj)} - _HIDDEN.get(section, set())
        if key not in names:
            raise ConfigError(f"unknown key [{section}] {key}")
        default = getattr(obj, key)
        if (section, key) in _NULLABLE:
            if str(raw).strip().lower() in ("none", ""):
                self._assign(section, key, None)
                return
            default = _NULLABLE[(section, key)]
        self._assign(section, key, _coerce(str(raw), default, f"[{section}] {key}"))

    def _assign(self, section, key, value):
        obj = getattr(self, section)
        if obj.__dataclass_params__.frozen:
            try:
                setattr(self, section, dataclasses.replace(obj, **{key: value}))
            except (ValueError, TypeError) as exc:
                raise ConfigError(str(exc)) from None
        else:
            setattr(obj, key, value)

    def apply_overrides(self, pairs) -> None:
        for item in pairs or ():
            name, sep, raw = item.partition("=")
            section, dot, key = name.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            self.set(section, key.strip(), raw)

    def apply_seed_env(self, environ=None) -> int | None:
        raw = (os.environ if environ is None else environ).get(SEED_ENV)
        if raw is None or raw.strip() == "":
            return None
        try:
            seed = int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
        for section in ("synth", "split", "encoder", "train", "probe", "finetune"):
            self._assign(section, "seed", seed)
        return seed

    # --- validation and derived configs --------------------------------------

    def validated(self) -> "RunConfig":
        """Re-run every section's own checks after piecemeal edits."""
        try:
            for name in _SECTIONS:
                obj = getattr(self, name)
                if hasattr(obj, "__post_init__"):
                    obj.__post_init__()
            self.split.fractions()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        return self

    def pretrain_config(self) -> PretrainConfig:
        template_text = None
        if self.pretrain.template_path:
            try:
                template_text = Path(self.pretrain.template_path).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read template {self.pretrain.template_path}: {exc.strerror}") from None
        try:
            return PretrainConfig(encoder=copy.deepcopy(self.encoder), train=copy.deepcopy(self.train),
                                  loss=copy.deepcopy(self.loss), augment=copy.deepcopy(self.augment),
                                  strategy=self.pretrain.strategy, caption_style=self.pretrain.caption_style,
                                  mask_prob=self.pretrain.mask_prob, use_lora=self.pretrain.use_lora,
                                  template_text=template_text)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # --- echo ----------------------------------------------------------------

    def to_text(self) -> str:
        lines = ["[run]", f"preset = {self.preset}", ""]
        for section in _SECTIONS:
            obj = getattr(self, section)
            lines.append(f"[{section}]")
            for f in dataclasses.fields(obj):
                if f.name in _HIDDEN.get(section, ()):
                    continue
                lines.append(f"{f.name} = {_render(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def echo(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "run_config.ini"
        path.write_text(self.to_text(), encoding="utf-8")
        return path
