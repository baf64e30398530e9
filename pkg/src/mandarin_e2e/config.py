"""Experiment configuration: an INI file mapped onto dataclasses.

Sections are ``[data]``, ``[model]``, ``[ctc_model]``, ``[attention_model]``,
``[train]`` and ``[decode]``. Training defaults depend on the model family
(see ``RECIPES``); explicit keys always win. ``configs/`` holds annotated
examples.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .attention import LasModelConfig
from .ctc import CtcModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train_manifest: str = ""
    valid_manifest: str = ""
    vocab: str = ""
    lexicon: str = ""
    cmvn: str = ""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    weight_decay: float = 1e-5
    clip_norm: float | None = None
    init: str = "uniform-fanin"
    init_variance: float = 0.1
    # schedule sampling: linear ramp 0 -> p_ss_max over the first p_ss_ramp of epochs
    p_ss_max: float = 0.0
    p_ss_ramp: float = 0.5
    label_smoothing: float = 0.0
    seed: int = 0
    checkpoint_dir: str = "exp"
    max_minutes: float | None = None
    resume: str = ""


@dataclass
class DecodeConfig:
    beam_width: int = 8
    # CTC objective weights
    alpha: float = 0.0
    beta_wc: float = 0.0
    # attention objective weights
    gamma: float = 0.0
    beta_cov: float = 0.0
    lam: float = 0.0
    tau: float = 0.5
    max_len: int = 100
    lm: str = ""
    n_best: int = 1
    greedy: bool = False
    top_k_labels: int | None = None
    # syllable -> character transduction for syllable models
    transduce_lexicon: str = ""
    char_lm: str = ""
    transduce_beam: int = 10


@dataclass
class ModelConfig:
    family: str = "ctc"

    def __post_init__(self):
        if self.family not in ("ctc", "attention"):
            raise ConfigError(f"[model] family: expected 'ctc' or 'attention', got {self.family!r}")


# Family-specific training defaults, from the published recipes where they exist:
# CTC uses Adam, L2 decay 1e-5, lr 1e-3 -> 1e-6; attention uses Adam with
# clipping, N(0, 0.1) init, lr 5e-4 -> 5e-6, schedule sampling and unigram
# smoothing. The clip threshold, p_ss ceiling and smoothing weight are not
# published and are pinned here.
RECIPES = {
    "ctc": dict(lr_start=1e-3, lr_end=1e-6, weight_decay=1e-5, clip_norm=None, init="uniform-fanin",
                p_ss_max=0.0, label_smoothing=0.0),
    "attention": dict(lr_start=5e-4, lr_end=5e-6, weight_decay=0.0, clip_norm=5.0, init="gaussian",
                      init_variance=0.1, p_ss_max=0.1, label_smoothing=0.05),
}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ctc_model: CtcModelConfig = field(default_factory=CtcModelConfig)
    attention_model: LasModelConfig = field(default_factory=LasModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        hints = typing.get_type_hints(cls)
        return cls(**{f.name: _build(hints[f.name], d.get(f.name, {}), f.name) for f in dataclasses.fields(cls)})


def _coerce(value: str, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value.strip().lower() in ("", "none"):
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    try:
        if hint is bool:
            v = value.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if hint is int:
            return int(value)
        if hint is float:
            return float(value)
        if origin is tuple:
            return tuple(int(x) for x in value.replace(",", " ").split())
        return value
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {getattr(hint, '__name__', hint)}") from None


def _build(cls, values: dict, section: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in values.items():
        kwargs[k] = _coerce(v, hints[k], f"[{section}] {k}") if isinstance(v, str) else v
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {e}") from None


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    if not parser.read(path, encoding="utf-8"):
        raise ConfigError(f"cannot read config file {path}")
    sections = {s: dict(parser[s]) for s in parser.sections()}
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    extra = set(sections) - known
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    family = sections.get("model", {}).get("family", "ctc").strip()
    if family not in RECIPES:
        raise ConfigError(f"[model] family: expected 'ctc' or 'attention', got {family!r}")
    train = {k: v for k, v in RECIPES[family].items()}
    train.update(sections.get("train", {}))
    sections["train"] = train
    cfg = ExperimentConfig.from_dict(sections)
    base = Path(path).parent
    for key in ("train_manifest", "valid_manifest", "vocab", "lexicon", "cmvn"):
        value = getattr(cfg.data, key)
        if value and not Path(value).is_absolute():
            setattr(cfg.data, key, str(base / value))
    for obj, key in ((cfg.train, "checkpoint_dir"), (cfg.train, "resume"), (cfg.decode, "lm"),
                     (cfg.decode, "transduce_lexicon"), (cfg.decode, "char_lm")):
        value = getattr(obj, key)
        if value and not Path(value).is_absolute():
            setattr(obj, key, str(base / value))
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    t = cfg.train
    checks = [
        (t.epochs >= 1, "[train] epochs must be >= 1"),
        (t.batch_size >= 1, "[train] batch_size must be >= 1"),
        (0 < t.lr_end <= t.lr_start, "[train] need 0 < lr_end <= lr_start"),
        (t.weight_decay >= 0, "[train] weight_decay must be >= 0"),
        (t.clip_norm is None or t.clip_norm > 0, "[train] clip_norm must be positive"),
        (t.init in ("gaussian", "uniform-fanin"), "[train] init must be 'gaussian' or 'uniform-fanin'"),
        (t.init_variance >= 0, "[train] init_variance must be >= 0"),
        (0 <= t.p_ss_max <= 1, "[train] p_ss_max must be in [0, 1]"),
        (0 < t.p_ss_ramp <= 1, "[train] p_ss_ramp must be in (0, 1]"),
        (0 <= t.label_smoothing <= 1, "[train] label_smoothing must be in [0, 1]"),
        (cfg.decode.beam_width >= 1, "[decode] beam_width must be >= 1"),
        (0 < cfg.decode.tau < 1, "[decode] tau must be in (0, 1)"),
        (cfg.decode.gamma >= 0, "[decode] gamma must be >= 0"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def write_config(cfg: ExperimentConfig, path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in cfg.to_dict().items():
        parser[section] = {
            k: ("none" if v is None else ",".join(map(str, v)) if isinstance(v, (tuple, list)) else str(v))
            for k, v in values.items()
        }
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)
