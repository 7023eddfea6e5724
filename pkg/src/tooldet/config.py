"""Flat ``section.key = value`` run configuration.

A config document is UTF-8 text with one ``key = value`` per line. Keys are
either fully qualified (``train.lr = 0.01``) or relative to the last
``[section]`` header. ``#`` starts a comment. Values are parsed against the
type of the default: integers, floats, booleans (true/false), strings
(optionally quoted) and comma-separated tuples.

Sources are applied in increasing precedence: defaults, the config file,
``TOOLDET_<SECTION>__<KEY>`` environment variables, then ``--set`` overrides.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .data import SyntheticSceneConfig
from .model import ModelConfig
from .trainer import TrainConfig

ENV_PREFIX = "TOOLDET_"


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    data_root: str = "data"
    checkpoint: str = "runs/model.ckpt"
    output_dir: str = "runs"


@dataclass
class DataConfig:
    n_sequences: int = 40
    n_test: int = 10
    flow_source: str = "gt"  # gt | estimated
    flow_alpha: float = 0.05
    flow_iterations: int = 200


@dataclass
class DetectConfig:
    score_thresh: float = 0.05
    nms_thresh: float = 0.3


@dataclass
class EvalConfig:
    iou_thresh: float = 0.5
    eleven_point: bool = False
    folds: int = 10


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    scene: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}"]
        for section, values in _sections(self).items():
            lines.append(f"\n[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path, name: str = "effective_config.cfg") -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / name
        path.write_text(self.to_text())
        return path


# train.seed is driven by the top-level seed
_HIDDEN = {("train", "seed")}


def _sections(cfg: RunConfig) -> dict[str, dict]:
    out = {}
    for f in dataclasses.fields(cfg):
        if f.name == "seed":
            continue
        section = getattr(cfg, f.name)
        out[f.name] = {
            sf.name: getattr(section, sf.name)
            for sf in dataclasses.fields(section)
            if (f.name, sf.name) not in _HIDDEN
        }
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def _parse_scalar(text: str, like, key: str):
    if isinstance(like, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected bool, got {text!r}")
    if isinstance(like, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected int, got {text!r}") from None
    if isinstance(like, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected float, got {text!r}") from None
    return text


def parse_value(text: str, default, key: str):
    """Parse ``text`` into the type of ``default``."""
    text = text.strip()
    quoted = len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'"
    if quoted:
        text = text[1:-1]
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if not items:
            raise ConfigError(f"{key}: expected a comma-separated list, got {text!r}")
        like = default[0] if default else 0.0
        if isinstance(like, int) and not isinstance(like, bool) and any("." in t for t in items):
            like = 0.0
        return tuple(_parse_scalar(t, like, key) for t in items)
    if default is None:
        if text.lower() == "none":
            return None
        return _parse_scalar(text, 0, key)
    if isinstance(default, str):
        return text
    if quoted:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got string {text!r}")
    return _parse_scalar(text, default, key)


def _assign(cfg: RunConfig, key: str, text: str) -> None:
    if key == "seed":
        cfg.seed = parse_value(text, cfg.seed, key)
        return
    section, _, name = key.partition(".")
    target = getattr(cfg, section, None)
    if not dataclasses.is_dataclass(target) or (section, name) in _HIDDEN \
            or name not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, parse_value(text, getattr(target, name), key))


def parse_lines(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    """``(key, value)`` pairs of a config document, section headers applied."""
    pairs = []
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if section and "." not in key:
            key = f"{section}.{key}"
        pairs.append((key, value))
    return pairs


_RANGES = {
    "train.lr": (0.0, None), "train.momentum": (0.0, 1.0), "train.weight_decay": (0.0, None),
    "train.iterations": (0, None), "train.rpn_batch": (2, None), "train.roi_batch": (1, None),
    "train.rpn_pos_fraction": (0.0, 1.0), "train.roi_fg_fraction": (0.0, 1.0),
    "train.rpn_pos_iou": (0.0, 1.0), "train.rpn_neg_iou": (0.0, 1.0), "train.roi_fg_iou": (0.0, 1.0),
    "train.roi_bg_iou_hi": (0.0, 1.0), "train.roi_bg_iou_lo": (0.0, 1.0),
    "train.rpn_lambda": (0.0, None), "train.det_lambda": (0.0, None), "train.checkpoint_every": (0, None),
    "model.roi_size": (1, None), "model.fc_width": (1, None), "model.fusion_width": (1, None),
    "model.rpn_width": (1, None), "model.num_classes": (2, 2), "model.proposal_nms_thresh": (0.0, 1.0),
    "model.pre_nms_top_n_train": (1, None), "model.post_nms_top_n_train": (1, None),
    "model.pre_nms_top_n_test": (1, None), "model.post_nms_top_n_test": (1, None),
    "data.n_sequences": (1, None), "data.n_test": (0, None), "data.flow_alpha": (0.0, None),
    "data.flow_iterations": (1, None),
    "detect.score_thresh": (0.0, 1.0), "detect.nms_thresh": (0.0, 1.0),
    "eval.iou_thresh": (0.0, 1.0), "eval.folds": (2, None),
}


def validate(cfg: RunConfig) -> RunConfig:
    for section, values in _sections(cfg).items():
        for name, value in values.items():
            key = f"{section}.{name}"
            if key not in _RANGES:
                continue
            lo, hi = _RANGES[key]
            if (lo is not None and value < lo) or (hi is not None and value > hi):
                raise ConfigError(f"{key} = {value} outside [{lo}, {'inf' if hi is None else hi}]")
    if cfg.train.rpn_neg_iou >= cfg.train.rpn_pos_iou:
        raise ConfigError("train.rpn_neg_iou must be below train.rpn_pos_iou")
    if cfg.model.stride != 16:
        raise ConfigError(f"model.stride is fixed at 16 by the backbone, got {cfg.model.stride}")
    if cfg.data.n_test >= cfg.data.n_sequences:
        raise ConfigError("data.n_test must leave at least one training sequence")
    if cfg.data.flow_source not in ("gt", "estimated"):
        raise ConfigError(f"data.flow_source must be 'gt' or 'estimated', got {cfg.data.flow_source!r}")
    try:
        SyntheticSceneConfig(**dataclasses.asdict(cfg.scene))
    except ValueError as exc:
        raise ConfigError(f"scene: {exc}") from exc
    return cfg


def load_config(text: str = "", overrides: list[str] | None = None, env: dict | None = None,
                source: str = "<config>") -> RunConfig:
    """Build a validated RunConfig from a document, environment and overrides."""
    cfg = RunConfig()
    for key, value in parse_lines(text, source):
        _assign(cfg, key, value)
    env = os.environ if env is None else env
    for name in sorted(env):
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower().replace("__", ".")
            _assign(cfg, key, env[name])
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        _assign(cfg, key.strip(), value)
    return validate(cfg)


def load_config_file(path: Path | None, overrides: list[str] | None = None, env: dict | None = None) -> RunConfig:
    if path is None:
        return load_config("", overrides, env)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return load_config(path.read_text(encoding="utf-8"), overrides, env, source=str(path))


def preset(name: str) -> str:
    """Text of a bundled config preset, e.g. ``"desk"``."""
    try:
        return resources.files("tooldet").joinpath("presets", f"{name}.cfg").read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}") from None
