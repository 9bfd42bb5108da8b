"""Run configuration: dataclasses plus a ``key = value`` file format.

File grammar::

    # comment
    key = value          # trailing comments allowed
    [section]            # sections only group keys; names are ignored
    other_key = value

Keys are the field names of :class:`DistillRecipe` and
:class:`ExperimentConfig` (all unique). Tuples are comma-separated; booleans
are true/false/yes/no/1/0. ``--set key=value`` uses the same value syntax.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


ALIGN_MODES = ("learned", "random_init", "bilinear", "nearest", "linear")


@dataclass
class DistillRecipe:
    lambda_kl: float = 0.4
    lambda_ce: float = 0.3
    tau: float = 4.0
    stages: tuple[int, ...] = (1, 2, 3, 4)
    sigma_low: float = 0.5
    sigma_high: float = 0.5
    high_weight: float = 0.2
    pool_factor: int = 2
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.005
    eps: float = 1e-8
    warmup_frac: float = 0.05
    grad_clip: float = 5.0
    label_smoothing: float = 0.1
    seed: int = 0
    epochs: int = 30
    batch_size: int = 64
    no_fft: bool = False
    no_filter: bool = False
    no_downsample: bool = False
    align_mode: str = "learned"
    teacher_standardize: bool = True
    flip: bool = True
    crop: bool = True
    jitter: bool = False
    checkpoint_every: int = 0

    def validate(self) -> DistillRecipe:
        if self.lambda_kl < 0 or self.lambda_ce < 0 or self.lambda_kl + self.lambda_ce > 1.0 + 1e-12:
            raise ConfigError(f"need 0 <= lambda_kl + lambda_ce <= 1, got {self.lambda_kl} + {self.lambda_ce}")
        if not self.stages:
            raise ConfigError("stages must be a non-empty subset of {1,2,3,4}")
        if any(s not in (1, 2, 3, 4) for s in self.stages) or len(set(self.stages)) != len(self.stages):
            raise ConfigError(f"stages must be distinct values in 1..4, got {self.stages}")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.align_mode not in ALIGN_MODES:
            raise ConfigError(f"align_mode must be one of {ALIGN_MODES}, got {self.align_mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("warmup_frac must lie in [0, 1)")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        return self

    @property
    def lambda_mse(self) -> float:
        return 1.0 - self.lambda_kl - self.lambda_ce


@dataclass
class ExperimentConfig:
    teacher: str = "attn_t"
    student: str = "cnn_s"
    image_size: int = 32
    num_classes: int = 10
    n_per_class: int = 60
    val_fraction: float = 0.25
    data_seed: int = 0
    noise: float = 0.08
    data_dir: str = ""
    teacher_epochs: int = 20
    teacher_lr: float = 3e-3
    teacher_seed: int = 0
    teacher_ckpt: str = ""
    recipe: DistillRecipe = field(default_factory=DistillRecipe)

    def validate(self) -> ExperimentConfig:
        self.recipe.validate()
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        return self


_RECIPE_KEYS = {f.name: f for f in fields(DistillRecipe)}
_EXP_KEYS = {f.name: f for f in fields(ExperimentConfig) if f.name != "recipe"}


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"not an integer: {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"not a number: {raw!r}") from None
    if isinstance(default, tuple):
        parts = [p for p in raw.replace("{", "").replace("}", "").split(",") if p.strip()]
        try:
            return tuple(int(p) for p in parts)
        except ValueError:
            raise ConfigError(f"not a list of integers: {raw!r}") from None
    return raw


def set_value(cfg: ExperimentConfig, key: str, raw: str) -> None:
    key = key.strip()
    if key.startswith("recipe."):
        key = key[len("recipe.") :]
    if key in _EXP_KEYS:
        setattr(cfg, key, _parse_value(raw, getattr(cfg, key)))
    elif key in _RECIPE_KEYS:
        setattr(cfg.recipe, key, _parse_value(raw, getattr(cfg.recipe, key)))
    else:
        raise ConfigError(f"unknown config key {key!r}")


def parse_text(text: str, cfg: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = cfg or ExperimentConfig()
    cp = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",), strict=True
    )
    cp.optionxform = str
    try:
        cp.read_string("[__top__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    seen: set[str] = set()
    for section in cp.sections():
        for key, raw in cp.items(section, raw=True):
            if key in seen:
                raise ConfigError(f"key {key!r} set twice")
            seen.add(key)
            set_value(cfg, key, raw)
    return cfg


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        parse_text(text, cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        set_value(cfg, k, v)
    return cfg.validate()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = ["[experiment]"]
    for name in _EXP_KEYS:
        lines.append(f"{name} = {_fmt(getattr(cfg, name))}")
    lines.append("")
    lines.append("[recipe]")
    for name in _RECIPE_KEYS:
        lines.append(f"{name} = {_fmt(getattr(cfg.recipe, name))}")
    return "\n".join(lines) + "\n"


def recipe_with(recipe: DistillRecipe, **changes) -> DistillRecipe:
    return dataclasses.replace(recipe, **changes).validate()
