"""Run configuration: sectioned key-value files, overrides, presets.

Config files use a TOML subset with four core tables — ``[objective]``,
``[mask]``, ``[env]``, ``[trainer]`` — plus an optional ``[policy]`` table
for network sizes. Every key has a default, so the empty config is valid.
Dotted overrides (``--set objective.gamma=0.04``) are applied on top of
the file, last writer wins, and the fully resolved snapshot is persisted
into each run's manifest. The exact grammar is documented in
``docs/CONFIG.md``.
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, get_type_hints

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from .environment import (
    OUTPUT_VOCAB_SIZE,
    PATCH_ALPHABET_SIZE,
    TEXT_VOCAB_SIZE,
    TaskSpec,
    digit_tokens,
)
from .errors import NotFoundError, SchemaError, ValidationError
from .masking import STRATEGIES
from .objectives import ObjectiveConfig
from .policy import ArchConfig

RESAMPLE_MODES = ("per_prompt", "per_rollout")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class MaskConfig:
    """How corrupted images are built during training."""

    strategy: str = "random"
    ratio: float = 0.6
    resample: str = "per_prompt"
    # Pixel patch edge kept for documentation parity; symbolic grids always
    # mask whole cells.
    patch_size_px: int = 14

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown masking strategy {self.strategy!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValidationError(f"mask ratio must lie in [0, 1], got {self.ratio}")
        if self.resample not in RESAMPLE_MODES:
            raise ValidationError(f"unknown resample mode {self.resample!r}")


@dataclass(frozen=True)
class PolicyConfig:
    """Network sizes, initialization scale, and the output-probability floor."""

    d: int = 16
    h: int = 32
    max_answer_len: int = 3
    init_scale: float = 0.25
    sym_init_scale: float = 1.0
    p_floor: float = 0.05

    def __post_init__(self) -> None:
        if self.d < 1 or self.h < 1 or self.max_answer_len < 1:
            raise ValidationError("policy sizes must be >= 1")
        if self.init_scale < 0 or self.sym_init_scale < 0:
            raise ValidationError("init scales must be >= 0")
        if not 0.0 <= self.p_floor < 1.0:
            raise ValidationError("p_floor must lie in [0, 1)")


@dataclass(frozen=True)
class TrainerConfig:
    """Loop-level knobs of the rollout-optimize cycle."""

    group_size: int = 5
    prompts_per_step: int = 32
    steps: int = 300
    lr: float = 0.01
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    temperature: float = 1.0
    max_retries: int = 20
    checkpoint_every: int = 100
    task_dump: str = ""

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValidationError("group_size must be >= 2")
        if self.prompts_per_step < 1:
            raise ValidationError("prompts_per_step must be >= 1")
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")
        if self.lr < 0:
            raise ValidationError("lr must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.temperature <= 0:
            raise ValidationError("temperature must be > 0")
        if self.max_retries < 1:
            raise ValidationError("max_retries must be >= 1")
        if self.checkpoint_every < 1:
            raise ValidationError("checkpoint_every must be >= 1")


_SECTION_TYPES = {
    "objective": ObjectiveConfig,
    "mask": MaskConfig,
    "env": TaskSpec,
    "policy": PolicyConfig,
    "trainer": TrainerConfig,
}


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration of one run."""

    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    env: TaskSpec = field(default_factory=TaskSpec)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def __post_init__(self) -> None:
        if len(digit_tokens(self.env.answer_range)) > self.policy.max_answer_len:
            raise ValidationError(
                "answer_range is not expressible within max_answer_len digits"
            )

    @property
    def dynamic_sampling_enabled(self) -> bool:
        """Dynamic sampling runs exactly for the dapo-family objectives."""
        return self.objective.is_dapo_family

    def arch(self) -> ArchConfig:
        return ArchConfig(
            d=self.policy.d,
            h=self.policy.h,
            v_q=TEXT_VOCAB_SIZE,
            v_out=OUTPUT_VOCAB_SIZE,
            a_sym=PATCH_ALPHABET_SIZE,
            n_max=self.env.n_patches,
            max_answer_len=self.policy.max_answer_len,
            p_floor=self.policy.p_floor,
        )


def _field_types(cls) -> dict[str, type]:
    hints = get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _coerce(raw: Any, target: type, path: str) -> Any:
    if target is bool:
        if isinstance(raw, bool):
            return raw
        if isinstance(raw, str) and raw.lower() in ("true", "false"):
            return raw.lower() == "true"
        raise ValidationError(f"{path} expects true/false, got {raw!r}")
    if target is int:
        if isinstance(raw, bool):
            raise ValidationError(f"{path} expects an integer, got {raw!r}")
        try:
            return int(raw)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{path} expects an integer, got {raw!r}") from exc
    if target is float:
        if isinstance(raw, bool):
            raise ValidationError(f"{path} expects a number, got {raw!r}")
        try:
            return float(raw)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{path} expects a number, got {raw!r}") from exc
    if target is str:
        return str(raw)
    raise ValidationError(f"{path} has unsupported type {target!r}")


def validate_key(dotted: str) -> tuple[str, str, type]:
    """Resolve a dotted path to (section, key, value type); SchemaError if unknown."""
    parts = dotted.split(".")
    if len(parts) != 2:
        raise SchemaError(f"config keys are section.key paths, got {dotted!r}")
    section, key = parts
    if section not in _SECTION_TYPES:
        raise SchemaError(f"unknown config section {section!r}")
    types = _field_types(_SECTION_TYPES[section])
    if key not in types:
        raise SchemaError(f"unknown config key {dotted!r}")
    return section, key, types[key]


def parse_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ValidationError(f"overrides take the form section.key=value, got {item!r}")
    dotted, raw = item.split("=", 1)
    return dotted.strip(), raw.strip()


def _merge_section(section: str, data: dict) -> Any:
    cls = _SECTION_TYPES[section]
    types = _field_types(cls)
    kwargs = {}
    for key, raw in data.items():
        if key not in types:
            raise SchemaError(f"unknown config key {section}.{key!r}")
        kwargs[key] = _coerce(raw, types[key], f"{section}.{key}")
    return cls(**kwargs)


def build_config(data: dict) -> RunConfig:
    """Build a validated RunConfig from a nested plain dict."""
    unknown = set(data) - set(_SECTION_TYPES)
    if unknown:
        raise SchemaError(f"unknown config sections: {sorted(unknown)}")
    sections = {name: _merge_section(name, data.get(name, {})) for name in _SECTION_TYPES}
    return RunConfig(**sections)


def load_config(path=None, overrides: tuple[str, ...] = ()) -> RunConfig:
    """Load a config file (optional) and apply dotted overrides in order."""
    data: dict[str, dict] = {}
    if path is not None:
        with open(path, "rb") as fh:
            parsed = _toml.load(fh)
        for section, table in parsed.items():
            if not isinstance(table, dict):
                raise SchemaError(
                    f"top-level keys must be section tables, got {section!r}"
                )
            data[section] = dict(table)
    for item in overrides:
        dotted, raw = parse_override(item)
        section, key, _ = validate_key(dotted)
        data.setdefault(section, {})[key] = raw
    return build_config(data)


def resolved_dict(cfg: RunConfig) -> dict:
    """The full config as a plain nested dict (manifest snapshot)."""
    return {name: dataclasses.asdict(getattr(cfg, name)) for name in _SECTION_TYPES}


def preset_path(name: str):
    """Path of a shipped preset; accepts bare names with or without .toml."""
    fname = name if name.endswith(".toml") else f"{name}.toml"
    ref = resources.files("percept_rl").joinpath("presets").joinpath(fname)
    if not ref.is_file():
        raise NotFoundError(f"no preset named {name!r}")
    return ref


def resolve_config_arg(value: str):
    """Interpret --config as a filesystem path first, then as a preset name."""
    if os.path.exists(value):
        return value
    try:
        return preset_path(value)
    except NotFoundError:
        raise NotFoundError(f"config file {value!r} not found (not a path or preset)")
