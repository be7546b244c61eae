"""Plain-text run configs: one ``section.key = value`` per line, ``#`` comments.

Example::

    schedule.recipe = MaskDecay
    schedule.target = 2:4
    schedule.beta = 0.9
    seed = 0

Unknown keys are rejected; every value is validated before any compute.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .model import ModelConfig, ToyTask
from .nm import NmPattern
from .schedule import RecipeSchedule
from .trainer import OptimizerConfig, TrainConfig

OUTPUT_ROOT_ENV = "NMSPARSE_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


# Desk defaults: n/d/s = 200K/20K/20K and a 1000-step mask period, scaled by 1/40.
SCHEDULE_DEFAULTS: dict[str, Any] = {
    "recipe": "MaskDecay",
    "total_steps": 5000,
    "dense_steps": 500,
    "finetune_steps": 500,
    "target": "2:4",
    "beta": 0.9,
    "update_period": 100,
    "decay_interval": None,
    "warmup_steps": 0,
    "lambda_w": 2e-4,
}

_SECTIONS = {
    "model": ModelConfig,
    "task": ToyTask,
    "optimizer": OptimizerConfig,
    "train": TrainConfig,
}
_TOP_LEVEL = {"seed": 0, "output_dir": "runs/run"}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: ToyTask = field(default_factory=ToyTask)
    schedule: RecipeSchedule = field(
        default_factory=lambda: RecipeSchedule(
            SCHEDULE_DEFAULTS["recipe"],
            SCHEDULE_DEFAULTS["total_steps"],
            NmPattern.parse(SCHEDULE_DEFAULTS["target"]),
            SCHEDULE_DEFAULTS["dense_steps"],
            SCHEDULE_DEFAULTS["finetune_steps"],
            update_period=SCHEDULE_DEFAULTS["update_period"],
        )
    )
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    output_dir: str = "runs/run"

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for section in _SECTIONS:
            for f in dataclasses.fields(getattr(self, section)):
                flat[f"{section}.{f.name}"] = getattr(getattr(self, section), f.name)
        s = self.schedule
        flat.update(
            {
                "schedule.recipe": s.recipe.value,
                "schedule.total_steps": s.total_steps,
                "schedule.dense_steps": s.dense_steps,
                "schedule.finetune_steps": s.finetune_steps,
                "schedule.target": str(s.target_pattern),
                "schedule.beta": s.beta,
                "schedule.update_period": s.update_period,
                "schedule.decay_interval": s.decay_interval,
                "schedule.warmup_steps": s.warmup_steps,
                "schedule.lambda_w": s.lambda_w,
            }
        )
        flat["seed"] = self.seed
        flat["output_dir"] = self.output_dir
        return flat

    def dumps(self) -> str:
        lines = [f"{k} = {_fmt(v)}" for k, v in sorted(self.to_flat().items())]
        return "\n".join(lines) + "\n"

    def run_id(self) -> str:
        flat = self.to_flat()
        flat.pop("output_dir")
        text = "\n".join(f"{k}={_fmt(v)}" for k, v in sorted(flat.items()))
        return hashlib.sha1(text.encode()).hexdigest()[:12]

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


def _fmt(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_value(text: str) -> Any:
    t = text.strip()
    low = t.lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    return t


def read_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def _coerce(key: str, value: Any, default: Any) -> Any:
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) or default is None and key.endswith(("interval", "steps")):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    return str(value)


def _defaults(cls) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        out[f.name] = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    return out


def build_run_config(pairs: dict[str, Any]) -> RunConfig:
    """Validate dotted key/value pairs (raw strings or already-typed values)."""
    values = {k: parse_value(v) if isinstance(v, str) else v for k, v in pairs.items()}
    grouped: dict[str, dict[str, Any]] = {s: {} for s in (*_SECTIONS, "schedule")}
    top: dict[str, Any] = {}
    for key, value in values.items():
        if key in _TOP_LEVEL:
            top[key] = value
            continue
        section, _, name = key.partition(".")
        if section not in grouped or not name:
            raise ConfigError(f"unknown config key {key!r}")
        grouped[section][name] = value

    built: dict[str, Any] = {}
    for section, cls in _SECTIONS.items():
        defaults = _defaults(cls)
        kwargs = {}
        for name, value in grouped[section].items():
            if name not in defaults:
                raise ConfigError(f"unknown config key '{section}.{name}'")
            kwargs[name] = _coerce(f"{section}.{name}", value, defaults[name])
        try:
            built[section] = cls(**kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}] {exc}") from None

    sched = dict(SCHEDULE_DEFAULTS)
    for name, value in grouped["schedule"].items():
        if name not in SCHEDULE_DEFAULTS:
            raise ConfigError(f"unknown config key 'schedule.{name}'")
        sched[name] = value
    try:
        target = NmPattern.parse(str(sched["target"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"schedule.target: {exc}") from None
    try:
        schedule = RecipeSchedule(
            recipe=str(sched["recipe"]),
            total_steps=_coerce("schedule.total_steps", sched["total_steps"], 0),
            target_pattern=target,
            dense_steps=_coerce("schedule.dense_steps", sched["dense_steps"], 0),
            finetune_steps=_coerce("schedule.finetune_steps", sched["finetune_steps"], 0),
            beta=_coerce("schedule.beta", sched["beta"], 0.0),
            update_period=_coerce("schedule.update_period", sched["update_period"], 0),
            decay_interval=_coerce("schedule.decay_interval", sched["decay_interval"], None),
            warmup_steps=_coerce("schedule.warmup_steps", sched["warmup_steps"], 0),
            lambda_w=_coerce("schedule.lambda_w", sched["lambda_w"], 0.0),
        )
    except ValueError as exc:
        raise ConfigError(f"[schedule] {exc}") from None

    seed = _coerce("seed", top.get("seed", 0), 0)
    output_dir = str(top.get("output_dir", _TOP_LEVEL["output_dir"]))
    cfg = RunConfig(built["model"], built["task"], schedule, built["optimizer"], built["train"], seed, output_dir)
    _cross_check(cfg)
    return cfg


def _cross_check(cfg: RunConfig) -> None:
    m, t, s = cfg.model, cfg.task, cfg.schedule
    if t.vocab != m.vocab:
        raise ConfigError(f"task.vocab={t.vocab} must equal model.vocab={m.vocab}")
    if t.max_len >= m.max_len:
        raise ConfigError(f"task.max_len={t.max_len} must be below model.max_len={m.max_len}")
    M = s.target_pattern.group_m
    for name, size in (("model.d_model", m.d_model), ("model.d_ff", m.d_ff)):
        if size % M:
            raise ConfigError(f"{name}={size} is not divisible by M={M} of schedule.target")


def parse_overrides(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_run_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    pairs: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        pairs = read_pairs(text, str(p))
    pairs.update(overrides or {})
    return build_run_config(pairs)
