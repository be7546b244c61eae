"""Recipe timelines: which mask behaviour applies at each training step."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Literal

from .nm import NmPattern


class Recipe(str, Enum):
    DENSE = "Dense"
    DENSE_SPARSE = "DenseSparse"
    SR_STE = "SrSte"
    STRUCTURE_DECAY = "StructureDecay"
    MASK_DECAY = "MaskDecay"
    UNSTRUCTURED_ONE_SHOT = "UnstructuredOneShot"

    @classmethod
    def parse(cls, name: str) -> Recipe:
        for r in cls:
            if r.value.lower() == str(name).strip().lower():
                return r
        raise ValueError(f"unknown recipe {name!r}; choose from {[r.value for r in cls]}")


PhaseKind = Literal["dense", "decay", "finetune"]


@dataclass(frozen=True)
class PhaseSpec:
    phase_kind: PhaseKind
    active_pattern: NmPattern | None = None
    mask_mode: Literal["binary", "decayed"] = "binary"
    decay_value: float = 1.0
    refresh_mask: bool = False
    structured: bool = True

    def density(self) -> float:
        return 1.0 if self.active_pattern is None else self.active_pattern.density()


DENSE_PHASE = PhaseSpec("dense")


@dataclass(frozen=True)
class RecipeSchedule:
    recipe: Recipe
    total_steps: int
    target_pattern: NmPattern
    dense_steps: int = 0
    finetune_steps: int = 0
    beta: float = 0.9
    update_period: int = 1000
    decay_interval: int | None = None
    warmup_steps: int = 0  # SrSte only
    lambda_w: float = 2e-4  # SrSte only

    def __post_init__(self):
        object.__setattr__(self, "recipe", self.recipe if isinstance(self.recipe, Recipe) else Recipe.parse(self.recipe))
        n, d, s = self.total_steps, self.dense_steps, self.finetune_steps
        if min(n, d, s, self.warmup_steps) < 0:
            raise ValueError("step counts must be non-negative")
        if n < 1:
            raise ValueError("total_steps must be positive")
        if d + s > n:
            raise ValueError(f"dense_steps + finetune_steps = {d + s} exceeds total_steps = {n}")
        if self.warmup_steps > n:
            raise ValueError("warmup_steps exceeds total_steps")
        if self.update_period < 1:
            raise ValueError("update_period must be >= 1")
        if self.decay_interval is not None and self.decay_interval < 1:
            raise ValueError("decay_interval must be >= 1")
        if self.lambda_w < 0:
            raise ValueError(f"lambda_w must be non-negative, got {self.lambda_w}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.recipe is Recipe.STRUCTURE_DECAY:
            if self.target_pattern.keep_n >= self.target_pattern.group_m:
                raise ValueError("StructureDecay target must be sparser than M:M")
            structure_decay_phases(self.target_pattern, self.decay_window)
        if self.recipe is Recipe.MASK_DECAY and self.decay_window < 1:
            raise ValueError("MaskDecay needs a non-empty decay window (n - d - s >= 1)")

    @property
    def decay_window(self) -> int:
        return self.total_steps - self.dense_steps - self.finetune_steps

    @property
    def finetune_start(self) -> int:
        return self.total_steps - self.finetune_steps

    @property
    def interval(self) -> int:
        return self.decay_interval or self.update_period


def structure_decay_phases(target: NmPattern, window_steps: int) -> list[tuple[NmPattern, int, int]]:
    """``[(pattern, start, end), ...]`` relative to the window start; ``end`` exclusive.

    Patterns run M-1:M, M/2:M, M/4:M, ... down to the target. Frames are equal
    length, with the division remainder added to the last frame.
    """
    m, n = target.group_m, target.keep_n
    if n >= m:
        raise ValueError(f"structure decay target {target} must be sparser than {m}:{m}")
    keeps = [m - 1]
    k = m // 2
    while k > n:
        if k < keeps[-1]:
            keeps.append(k)
        k //= 2
    if keeps[-1] != n:
        keeps.append(n)
    phases = len(keeps)
    if window_steps < phases:
        raise ValueError(f"decay window of {window_steps} steps cannot hold {phases} structure phases")
    frame = window_steps // phases
    out = []
    for i, keep in enumerate(keeps):
        start = i * frame
        end = window_steps if i == phases - 1 else start + frame
        out.append((NmPattern(keep, m), start, end))
    return out


def _check_step(step: int, schedule: RecipeSchedule) -> None:
    if not 0 <= step < schedule.total_steps:
        raise IndexError(f"step {step} outside [0, {schedule.total_steps})")


def mask_decay_value(step: int, schedule: RecipeSchedule) -> float:
    """Pruned-slot multiplier of a MaskDecay run: beta**k in the window, 0 after it.

    ``k`` starts at 1 and grows by one every ``schedule.interval`` steps.
    Dense-phase steps return 1.
    """
    if schedule.recipe is not Recipe.MASK_DECAY:
        raise ValueError(f"mask_decay_value is defined for MaskDecay, not {schedule.recipe.value}")
    _check_step(step, schedule)
    if step < schedule.dense_steps:
        return 1.0
    if step >= schedule.finetune_start:
        return 0.0
    k = 1 + (step - schedule.dense_steps) // schedule.interval
    return schedule.beta**k


def _binary(pattern: NmPattern, kind: PhaseKind, refresh: bool, structured: bool = True) -> PhaseSpec:
    return PhaseSpec(kind, pattern, "binary", 0.0, refresh, structured)


def phase_at(step: int, schedule: RecipeSchedule) -> PhaseSpec:
    _check_step(step, schedule)
    r = schedule.recipe
    target = schedule.target_pattern
    d, period = schedule.dense_steps, schedule.update_period

    if r is Recipe.DENSE:
        return DENSE_PHASE

    if r is Recipe.SR_STE:
        w = schedule.warmup_steps
        if step < w:
            return DENSE_PHASE
        # no separate fine-tune: SR-STE keeps refreshing to the last step
        return _binary(target, "decay", (step - w) % period == 0)

    if step < d:
        return DENSE_PHASE

    if r is Recipe.DENSE_SPARSE:
        return _binary(target, "finetune", step == d)

    if r is Recipe.UNSTRUCTURED_ONE_SHOT:
        return _binary(target, "finetune", step == d, structured=False)

    if step >= schedule.finetune_start:
        return _binary(target, "finetune", False)

    offset = step - d
    if r is Recipe.MASK_DECAY:
        value = mask_decay_value(step, schedule)
        return PhaseSpec("decay", target, "decayed", value, offset % period == 0)

    if r is Recipe.STRUCTURE_DECAY:
        for pattern, start, end in structure_decay_phases(target, schedule.decay_window):
            if start <= offset < end:
                return _binary(pattern, "decay", offset == start or offset % period == 0)

    raise AssertionError(f"unhandled recipe {r}")  # pragma: no cover
