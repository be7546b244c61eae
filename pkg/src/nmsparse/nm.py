"""N:M and unstructured magnitude masks, and the ways masks enter training."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import _kernels
from .tensor import Tensor, make_node, mul

MaskMode = Literal["binary", "decayed"]


@dataclass(frozen=True)
class NmPattern:
    """Keep ``keep_n`` of every ``group_m`` consecutive weights."""

    keep_n: int
    group_m: int

    def __post_init__(self):
        n, m = self.keep_n, self.group_m
        if not (isinstance(n, (int, np.integer)) and isinstance(m, (int, np.integer))):
            raise TypeError(f"N:M pattern needs integers, got {n!r}:{m!r}")
        if m < 1 or m & (m - 1):
            raise ValueError(f"N:M pattern {n}:{m}: M must be a power of two")
        if not 1 <= n <= m:
            raise ValueError(f"N:M pattern {n}:{m}: need 1 <= N <= M")

    @classmethod
    def parse(cls, text: str) -> NmPattern:
        try:
            n, m = (int(p) for p in str(text).strip().split(":"))
        except ValueError:
            raise ValueError(f"cannot parse N:M pattern from {text!r}") from None
        return cls(n, m)

    def density(self) -> float:
        return self.keep_n / self.group_m

    @property
    def index_bits(self) -> int:
        return int(math.ceil(math.log2(self.group_m))) if self.group_m > 1 else 0

    def __str__(self) -> str:
        return f"{self.keep_n}:{self.group_m}"


@dataclass
class SparsityMask:
    """Dense multiplier tensor: 1 at kept slots, ``decay_value`` (0 if binary) elsewhere."""

    values: np.ndarray
    mask_mode: MaskMode = "binary"
    decay_value: float = 0.0

    @property
    def kept(self) -> np.ndarray:
        return self.values == 1.0

    def density(self) -> float:
        return float(self.kept.mean())

    def check(self, pattern: NmPattern | None = None, axis: int = 0) -> None:
        """Raise ``ValueError`` unless the mask satisfies its own invariants."""
        v = self.values
        if self.mask_mode == "binary":
            ok = np.all((v == 0.0) | (v == 1.0))
        else:
            ok = np.all((v == self.decay_value) | (v == 1.0))
        if not ok:
            raise ValueError(f"{self.mask_mode} mask holds values outside its allowed set")
        if pattern is not None:
            counts = _to_groups(self.kept.astype(np.float64), pattern.group_m, axis).sum(axis=1)
            if np.any(counts != pattern.keep_n):
                bad = int(np.flatnonzero(counts != pattern.keep_n)[0])
                raise ValueError(
                    f"mask breaks {pattern}: group {bad} keeps {int(counts[bad])} entries"
                )


@dataclass(frozen=True)
class SrSteConfig:
    lambda_w: float = 2e-4

    def __post_init__(self):
        if self.lambda_w < 0:
            raise ValueError(f"lambda_w must be non-negative, got {self.lambda_w}")


def _to_groups(arr: np.ndarray, m: int, axis: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, -1)
    return np.ascontiguousarray(moved).reshape(-1, m)


def _from_groups(groups: np.ndarray, shape: tuple[int, ...], axis: int) -> np.ndarray:
    moved_shape = list(shape)
    moved_shape.append(moved_shape.pop(axis))
    return np.moveaxis(groups.reshape(moved_shape), -1, axis)


def _raw(weights) -> np.ndarray:
    return weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)


def _group_keep(weights, pattern: NmPattern, axis: int, name: str) -> np.ndarray:
    w = _raw(weights)
    if w.ndim == 0:
        raise ValueError(f"{name}: cannot group a scalar")
    axis = axis % w.ndim
    if w.shape[axis] % pattern.group_m:
        raise ValueError(
            f"{name}: axis {axis} has length {w.shape[axis]} (shape {w.shape}), "
            f"not divisible by M={pattern.group_m}"
        )
    if not np.all(np.isfinite(w)):
        raise ValueError(f"{name}: weights contain NaN or Inf")
    groups = _to_groups(w, pattern.group_m, axis)
    keep = _kernels.topn_groups(groups, pattern.keep_n)
    return _from_groups(keep, w.shape, axis)


def group_topn_indices(weights, pattern: NmPattern, axis: int = 0, name: str = "weights") -> np.ndarray:
    """Kept in-group offsets, shape ``(groups, N)``, ascending within each group.

    Groups are ``M`` consecutive entries along ``axis``; they are enumerated
    with ``axis`` moved last, in row-major order.
    """
    keep = _group_keep(weights, pattern, axis, name)
    groups = _to_groups(keep, pattern.group_m, axis % keep.ndim)
    return np.nonzero(groups)[1].reshape(-1, pattern.keep_n)


def build_mask(
    weights,
    pattern: NmPattern,
    axis: int = 0,
    mode: MaskMode = "binary",
    decay_value: float = 0.0,
    name: str = "weights",
) -> SparsityMask:
    if mode == "binary":
        decay_value = 0.0
    elif mode == "decayed":
        if not 0.0 <= decay_value < 1.0:
            raise ValueError(f"decay_value must lie in [0, 1), got {decay_value}")
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    keep = _group_keep(weights, pattern, axis, name)
    return SparsityMask(np.where(keep, 1.0, float(decay_value)), mode, float(decay_value))


def mask_from_kept(kept: np.ndarray, mode: MaskMode = "binary", decay_value: float = 0.0) -> SparsityMask:
    """Rebuild a mask over a fixed kept set, e.g. to change ``decay_value`` or bake to binary."""
    dv = 0.0 if mode == "binary" else float(decay_value)
    return SparsityMask(np.where(kept, 1.0, dv), mode, dv)


def build_unstructured_mask(weights, density: float) -> SparsityMask:
    w = _raw(weights)
    if w.size == 0:
        raise ValueError("build_unstructured_mask: empty tensor")
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must be in (0, 1], got {density}")
    k = math.ceil(density * w.size - 1e-9)
    order = np.argsort(-np.abs(w.reshape(-1)), kind="stable")
    keep = np.zeros(w.size, dtype=bool)
    keep[order[:k]] = True
    return SparsityMask(np.where(keep, 1.0, 0.0).reshape(w.shape), "binary", 0.0)


def masked_forward(weight: Tensor, mask: SparsityMask) -> Tensor:
    """``weight * mask`` on the graph; pruned slots see ``decay_value``-scaled gradients."""
    if mask.values.shape != weight.shape:
        raise ValueError(f"masked_forward: weight {weight.shape} vs mask {mask.values.shape}")
    return mul(weight, Tensor(mask.values))


def straight_through(weight: Tensor, mask: SparsityMask) -> Tensor:
    """Forward ``weight * mask``; backward passes the gradient unmasked (STE)."""
    if mask.values.shape != weight.shape:
        raise ValueError(f"straight_through: weight {weight.shape} vs mask {mask.values.shape}")
    return make_node(weight.data * mask.values, (weight,), lambda g: (g,), "ste_mask")


def sr_ste_decay(weight: np.ndarray, binary_mask: SparsityMask, lr: float, config: SrSteConfig) -> None:
    """In place: shrink currently pruned weights by ``lr * lambda_w``."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if config.lambda_w:
        weight -= lr * config.lambda_w * (1.0 - binary_mask.values) * weight


def sr_ste_step(
    weight: np.ndarray,
    dense_grad: np.ndarray,
    binary_mask: SparsityMask,
    lr: float,
    config: SrSteConfig,
) -> np.ndarray:
    """One SGD step with the sparse-refined term; returns the updated weight."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    w = np.asarray(weight, dtype=np.float64)
    return w - lr * dense_grad - lr * config.lambda_w * (1.0 - binary_mask.values) * w
