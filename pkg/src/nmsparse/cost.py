"""Analytic parameter and FLOP accounting.

Conventions (echoed in every report):

* one multiply-accumulate is 2 FLOPs; only matmuls are charged, softmax,
  norms, activations and bias adds are ignored;
* forward costs are per sequence of ``seq_len`` tokens on both encoder and
  decoder side; a training step costs 3x forward (backward = 2x forward);
* ``scope="block"`` computes the feed-forward shares over one encoder block
  (self-attention + feed-forward + its norms), ``scope="model"`` over the
  whole network including embeddings and the output projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

from .model import ModelConfig
from .nm import NmPattern
from .schedule import PhaseSpec, Recipe, RecipeSchedule, phase_at, structure_decay_phases

COMPONENTS = ("embeddings", "attention", "feed_forward", "layer_norm", "output_projection")
CONVENTION = "1 MAC = 2 FLOPs; matmuls only; backward = 2x forward"
DEFAULT_SEQ_LEN = 128
DEFAULT_VOCAB = 32000
DEFAULT_VALUE_BITS = 32

Scope = Literal["block", "model"]


@dataclass
class CostReport:
    params: dict[str, int]
    flops: dict[str, int]
    ff_weight_params: int
    ff_param_share: float
    ff_flops_share: float
    model_ff_param_share: float
    model_ff_flops_share: float
    scope: Scope
    seq_len: int
    vocab: int
    block_params: dict[str, int] = field(default_factory=dict)
    block_flops: dict[str, int] = field(default_factory=dict)
    block_ff_weight_params: int = 0
    ff_tensor_size: int = 0
    convention: str = CONVENTION

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    @property
    def scoped_ff_weight_params(self) -> int:
        if self.scope == "model":
            return self.ff_weight_params
        return self.block_ff_weight_params

    @property
    def scoped_total_params(self) -> int:
        return sum((self.params if self.scope == "model" else self.block_params).values())

    def to_record(self) -> dict:
        return {
            "params": dict(self.params),
            "flops": dict(self.flops),
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "ff_param_share": self.ff_param_share,
            "ff_flops_share": self.ff_flops_share,
            "model_ff_param_share": self.model_ff_param_share,
            "model_ff_flops_share": self.model_ff_flops_share,
            "assumptions": {
                "scope": self.scope,
                "seq_len": self.seq_len,
                "vocab": self.vocab,
                "convention": self.convention,
            },
        }


@dataclass
class CompressionReport:
    pattern: NmPattern
    size_reduction_fraction: float
    size_reduction_no_index_fraction: float
    inference_flops_reduction_fraction: float
    index_bits_per_kept: int
    overhead_bits_per_group: int
    value_bits: int

    def to_record(self) -> dict:
        return {
            "pattern": str(self.pattern),
            "size_reduction_fraction": self.size_reduction_fraction,
            "size_reduction_no_index_fraction": self.size_reduction_no_index_fraction,
            "inference_flops_reduction_fraction": self.inference_flops_reduction_fraction,
            "index_bits_per_kept": self.index_bits_per_kept,
            "overhead_bits_per_group": self.overhead_bits_per_group,
            "value_bits": self.value_bits,
        }


def _attention_params(d: int) -> int:
    return 4 * (d * d + d)


def _attention_flops(d: int, lq: int, lk: int) -> int:
    # q and o projections over lq tokens, k and v over lk, plus QK^T and AV
    return 2 * d * d * (2 * lq + 2 * lk) + 2 * 2 * lq * lk * d


def count_costs(
    config: ModelConfig,
    seq_len: int = DEFAULT_SEQ_LEN,
    vocab: int | None = DEFAULT_VOCAB,
    scope: Scope = "block",
) -> CostReport:
    if seq_len < 1:
        raise ValueError("seq_len must be positive")
    if scope not in ("block", "model"):
        raise ValueError(f"unknown scope {scope!r}")
    V = config.vocab if vocab is None else vocab
    d, f, L = config.d_model, config.d_ff, seq_len
    ne, nd = config.enc_layers, config.dec_layers
    layers = ne + nd

    ff_w = 2 * d * f
    params = {
        "embeddings": 2 * V * d,
        "attention": (ne + 2 * nd) * _attention_params(d),
        "feed_forward": layers * (ff_w + f + d),
        "layer_norm": (2 * ne + 1 + 3 * nd + 1) * 2 * d,
        "output_projection": d * V + V,
    }
    flops = {
        "embeddings": 0,
        "attention": ne * _attention_flops(d, L, L) + nd * 2 * _attention_flops(d, L, L),
        "feed_forward": layers * 2 * L * ff_w,
        "layer_norm": 0,
        "output_projection": 2 * L * d * V,
    }
    block_params = {
        "attention": _attention_params(d),
        "feed_forward": ff_w + f + d,
        "layer_norm": 2 * 2 * d,
    }
    block_flops = {
        "attention": _attention_flops(d, L, L),
        "feed_forward": 2 * L * ff_w,
        "layer_norm": 0,
    }

    def share(part: int, whole: int) -> float:
        return part / whole if whole else 0.0

    model_p = share(params["feed_forward"], sum(params.values()))
    model_f = share(flops["feed_forward"], sum(flops.values()))
    block_p = share(block_params["feed_forward"], sum(block_params.values()))
    block_f = share(block_flops["feed_forward"], sum(block_flops.values()))
    use_block = scope == "block"
    return CostReport(
        params=params,
        flops=flops,
        ff_weight_params=layers * ff_w,
        ff_param_share=block_p if use_block else model_p,
        ff_flops_share=block_f if use_block else model_f,
        model_ff_param_share=model_p,
        model_ff_flops_share=model_f,
        scope=scope,
        seq_len=seq_len,
        vocab=V,
        block_params=block_params,
        block_flops=block_flops,
        block_ff_weight_params=ff_w,
        ff_tensor_size=d * f,
    )


def packed_bits_per_group(pattern: NmPattern, value_bits: int = DEFAULT_VALUE_BITS) -> int:
    return pattern.keep_n * (value_bits + pattern.index_bits)


def compression(
    report: CostReport,
    pattern: NmPattern,
    index_bits_per_kept: int | None = None,
    value_bits: int = DEFAULT_VALUE_BITS,
) -> CompressionReport:
    """Size and inference-FLOP reductions when only FF weights are stored/computed N:M."""
    idx = pattern.index_bits if index_bits_per_kept is None else index_bits_per_kept
    M, N = pattern.group_m, pattern.keep_n
    dense_bits = M * value_bits
    packed = N * (value_bits + idx)
    weight_share = report.scoped_ff_weight_params / report.scoped_total_params
    return CompressionReport(
        pattern=pattern,
        size_reduction_fraction=weight_share * (1.0 - packed / dense_bits),
        size_reduction_no_index_fraction=weight_share * (1.0 - N / M),
        inference_flops_reduction_fraction=report.ff_flops_share * (1.0 - N / M),
        index_bits_per_kept=idx,
        overhead_bits_per_group=N * idx,
        value_bits=value_bits,
    )


# -- training FLOPs -------------------------------------------------------------


def refresh_flops(report: CostReport, phase: PhaseSpec) -> float:
    """Cost of re-ranking every FF weight: ~log2(group) comparisons per weight."""
    count = report.ff_weight_params
    # unstructured selection ranks each whole tensor instead of one M-group
    width = phase.active_pattern.group_m if phase.structured else report.ff_tensor_size
    return float(count * max(1, math.ceil(math.log2(max(2, width)))))


def step_flops(
    phase: PhaseSpec,
    recipe: Recipe,
    report: CostReport,
    batch_size: int = 1,
) -> float:
    """FLOPs of one training step under ``phase``.

    Decayed masks are charged dense FF cost since no multiply can be skipped.
    Straight-through recipes (SrSte) need the dense weight gradient, so only
    the forward and input-gradient passes shrink with density.
    """
    ff = report.flops["feed_forward"]
    other = report.total_flops - ff
    if phase.active_pattern is None or phase.mask_mode == "decayed":
        ff_cost = 3.0 * ff
    elif recipe is Recipe.SR_STE:
        ff_cost = ff * (2.0 * phase.density() + 1.0)
    else:
        ff_cost = 3.0 * ff * phase.density()
    cost = batch_size * (3.0 * other + ff_cost)
    if phase.refresh_mask:
        cost += refresh_flops(report, phase)
    return cost


def _segments(schedule: RecipeSchedule) -> list[tuple[int, PhaseSpec]]:
    """``(step_count, representative non-refresh phase)`` covering [0, n)."""
    r = schedule.recipe
    n, d, s = schedule.total_steps, schedule.dense_steps, schedule.finetune_steps
    target = schedule.target_pattern
    dense = PhaseSpec("dense")
    binary = PhaseSpec("finetune", target, "binary", 0.0, False)
    if r is Recipe.DENSE:
        return [(n, dense)]
    if r is Recipe.SR_STE:
        w = schedule.warmup_steps
        return [(w, dense), (n - w, PhaseSpec("decay", target, "binary", 0.0, False))]
    if r is Recipe.DENSE_SPARSE:
        return [(d, dense), (n - d, binary)]
    if r is Recipe.UNSTRUCTURED_ONE_SHOT:
        return [(d, dense), (n - d, PhaseSpec("finetune", target, "binary", 0.0, False, False))]
    W = schedule.decay_window
    if r is Recipe.MASK_DECAY:
        window = [(W, PhaseSpec("decay", target, "decayed", schedule.beta, False))]
    else:
        window = [
            (end - start, PhaseSpec("decay", pat, "binary", 0.0, False))
            for pat, start, end in structure_decay_phases(target, W)
        ]
    return [(d, dense), *window, (s, binary)]


def _refresh_steps(schedule: RecipeSchedule) -> list[tuple[int, PhaseSpec]]:
    """``(count, phase)`` for refresh steps, grouped by the phase they occur in."""
    r = schedule.recipe
    n, d = schedule.total_steps, schedule.dense_steps
    P = schedule.update_period
    target = schedule.target_pattern
    if r is Recipe.DENSE:
        return []
    if r is Recipe.SR_STE:
        w = schedule.warmup_steps
        span = n - w
        return [(-(-span // P), PhaseSpec("decay", target, "binary", 0.0, True))] if span else []
    if r in (Recipe.DENSE_SPARSE, Recipe.UNSTRUCTURED_ONE_SHOT):
        structured = r is Recipe.DENSE_SPARSE
        return [(1, PhaseSpec("finetune", target, "binary", 0.0, True, structured))] if d < n else []
    W = schedule.decay_window
    if r is Recipe.MASK_DECAY:
        return [(-(-W // P), PhaseSpec("decay", target, "decayed", schedule.beta, True))]
    out = []
    for pat, start, end in structure_decay_phases(target, W):
        multiples = -(-end // P) - -(-start // P)
        extra = 0 if start % P == 0 else 1
        out.append((multiples + extra, PhaseSpec("decay", pat, "binary", 0.0, True)))
    return out


def avg_training_flops(
    schedule: RecipeSchedule,
    report: CostReport,
    batch_size: int = 1,
) -> tuple[float, float]:
    """``(average FLOPs per step, total FLOPs)`` over the whole schedule."""
    total = 0.0
    for steps, phase in _segments(schedule):
        if steps:
            total += steps * step_flops(phase, schedule.recipe, report, batch_size)
    for count, phase in _refresh_steps(schedule):
        total += count * refresh_flops(report, phase)
    return total / schedule.total_steps, total


def avg_training_flops_by_enumeration(
    schedule: RecipeSchedule,
    report: CostReport,
    batch_size: int = 1,
) -> tuple[float, float]:
    """Reference path: sum :func:`step_flops` over every step's phase."""
    total = 0.0
    for step in range(schedule.total_steps):
        total += step_flops(phase_at(step, schedule), schedule.recipe, report, batch_size)
    return total / schedule.total_steps, total
