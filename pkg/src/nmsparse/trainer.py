"""Training loop tying the model, a recipe schedule, the mask machinery and Adam/SGD."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Literal

import numpy as np

from . import cost
from .model import PAD, ModelConfig, TaskData, ToyTask, Transformer, build_model, generate_task, make_batch
from .nm import SrSteConfig, build_mask, build_unstructured_mask, mask_from_kept, sr_ste_decay
from .schedule import PhaseSpec, Recipe, RecipeSchedule, phase_at
from .tensor import backward, cross_entropy, no_grad

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "step",
    "phase_kind",
    "pattern",
    "decay_value",
    "train_loss",
    "val_loss",
    "token_acc",
    "seq_acc",
    "density",
    "cum_train_flops",
)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class OptimizerConfig:
    kind: Literal["adam", "sgd"] = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup_steps: int = 0
    finetune_final_lr: bool = True

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"optimizer.kind must be adam or sgd, got {self.kind!r}")
        if not self.lr > 0:
            raise ValueError(f"optimizer.lr must be positive, got {self.lr}")
        if self.warmup_steps < 0:
            raise ValueError("optimizer.warmup_steps must be non-negative")

    def lr_at(self, step: int, finetune_start: int | None = None) -> float:
        # constant after warmup; fine-tuning reuses the rate in force when it starts
        if self.finetune_final_lr and finetune_start is not None and step >= finetune_start:
            step = finetune_start
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        return self.lr


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    eval_interval: int | None = None  # defaults to the schedule's update_period
    eval_batch: int = 500
    debug_checks: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.eval_batch < 1:
            raise ValueError("batch sizes must be positive")
        if self.eval_interval is not None and self.eval_interval < 1:
            raise ValueError("train.eval_interval must be >= 1")


class Optimizer:
    """Adam or plain SGD over a name -> ndarray parameter dict, updated in place."""

    def __init__(self, config: OptimizerConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()} if config.kind == "adam" else {}
        self.v = {k: np.zeros_like(v) for k, v in params.items()} if config.kind == "adam" else {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.config
        self.t += 1
        if c.kind == "sgd":
            for k, g in grads.items():
                params[k] -= lr * g
            return
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            params[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


@dataclass
class TrainState:
    step: int
    model: Transformer
    optimizer: Optimizer
    rng: np.random.Generator
    kept: list[np.ndarray] | None = None
    mask_key: tuple | None = None
    cum_train_flops: float = 0.0


@dataclass
class RunResult:
    metrics: list[dict]
    model: Transformer
    final: dict
    checkpoint: Path | None = None
    extra: dict = field(default_factory=dict)


# -- masks ------------------------------------------------------------------------


def apply_phase(state: TrainState, phase: PhaseSpec, recipe: Recipe) -> bool:
    """Bring every registry mask in line with ``phase``; returns True if masks changed."""
    model = state.model
    if phase.active_pattern is None:
        if state.kept is not None or any(e.mask is not None for e in model.registry):
            model.clear_masks()
            state.kept = None
            state.mask_key = None
            return True
        return False

    refreshed = False
    if phase.refresh_mask or state.kept is None:
        kept = []
        for e in model.registry:
            w = model.params[e.param]
            if phase.structured:
                mask = build_mask(w, phase.active_pattern, axis=e.axis, name=e.layer_id)
            else:
                mask = build_unstructured_mask(w, phase.active_pattern.density())
            kept.append(mask.kept)
        state.kept = kept
        refreshed = True

    key = (phase.mask_mode, phase.decay_value)
    if refreshed or key != state.mask_key:
        ste = recipe is Recipe.SR_STE
        for e, kept in zip(model.registry, state.kept):
            e.mask = mask_from_kept(kept, phase.mask_mode, phase.decay_value)
            e.straight_through = ste
        state.mask_key = key
        return True
    return False


def bake_masks(model: Transformer) -> None:
    """Turn any decayed mask into the binary mask over the same kept set."""
    for e in model.registry:
        if e.mask is not None and e.mask.mask_mode != "binary":
            e.mask = mask_from_kept(e.mask.kept, "binary")
        e.straight_through = False


def check_masks(model: Transformer, phase: PhaseSpec) -> None:
    for e in model.registry:
        if phase.active_pattern is None:
            assert e.mask is None, f"{e.layer_id}: mask present in dense phase"
            continue
        m = e.mask
        assert m is not None, f"{e.layer_id}: no mask in sparse phase"
        assert m.mask_mode == phase.mask_mode and m.decay_value == phase.decay_value
        m.check(phase.active_pattern if phase.structured else None, axis=e.axis)


def mask_density(model: Transformer) -> float:
    kept = total = 0
    for e in model.registry:
        size = model.params[e.param].data.size
        total += size
        kept += size if e.mask is None else int(e.mask.kept.sum())
    return kept / total if total else 1.0


def effective_weights(model: Transformer) -> dict[str, np.ndarray]:
    return {
        e.param: model.params[e.param].data if e.mask is None else model.params[e.param].data * e.mask.values
        for e in model.registry
    }


# -- evaluation --------------------------------------------------------------------


def evaluate(model: Transformer, val: list[np.ndarray], batch: int = 500, greedy: bool = True) -> dict:
    """Teacher-forced loss/token accuracy and greedy exact-match accuracy over ``val``."""
    if not val:
        raise ValueError("evaluate: validation split is empty")
    nll_sum = 0.0
    correct = tokens = exact = 0
    with no_grad():
        for i in range(0, len(val), batch):
            src, tgt_in, tgt_out = make_batch(val[i : i + batch])
            logits = model.forward(src, tgt_in).data
            keep = tgt_out != PAD
            z = logits - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            picked = np.take_along_axis(logp, tgt_out[..., None], axis=-1)[..., 0]
            nll_sum -= float(picked[keep].sum())
            correct += int(((logits.argmax(axis=-1) == tgt_out) & keep).sum())
            tokens += int(keep.sum())
            if greedy:
                decoded = model.greedy_decode(src, tgt_out.shape[1])
                exact += int((((decoded == tgt_out) | ~keep).all(axis=1)).sum())
    out = {"val_loss": nll_sum / tokens, "token_acc": correct / tokens}
    out["seq_acc"] = exact / len(val) if greedy else float("nan")
    return out


# -- checkpoints ----------------------------------------------------------------------

CKPT_MAGIC = b"NMSF"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> Path:
    """Write ``NMSF`` | version u8 | config JSON | named little-endian float64 tensors."""
    path = Path(path)
    blob = json.dumps(config, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    path.write_bytes(b"".join(parts))
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an NMSF checkpoint")
    version, n = struct.unpack_from("<BI", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 9
    config = json.loads(buf[pos : pos + n])
    pos += n
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return config, tensors


# -- training -----------------------------------------------------------------------


def _metric_record(step, phase, train_loss, ev, model, cum_flops) -> dict:
    pattern = "dense" if phase.active_pattern is None else str(phase.active_pattern)
    return {
        "step": step,
        "phase_kind": phase.phase_kind,
        "pattern": pattern,
        "decay_value": phase.decay_value,
        "train_loss": train_loss,
        "val_loss": ev["val_loss"],
        "token_acc": ev["token_acc"],
        # seq_acc is only computed for the final record; JSON has no NaN
        "seq_acc": ev["seq_acc"] if np.isfinite(ev["seq_acc"]) else None,
        "density": mask_density(model),
        "cum_train_flops": cum_flops,
    }


def train(
    model_config: ModelConfig,
    task: ToyTask,
    schedule: RecipeSchedule,
    optimizer: OptimizerConfig = OptimizerConfig(),
    seed: int = 0,
    train_config: TrainConfig = TrainConfig(),
    out_dir: str | Path | None = None,
    data: TaskData | None = None,
    on_step: Callable[[TrainState, PhaseSpec], None] | None = None,
    config_echo: dict | None = None,
) -> RunResult:
    """Run one recipe end to end.

    Metrics go to ``out_dir/metrics.jsonl`` (one record per eval interval plus a
    final one) and the final parameters and masks to ``out_dir/checkpoint.nmsf``.
    Raises :class:`TrainingDiverged` on a non-finite loss; the error record is
    appended to the metrics file first.
    """
    sparse = schedule.recipe is not Recipe.DENSE
    model = build_model(model_config, schedule.target_pattern if sparse else None, seed=seed)
    data = data if data is not None else generate_task(task, model_config.max_len)
    if not data.train:
        raise ValueError("training split is empty")
    state = TrainState(
        step=0,
        model=model,
        optimizer=Optimizer(optimizer, model.state_dict()),
        rng=np.random.default_rng(seed + 1_000_003),
    )
    report = cost.count_costs(model_config, seq_len=task.max_len + 1, vocab=model_config.vocab, scope="model")
    srste = SrSteConfig(schedule.lambda_w)
    eval_every = train_config.eval_interval or schedule.update_period
    params = {k: t.data for k, t in model.params.items()}
    finetune_start = schedule.finetune_start if schedule.recipe in (Recipe.MASK_DECAY, Recipe.STRUCTURE_DECAY) else None

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_path / "metrics.jsonl", "w")

    def emit(rec: dict) -> None:
        metrics.append(rec)
        if metrics_file is not None:
            metrics_file.write(json.dumps(rec) + "\n")
            metrics_file.flush()

    metrics: list[dict] = []
    n_train = len(data.train)
    window_loss, window_count = 0.0, 0
    phase = phase_at(0, schedule)
    try:
        for step in range(schedule.total_steps):
            state.step = step
            phase = phase_at(step, schedule)
            if sparse:
                apply_phase(state, phase, schedule.recipe)
            if train_config.debug_checks:
                check_masks(model, phase)
            if on_step is not None:
                on_step(state, phase)

            idx = state.rng.integers(0, n_train, size=train_config.batch_size)
            src, tgt_in, tgt_out = make_batch([data.train[i] for i in idx])
            # overflow on the way to a non-finite loss is reported as divergence below
            with np.errstate(over="ignore", invalid="ignore"):
                loss = cross_entropy(model.forward(src, tgt_in), tgt_out, pad_id=PAD)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDiverged(step, value)
                for t in model.params.values():
                    t.grad = None
                backward(loss)
            grads = {k: t.grad for k, t in model.params.items() if t.grad is not None}
            lr = optimizer.lr_at(step, finetune_start)
            state.optimizer.step(params, grads, lr)
            if schedule.recipe is Recipe.SR_STE and phase.active_pattern is not None:
                for e in model.registry:
                    sr_ste_decay(params[e.param], e.mask, lr, srste)

            state.cum_train_flops += cost.step_flops(phase, schedule.recipe, report, train_config.batch_size)
            window_loss += value
            window_count += 1
            done = step + 1
            if done % eval_every == 0 and done < schedule.total_steps:
                ev = evaluate(model, data.val, train_config.eval_batch, greedy=False)
                emit(_metric_record(done, phase, window_loss / window_count, ev, model, state.cum_train_flops))
                window_loss, window_count = 0.0, 0
    except TrainingDiverged as exc:
        emit({"step": exc.step, "error": "diverged", "train_loss": str(exc.loss)})
        if metrics_file is not None:
            metrics_file.close()
        raise

    bake_masks(model)
    if sparse and phase.active_pattern is not None and phase.structured:
        for e in model.registry:
            e.mask.check(schedule.target_pattern, axis=e.axis)
    ev = evaluate(model, data.val, train_config.eval_batch, greedy=True)
    final_phase = phase if phase.mask_mode == "binary" else PhaseSpec(
        "finetune", phase.active_pattern, "binary", 0.0, False, phase.structured
    )
    final = _metric_record(
        schedule.total_steps,
        final_phase,
        window_loss / max(1, window_count),
        ev,
        model,
        state.cum_train_flops,
    )
    emit(final)

    ckpt = None
    if out_path is not None:
        metrics_file.close()
        tensors = dict(model.state_dict())
        for e in model.registry:
            if e.mask is not None:
                tensors[f"mask/{e.param}"] = e.mask.values
        echo = dict(config_echo or {})
        echo.setdefault("model", asdict(model_config))
        echo["final_step"] = schedule.total_steps
        ckpt = save_checkpoint(out_path / "checkpoint.nmsf", echo, tensors)
    return RunResult(metrics=metrics, model=model, final=final, checkpoint=ckpt)


def iter_metrics(path: str | Path) -> Iterable[dict]:
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)
