"""Pre-norm encoder-decoder transformer with maskable feed-forward weights,
plus the synthetic sequence-reversal task used in place of a real corpus."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .nm import NmPattern, SparsityMask, masked_forward, straight_through
from .tensor import (
    Tensor,
    add,
    embedding_lookup,
    layer_norm,
    matmul,
    no_grad,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
)

PAD, BOS, EOS = 0, 1, 2
FIRST_TOKEN = 3


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    d_model: int = 64
    d_ff: int = 256
    heads: int = 4
    vocab: int = 32
    max_len: int = 32
    sparsify_ff_only: bool = True

    def __post_init__(self):
        for name in ("enc_layers", "dec_layers", "d_ff"):
            if getattr(self, name) < 0:
                raise ValueError(f"model.{name} must be non-negative, got {getattr(self, name)}")
        for name in ("d_model", "heads", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ValueError(f"model.d_model={self.d_model} is not divisible by model.heads={self.heads}")
        if self.vocab < 4:
            raise ValueError("model.vocab must be >= 4 (PAD, BOS, EOS and one real token)")
        if not self.sparsify_ff_only:
            raise ValueError("model.sparsify_ff_only is fixed to true")

    @classmethod
    def large(cls) -> ModelConfig:
        """The 6+6 layer, 1024/4096 translation model used for cost comparisons."""
        return cls(enc_layers=6, dec_layers=6, d_model=1024, d_ff=4096, heads=16, vocab=32000, max_len=256)


@dataclass
class SparseEntry:
    layer_id: str
    param: str
    axis: int = 0
    mask: SparsityMask | None = None
    straight_through: bool = False


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class Transformer:
    """Parameters live in ``self.params`` (name -> Tensor) in a fixed order.

    ``self.registry`` lists the two feed-forward matrices of every block; they
    are the only weights a mask can touch.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.registry: list[SparseEntry] = []
        self._pos = sinusoidal_positions(c.max_len, c.d_model)

        def dense(name, fan_in, fan_out):
            std = np.sqrt(2.0 / (fan_in + fan_out))
            self._param(f"{name}.w", rng.normal(0.0, std, (fan_in, fan_out)))
            self._param(f"{name}.b", np.zeros(fan_out))

        def norm(name):
            self._param(f"{name}.g", np.ones(c.d_model))
            self._param(f"{name}.b", np.zeros(c.d_model))

        def attention(name):
            for proj in ("q", "k", "v", "o"):
                dense(f"{name}.{proj}", c.d_model, c.d_model)

        def ff(layer):
            dense(f"{layer}.ff1", c.d_model, c.d_ff)
            dense(f"{layer}.ff2", c.d_ff, c.d_model)
            self.registry.append(SparseEntry(f"{layer}.ff1", f"{layer}.ff1.w"))
            self.registry.append(SparseEntry(f"{layer}.ff2", f"{layer}.ff2.w"))

        self._param("src_embed", rng.normal(0.0, 1.0, (c.vocab, c.d_model)))
        self._param("tgt_embed", rng.normal(0.0, 1.0, (c.vocab, c.d_model)))
        for i in range(c.enc_layers):
            layer = f"enc{i}"
            norm(f"{layer}.ln1")
            attention(f"{layer}.self")
            norm(f"{layer}.ln2")
            ff(layer)
        norm("enc_out_ln")
        for i in range(c.dec_layers):
            layer = f"dec{i}"
            norm(f"{layer}.ln1")
            attention(f"{layer}.self")
            norm(f"{layer}.ln2")
            attention(f"{layer}.cross")
            norm(f"{layer}.ln3")
            ff(layer)
        norm("dec_out_ln")
        dense("out", c.d_model, c.vocab)
        self._by_param = {e.param: e for e in self.registry}

    def _param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.ascontiguousarray(value, dtype=np.float64), requires_grad=True)

    # -- sparsity plumbing --------------------------------------------------

    def check_pattern(self, pattern: NmPattern) -> None:
        """Every registered weight must split into whole M-groups along its grouping axis."""
        for e in self.registry:
            shape = self.params[e.param].shape
            if shape[e.axis] % pattern.group_m:
                raise ValueError(
                    f"layer {e.layer_id}: grouping axis length {shape[e.axis]} (weight {shape}) "
                    f"is not divisible by M={pattern.group_m}"
                )

    def clear_masks(self) -> None:
        for e in self.registry:
            e.mask = None
            e.straight_through = False

    def weight(self, name: str) -> Tensor:
        w = self.params[name]
        entry = self._by_param.get(name)
        if entry is None or entry.mask is None:
            return w
        if entry.straight_through:
            return straight_through(w, entry.mask)
        return masked_forward(w, entry.mask)

    # -- forward --------------------------------------------------------------

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return add(matmul(x, self.weight(f"{name}.w")), self.params[f"{name}.b"])

    def _norm(self, x: Tensor, name: str) -> Tensor:
        return layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _attend(self, xq: Tensor, xkv: Tensor, name: str, allowed: np.ndarray) -> Tensor:
        B, Lq, D = xq.shape
        Lk = xkv.shape[1]
        H = self.config.heads
        dh = D // H
        q = transpose(reshape(self._linear(xq, f"{name}.q"), (B, Lq, H, dh)), (0, 2, 1, 3))
        k = transpose(reshape(self._linear(xkv, f"{name}.k"), (B, Lk, H, dh)), (0, 2, 3, 1))
        v = transpose(reshape(self._linear(xkv, f"{name}.v"), (B, Lk, H, dh)), (0, 2, 1, 3))
        scores = scale(matmul(q, k), 1.0 / np.sqrt(dh))
        probs = softmax(scores, axis=-1, mask=allowed)
        ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (B, Lq, D))
        return self._linear(ctx, f"{name}.o")

    def _feed_forward(self, x: Tensor, layer: str) -> Tensor:
        return self._linear(relu(self._linear(x, f"{layer}.ff1")), f"{layer}.ff2")

    def _embed(self, ids: np.ndarray, table: str) -> Tensor:
        B, L = ids.shape
        if L > self.config.max_len:
            raise ValueError(f"sequence length {L} exceeds model.max_len={self.config.max_len}")
        pos = Tensor(np.broadcast_to(self._pos[:L], (B, L, self.config.d_model)).copy())
        return add(embedding_lookup(self.params[table], ids), pos)

    def encode(self, src: np.ndarray) -> tuple[Tensor, np.ndarray]:
        src = np.asarray(src)
        key_ok = (src != PAD)[:, None, None, :]
        x = self._embed(src, "src_embed")
        for i in range(self.config.enc_layers):
            layer = f"enc{i}"
            x = add(x, self._self_block(x, layer, key_ok))
            x = add(x, self._feed_forward(self._norm(x, f"{layer}.ln2"), layer))
        return self._norm(x, "enc_out_ln"), key_ok

    def _self_block(self, x: Tensor, layer: str, allowed: np.ndarray) -> Tensor:
        h = self._norm(x, f"{layer}.ln1")
        return self._attend(h, h, f"{layer}.self", allowed)

    def decode(self, memory: Tensor, mem_ok: np.ndarray, tgt_in: np.ndarray) -> Tensor:
        tgt_in = np.asarray(tgt_in)
        L = tgt_in.shape[1]
        causal = np.tril(np.ones((L, L), dtype=bool))[None, None]
        self_ok = causal & (tgt_in != PAD)[:, None, None, :]
        y = self._embed(tgt_in, "tgt_embed")
        for i in range(self.config.dec_layers):
            layer = f"dec{i}"
            y = add(y, self._self_block(y, layer, self_ok))
            y = add(y, self._attend(self._norm(y, f"{layer}.ln2"), memory, f"{layer}.cross", mem_ok))
            y = add(y, self._feed_forward(self._norm(y, f"{layer}.ln3"), layer))
        return self._linear(self._norm(y, "dec_out_ln"), "out")

    def forward(self, src: np.ndarray, tgt_in: np.ndarray) -> Tensor:
        """Logits of shape ``(B, L_tgt, vocab)``."""
        memory, mem_ok = self.encode(src)
        return self.decode(memory, mem_ok, tgt_in)

    def greedy_decode(self, src: np.ndarray, steps: int) -> np.ndarray:
        """Greedy continuation from BOS for ``steps`` tokens, shape ``(B, steps)``."""
        with no_grad():
            memory, mem_ok = self.encode(src)
            seq = np.full((len(src), 1), BOS, dtype=np.int64)
            for _ in range(steps):
                logits = self.decode(memory, mem_ok, seq).data
                nxt = logits[:, -1].argmax(axis=-1)
                seq = np.concatenate([seq, nxt[:, None]], axis=1)
        return seq[:, 1:]

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = arr.copy()


def build_model(config: ModelConfig, target: NmPattern | None = None, seed: int = 0) -> Transformer:
    model = Transformer(config, seed=seed)
    if target is not None:
        model.check_pattern(target)
    return model


# -- synthetic task ---------------------------------------------------------------


@dataclass(frozen=True)
class ToyTask:
    seed: int = 0
    vocab: int = 32
    min_len: int = 8
    max_len: int = 16
    n_train: int = 10000
    n_val: int = 1000

    def __post_init__(self):
        if self.vocab <= FIRST_TOKEN:
            raise ValueError("task.vocab must leave room for real tokens above PAD/BOS/EOS")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"task length range [{self.min_len}, {self.max_len}] is invalid")
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError("task split sizes must be positive")


@dataclass
class TaskData:
    train: list[np.ndarray] = field(default_factory=list)
    val: list[np.ndarray] = field(default_factory=list)


def reverse_target(source) -> np.ndarray:
    source = np.asarray(source, dtype=np.int64)
    return np.concatenate([[BOS], source[::-1], [EOS]]).astype(np.int64)


def generate_task(task: ToyTask, model_max_len: int | None = None) -> TaskData:
    """Unique random sources; the first ``n_train`` go to train, the next ``n_val`` to val."""
    if model_max_len is not None and task.max_len >= model_max_len:
        raise ValueError(
            f"task.max_len={task.max_len} must be below model.max_len={model_max_len} "
            "(BOS/EOS take one position)"
        )
    space = sum((task.vocab - FIRST_TOKEN) ** L for L in range(task.min_len, task.max_len + 1))
    need = task.n_train + task.n_val
    if space < need:
        raise ValueError(f"only {space} distinct sources exist, {need} requested")
    rng = np.random.default_rng(task.seed)
    seen: set[bytes] = set()
    out: list[np.ndarray] = []
    while len(out) < need:
        L = int(rng.integers(task.min_len, task.max_len + 1))
        src = rng.integers(FIRST_TOKEN, task.vocab, size=L).astype(np.int64)
        key = src.tobytes()
        if key in seen:
            continue
        seen.add(key)
        out.append(src)
    return TaskData(out[: task.n_train], out[task.n_train :])


def make_batch(sources: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Padded ``(src, tgt_in, tgt_out)``; the encoder sees the source followed by EOS."""
    L = max(len(s) for s in sources) + 1
    B = len(sources)
    src = np.full((B, L), PAD, dtype=np.int64)
    tgt_in = np.full((B, L), PAD, dtype=np.int64)
    tgt_out = np.full((B, L), PAD, dtype=np.int64)
    for i, s in enumerate(sources):
        n = len(s)
        src[i, :n] = s
        src[i, n] = EOS
        t = reverse_target(s)
        tgt_in[i, : n + 1] = t[:-1]
        tgt_out[i, : n + 1] = t[1:]
    return src, tgt_in, tgt_out
