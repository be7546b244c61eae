import numpy as np
import pytest

from nmsparse import model as model_mod
from nmsparse.model import (
    BOS,
    EOS,
    PAD,
    ModelConfig,
    ToyTask,
    build_model,
    generate_task,
    make_batch,
    reverse_target,
)
from nmsparse.nm import NmPattern, build_mask
from nmsparse.tensor import backward, cross_entropy, no_grad

TINY = ModelConfig(enc_layers=1, dec_layers=1, d_model=16, d_ff=32, heads=2, vocab=12, max_len=12)


def small_batch(cfg=TINY, n=3, seed=0):
    data = generate_task(ToyTask(seed=seed, vocab=cfg.vocab, min_len=3, max_len=6, n_train=n, n_val=1), cfg.max_len)
    return make_batch(data.train)


def test_registry_holds_only_ff_weights():
    m = build_model(ModelConfig())
    names = sorted(e.param for e in m.registry)
    assert names == sorted(f"{side}{i}.ff{k}.w" for side in ("enc", "dec") for i in range(2) for k in (1, 2))
    assert m.params["enc0.ff1.w"].shape == (64, 256)
    assert m.params["enc0.ff2.w"].shape == (256, 64)


def test_pattern_divisibility_checked_at_build():
    build_model(ModelConfig(), NmPattern(1, 16))
    with pytest.raises(ValueError, match="ff"):
        build_model(ModelConfig(d_model=48, heads=4), NmPattern(1, 32))


def test_config_validation():
    with pytest.raises(ValueError, match="heads"):
        ModelConfig(d_model=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab=3)


def test_forward_shapes_and_determinism():
    src, tgt_in, _ = small_batch()
    a = build_model(TINY, seed=3).forward(src, tgt_in).data
    b = build_model(TINY, seed=3).forward(src, tgt_in).data
    assert a.shape == (3, tgt_in.shape[1], TINY.vocab)
    np.testing.assert_array_equal(a, b)


def test_decoder_is_causal():
    src, tgt_in, _ = small_batch()
    m = build_model(TINY, seed=1)
    base = m.forward(src, tgt_in).data
    changed = tgt_in.copy()
    changed[:, -1] = 5
    out = m.forward(src, changed).data
    np.testing.assert_allclose(out[:, :-1], base[:, :-1], atol=1e-12)


def test_padding_does_not_leak():
    m = build_model(TINY, seed=2)
    src, tgt_in, _ = small_batch(n=1)
    padded_src = np.concatenate([src, np.full((1, 3), PAD)], axis=1)
    a = m.forward(src, tgt_in).data
    b = m.forward(padded_src, tgt_in).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_all_ones_mask_matches_no_mask():
    src, tgt_in, _ = small_batch()
    m = build_model(TINY, seed=4)
    base = m.forward(src, tgt_in).data
    for e in m.registry:
        e.mask = build_mask(m.params[e.param], NmPattern(4, 4))
    np.testing.assert_array_equal(m.forward(src, tgt_in).data, base)


def test_full_model_gradient_check():
    src, tgt_in, tgt_out = small_batch()
    m = build_model(TINY, seed=5)
    for e in m.registry:
        e.mask = build_mask(m.params[e.param], NmPattern(2, 4), mode="decayed", decay_value=0.4)

    def loss():
        return cross_entropy(m.forward(src, tgt_in), tgt_out)

    backward(loss())
    rng = np.random.default_rng(0)
    names = list(m.params)
    worst = 0.0
    for _ in range(60):
        p = m.params[names[rng.integers(len(names))]]
        i = rng.integers(p.data.size)
        flat, orig, h = p.data.reshape(-1), p.data.reshape(-1)[i], 1e-5
        with no_grad():
            flat[i] = orig + h
            fp = float(loss().data)
            flat[i] = orig - h
            fm = float(loss().data)
        flat[i] = orig
        a, n = p.grad.reshape(-1)[i], (fp - fm) / (2 * h)
        worst = max(worst, abs(a - n) / max(abs(a), abs(n), 1e-6))
    assert worst < 1e-4


def test_reverse_target_and_batch_layout():
    np.testing.assert_array_equal(reverse_target([5, 6, 7]), [BOS, 7, 6, 5, EOS])
    src, tgt_in, tgt_out = make_batch([np.array([5, 6, 7]), np.array([8])])
    np.testing.assert_array_equal(src, [[5, 6, 7, EOS], [8, EOS, PAD, PAD]])
    np.testing.assert_array_equal(tgt_in, [[BOS, 7, 6, 5], [BOS, 8, PAD, PAD]])
    np.testing.assert_array_equal(tgt_out, [[7, 6, 5, EOS], [8, EOS, PAD, PAD]])


def test_generate_task_unique_and_deterministic():
    t = ToyTask(seed=7, n_train=300, n_val=50)
    a, b = generate_task(t), generate_task(t)
    keys = [s.tobytes() for s in a.train + a.val]
    assert len(set(keys)) == len(keys) == 350
    assert all(np.array_equal(x, y) for x, y in zip(a.train, b.train))
    assert all(8 <= len(s) <= 16 and s.min() >= 3 and s.max() < 32 for s in a.train)


def test_generate_task_rejects_overlong_sequences():
    with pytest.raises(ValueError, match="max_len"):
        generate_task(ToyTask(max_len=32), model_max_len=32)
    with pytest.raises(ValueError, match="distinct"):
        generate_task(ToyTask(vocab=4, min_len=1, max_len=2, n_train=5, n_val=1))


def test_state_dict_roundtrip():
    a, b = build_model(TINY, seed=1), build_model(TINY, seed=2)
    b.load_state_dict(a.state_dict())
    src, tgt_in, _ = small_batch()
    np.testing.assert_array_equal(a.forward(src, tgt_in).data, b.forward(src, tgt_in).data)
    bad = dict(a.state_dict())
    bad["out.b"] = np.zeros(3)
    with pytest.raises(ValueError):
        b.load_state_dict(bad)


def test_greedy_decode_shape():
    src, _, _ = small_batch()
    out = build_model(TINY).greedy_decode(src, 5)
    assert out.shape == (3, 5)


def test_matmul_count_matches_cost_model(monkeypatch):
    """Count MACs of every matmul in a real forward pass and compare with the analytic model."""
    from nmsparse import cost, tensor

    macs = []

    def counting(a, b):
        out = tensor.matmul(a, b)
        macs.append(out.data.size * a.shape[-1])
        return out

    monkeypatch.setattr(model_mod, "matmul", counting)
    L = 9
    cfg = ModelConfig(enc_layers=2, dec_layers=1, d_model=32, d_ff=64, heads=4, vocab=20, max_len=16)
    ids = np.full((1, L), 5)
    build_model(cfg).forward(ids, ids)
    report = cost.count_costs(cfg, seq_len=L, vocab=cfg.vocab, scope="model")
    assert 2 * sum(macs) == report.total_flops
