import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nmsparse import storage
from nmsparse.nm import NmPattern, SparsityMask, build_mask

PATTERNS = ["2:4", "1:4", "4:8", "2:8", "15:16", "8:16", "1:16", "1:2", "4:4"]


def masked(w, mask):
    # +0.0 at pruned slots so a pruned -0.0 cannot spoil bit equality
    return np.where(mask.kept, w, 0.0)


@given(
    st.sampled_from(PATTERNS),
    st.integers(1, 4),
    st.integers(1, 5),
    st.sampled_from([0, 1]),
    st.integers(0, 2**31),
)
@settings(max_examples=150, deadline=None)
def test_roundtrip_bit_exact(text, groups, other, axis, seed):
    p = NmPattern.parse(text)
    shape = [other, other]
    shape[axis] = p.group_m * groups
    w = np.random.default_rng(seed).standard_normal(shape)
    w[0, 0] = -0.0
    mask = build_mask(w, p, axis=axis)
    packed = storage.pack(w, mask, p, axis=axis)
    out = storage.unpack(storage.from_bytes(storage.to_bytes(packed)))
    assert out.tobytes() == masked(w, mask).tobytes()


def test_values_and_indices_layout():
    w = np.zeros((16, 1))
    w[5, 0] = 2.5
    p = NmPattern(1, 16)
    packed = storage.pack(w, build_mask(w, p), p, value_bits=32)
    assert packed.values.tolist() == [2.5]
    assert packed.indices.tolist() == [[5]]
    assert storage.packed_size_bits(packed) == storage.header_bits(2) + 32 + 8  # 4 index bits padded to a byte


def test_size_arithmetic():
    p = NmPattern(1, 16)
    assert storage.size_bits_for((512, 1), p, 32) == 32 * (32 + 4) + storage.header_bits(2)
    body = storage.size_bits_for((4, 1), NmPattern(2, 4), 32) - storage.header_bits(2)
    assert body == 2 * 32 + 8  # 2 values + 2x2 index bits padded to a byte
    ratio = (storage.size_bits_for((512, 1), p, 32) - storage.header_bits(2)) / (512 * 32)
    assert ratio == pytest.approx(36 / 512)


def test_all_kept_pattern_is_not_smaller():
    p = NmPattern(4, 4)
    w = np.ones((8, 8))
    packed = storage.pack(w, build_mask(w, p), p, value_bits=32)
    assert storage.packed_size_bits(packed) >= w.size * 32


def test_size_independent_of_values():
    p = NmPattern(2, 8)
    rng = np.random.default_rng(0)
    sizes = set()
    for _ in range(5):
        w = rng.standard_normal((16, 3))
        sizes.add(len(storage.to_bytes(storage.pack(w, build_mask(w, p), p))))
    assert sizes == {storage.size_bits_for((16, 3), p) // 8}


def test_serialization_deterministic_and_header():
    w = np.random.default_rng(1).standard_normal((8, 4))
    p = NmPattern(2, 4)
    a = storage.to_bytes(storage.pack(w, build_mask(w, p), p))
    b = storage.to_bytes(storage.pack(w.copy(), build_mask(w, p), p))
    assert a == b
    assert a[:4] == b"NMPK" and a[4] == 1 and a[5] == 64


def test_pack_rejects_bad_masks():
    p = NmPattern(2, 4)
    w = np.ones((4, 1))
    with pytest.raises(ValueError):
        storage.pack(w, SparsityMask(np.array([[1.0], [1.0], [1.0], [0.0]]), "binary", 0.0), p)
    with pytest.raises(ValueError, match="binary"):
        storage.pack(w, build_mask(w, p, mode="decayed", decay_value=0.5), p)


def test_from_bytes_rejects_garbage():
    with pytest.raises(ValueError):
        storage.from_bytes(b"XXXX" + bytes(20))
    w = np.ones((4, 2))
    p = NmPattern(1, 4)
    blob = storage.to_bytes(storage.pack(w, build_mask(w, p), p))
    with pytest.raises(ValueError):
        storage.from_bytes(blob + b"\0")


def test_float32_values(tmp_path):
    w = np.random.default_rng(2).standard_normal((16, 2))
    p = NmPattern(4, 16)
    mask = build_mask(w, p)
    path = storage.save(tmp_path / "w.nmpk", storage.pack(w, mask, p, value_bits=32))
    out = storage.unpack(storage.load(path))
    np.testing.assert_array_equal(out, masked(w, mask).astype(np.float32).astype(np.float64))
