import math

import numpy as np
import pytest

from patchproto import (
    EmbeddingGrid,
    MemoryBank,
    ScoreMap,
    build_bank,
    read_score_map,
    score_grid,
    softmax_normalize,
    write_score_map,
)
from patchproto.errors import DimensionMismatchError, FormatError, ParameterError
from patchproto.grids import MAGIC_SCORE_MAP, _write_container

from conftest import make_grid


def oracle_knn_mean(bank_rows, query, k):
    q = query.astype(np.float64)
    sq = sorted(float(np.sum((r.astype(np.float64) - q) ** 2)) for r in bank_rows)
    total = 0.0
    for v in sq[:k]:
        total += math.sqrt(v)
    return total / k


# --- score_grid -------------------------------------------------------------

def test_score_grid_zero_for_bank_members(rng):
    g = make_grid(rng, 3, 4, 5)
    sm = score_grid(g, build_bank([g]))
    assert sm.raw.shape == (3, 4)
    assert (sm.raw == 0.0).all()
    assert sm.normalized is None


def test_score_grid_two_patches_one_vector_bank():
    p = np.array([1.0, 0.0, 0.0], dtype=np.float32)
    q = np.array([4.0, 4.0, 0.0], dtype=np.float32)
    grid = EmbeddingGrid(np.stack([p, q])[None, :, :])  # 1x2x3
    bank = MemoryBank(p[None, :], source_count=1, coreset_fraction=1.0)
    assert score_grid(grid, bank).raw.tolist() == [[0.0, 5.0]]


def test_score_grid_matches_brute_force(rng):
    g = make_grid(rng, 3, 3, 6, scale=2.0)
    rows = (rng.standard_normal((20, 6)) * 2).astype(np.float32)
    bank = MemoryBank(rows, source_count=20, coreset_fraction=1.0)
    for k in (1, 2, 5):
        sm = score_grid(g, bank, k=k)
        want = [oracle_knn_mean(rows, p, k) for p in g.patches()]
        assert sm.raw.reshape(-1).tolist() == want


def test_score_grid_channel_mismatch(rng):
    g = make_grid(rng, 2, 2, 3)
    bank = MemoryBank(np.zeros((4, 5), np.float32), source_count=4, coreset_fraction=1.0)
    with pytest.raises(DimensionMismatchError):
        score_grid(g, bank)


# --- softmax_normalize ------------------------------------------------------

def test_softmax_uniform_scores():
    sm = softmax_normalize(ScoreMap(raw=np.full((2, 2), 3.7)))
    np.testing.assert_array_equal(sm.normalized, np.full((2, 2), 0.25))


def test_softmax_single_patch():
    sm = softmax_normalize(ScoreMap(raw=np.array([[9.0]])))
    assert sm.normalized.tolist() == [[1.0]]


def test_softmax_log_three_example():
    sm = softmax_normalize(ScoreMap(raw=np.array([[0.0, math.log(3.0)]])))
    np.testing.assert_allclose(sm.normalized, [[0.25, 0.75]], rtol=1e-12)


def test_softmax_temperature_sharpens():
    raw = ScoreMap(raw=np.array([[0.0, math.log(3.0)]]))
    sm = softmax_normalize(raw, temperature=0.5)  # exponents 0 and 2*log 3
    np.testing.assert_allclose(sm.normalized, [[0.1, 0.9]], rtol=1e-12)
    flat = softmax_normalize(raw, temperature=100.0)
    assert abs(flat.normalized[0, 1] - flat.normalized[0, 0]) < 0.01


def test_softmax_sums_to_one_and_shift_invariant(rng):
    for _ in range(50):
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        raw = rng.uniform(0, 10, (h, w))
        t = float(rng.uniform(0.05, 5.0))
        sm = softmax_normalize(ScoreMap(raw=raw), temperature=t)
        assert abs(float(sm.normalized.sum()) - 1.0) <= 1e-6
        shifted = softmax_normalize(ScoreMap(raw=raw + 4.25), temperature=t)
        np.testing.assert_allclose(shifted.normalized, sm.normalized, rtol=1e-9)


def test_softmax_preserves_ordering(rng):
    raw = rng.uniform(0, 5, (4, 4))
    sm = softmax_normalize(ScoreMap(raw=raw))
    assert (np.argsort(raw.reshape(-1)) == np.argsort(sm.normalized.reshape(-1))).all()


def test_softmax_extreme_gap_underflows_to_zero():
    # exp(-200) is below the f64 subnormal range after f32 quantization;
    # the normalized channel may legitimately contain exact zeros
    sm = softmax_normalize(ScoreMap(raw=np.array([[0.0, 200.0]])))
    assert sm.normalized[0, 1] == 1.0
    assert sm.normalized[0, 0] >= 0.0


def test_softmax_rejects_bad_temperature():
    sm = ScoreMap(raw=np.ones((2, 2)))
    with pytest.raises(ParameterError):
        softmax_normalize(sm, temperature=0.0)
    with pytest.raises(ParameterError):
        softmax_normalize(sm, temperature=-1.0)


# --- ScoreMap validation ----------------------------------------------------

def test_score_map_validation():
    with pytest.raises(ParameterError):
        ScoreMap(raw=np.ones(4))  # 1-D
    with pytest.raises(ParameterError):
        ScoreMap(raw=np.array([[-0.5, 1.0]]))
    with pytest.raises(ParameterError):
        ScoreMap(raw=np.array([[np.nan, 1.0]]))
    with pytest.raises(DimensionMismatchError):
        ScoreMap(raw=np.ones((2, 2)), normalized=np.full((1, 4), 0.25))
    with pytest.raises(ParameterError, match="sum"):
        ScoreMap(raw=np.ones((2, 2)), normalized=np.full((2, 2), 0.3))
    with pytest.raises(ParameterError):
        ScoreMap(raw=np.ones((1, 2)), normalized=np.array([[-0.25, 1.25]]))
    sm = ScoreMap(raw=np.ones((2, 3)))
    assert (sm.height, sm.width) == (2, 3)
    with pytest.raises(ValueError):
        sm.raw[0, 0] = 5.0  # read-only


# --- dump format ------------------------------------------------------------

def test_score_map_round_trip(tmp_path, rng):
    raw = rng.uniform(0, 4, (5, 7))
    sm = softmax_normalize(ScoreMap(raw=raw), temperature=0.7)
    path = tmp_path / "m.ppsm"
    write_score_map(sm, path)
    back = read_score_map(path)
    # payload is f32; the read must reproduce the quantized values exactly
    np.testing.assert_array_equal(back.raw, raw.astype(np.float32).astype(np.float64))
    np.testing.assert_array_equal(
        back.normalized, sm.normalized.astype(np.float32).astype(np.float64)
    )
    # rewriting what was read is byte-identical
    path2 = tmp_path / "m2.ppsm"
    write_score_map(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_write_requires_normalized(tmp_path):
    with pytest.raises(ParameterError, match="normalized"):
        write_score_map(ScoreMap(raw=np.ones((2, 2))), tmp_path / "m.ppsm")


def test_read_rejects_wrong_channel_count(tmp_path):
    path = tmp_path / "bad.ppsm"
    _write_container(path, MAGIC_SCORE_MAP, np.zeros((2, 2, 3), np.float32))
    with pytest.raises(FormatError, match="channels"):
        read_score_map(path)


def test_read_rejects_embedding_magic(tmp_path, rng):
    from patchproto import write_embedding_file

    path = tmp_path / "g.ppe"
    write_embedding_file(make_grid(rng, 2, 2, 2), path)
    with pytest.raises(FormatError, match="magic"):
        read_score_map(path)
