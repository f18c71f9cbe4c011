import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transmask.chunker import (chunk_count, coverage, overlap_add_tensor, padded_frames,
                               segment_tensor)
from transmask.tensor import ContractError, Tensor


@pytest.mark.parametrize("length,hop,padded,chunks", [(10, 4, 12, 2), (1, 1, 2, 1), (3, 8, 16, 1), (16, 8, 16, 1)])
def test_geometry_examples(length, hop, padded, chunks):
    assert padded_frames(length, hop) == padded
    assert chunk_count(length, hop) == chunks


def test_segment_layout():
    x = Tensor(np.arange(10.0).reshape(1, 10))
    chunks = segment_tensor(x, 4).data  # [1, 8, 2]
    np.testing.assert_array_equal(chunks[0, :, 0], [0, 1, 2, 3, 4, 5, 6, 7])
    np.testing.assert_array_equal(chunks[0, :, 1], [4, 5, 6, 7, 8, 9, 0, 0])


def test_coverage():
    np.testing.assert_array_equal(coverage(3, 2), [1, 1, 2, 2, 2, 2, 1, 1])


@pytest.mark.parametrize("hop", [1, 2, 4, 8])
def test_round_trip_exhaustive(f64, hop):
    rng = np.random.default_rng(hop)
    for length in range(1, 201):
        x = rng.standard_normal((2, length))
        back = overlap_add_tensor(segment_tensor(Tensor(x), hop), hop, length).data
        assert np.array_equal(back, x)


def test_overlap_add_rejects_bad_geometry():
    with pytest.raises(ContractError):
        overlap_add_tensor(Tensor(np.zeros((1, 4, 3))), 2, 20)
    with pytest.raises(ContractError):
        overlap_add_tensor(Tensor(np.zeros((1, 5, 3))), 2, 7)


@settings(max_examples=50, deadline=None)
@given(length=st.integers(1, 60), hop=st.sampled_from([1, 2, 3, 5]), a=st.floats(-3, 3), seed=st.integers(0, 999))
def test_segment_is_linear(length, hop, a, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2, length))
    with_f64 = lambda v: segment_tensor(Tensor(v, dtype=np.float64), hop).data
    np.testing.assert_allclose(with_f64(a * x + y), a * with_f64(x) + with_f64(y), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(length=st.integers(1, 60), hop=st.integers(1, 6))
def test_every_frame_lands_in_one_or_two_chunks(length, hop):
    counts = coverage(chunk_count(length, hop), hop)
    assert set(counts.tolist()) <= {1, 2}
    assert counts.size == padded_frames(length, hop)
