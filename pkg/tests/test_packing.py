import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from nativevit.ingest import PatchGrid
from nativevit.packing import PackedBatch, SegmentMask, attention_mask, pack, unpack


def seqs(lengths, width=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [(PatchGrid(1, 1, n), torch.randn(n, width, generator=g)) for n in lengths]


def test_boundaries_are_prefix_sums():
    b = pack(seqs([3, 5, 2]))
    assert b.boundaries.tolist() == [0, 3, 8, 10]
    assert b.lengths.tolist() == [3, 5, 2]
    assert [t.shape[0] for t in unpack(b)] == [3, 5, 2]


def test_single_sequence_identity():
    s = seqs([7])
    b = pack(s)
    assert b.boundaries.tolist() == [0, 7]
    assert torch.equal(b.tokens, s[0][1])


def test_slice_round_trip_bit_equal():
    s = seqs([4, 1, 6], seed=3)
    b = pack(s)
    for k, (_, m) in enumerate(s):
        assert torch.equal(b.segment(k), m)


def test_length_one_sequence():
    assert [t.shape[0] for t in unpack(pack(seqs([1])))] == [1]


def test_positions_follow_grids():
    b = pack([(PatchGrid(1, 2, 3), torch.zeros(6, 2)), (PatchGrid(2, 1, 2), torch.zeros(4, 2))])
    assert b.positions[:6].tolist() == [[0, r, c] for r in range(2) for c in range(3)]
    assert b.positions[6:].tolist() == [[t, 0, c] for t in range(2) for c in range(2)]
    # time folds into the row axis using each sample's own row count
    assert b.rope_axes()[6:, 0].tolist() == [0, 0, 1, 1]


def test_mask_examples():
    m = SegmentMask([0, 3, 8, 10])
    assert m(0, 2) and not m(2, 3) and m(8, 9)
    with pytest.raises(IndexError):
        m(0, 10)


def test_single_segment_all_true():
    assert attention_mask(pack(seqs([5]))).dense().all()


def test_unit_segments_give_identity():
    np.testing.assert_array_equal(attention_mask(pack(seqs([1] * 6))).dense(), np.eye(6, dtype=bool))


@pytest.mark.parametrize("bounds", [[0, 3, 3, 5], [1, 5], [0, 4, 2], [0, 4]])
def test_corrupted_boundaries_rejected(bounds):
    with pytest.raises(ValueError):
        PackedBatch(torch.zeros(5, 2), np.array(bounds), [PatchGrid(1, 1, 1)] * (len(bounds) - 1),
                    torch.zeros(5, 3, dtype=torch.int64))


def test_mismatched_width_rejected():
    with pytest.raises(ValueError):
        pack([(PatchGrid(1, 1, 2), torch.zeros(2, 3)), (PatchGrid(1, 1, 2), torch.zeros(2, 4))])


def test_empty_rejected():
    with pytest.raises(ValueError):
        pack([])


@given(st.lists(st.integers(1, 9), min_size=1, max_size=8))
def test_pack_unpack_identity_and_block_diagonal(lengths):
    s = seqs(lengths, seed=len(lengths))
    b = pack(s)
    again = pack([(g, t) for (g, _), t in zip(s, unpack(b))])
    assert torch.equal(again.tokens, b.tokens) and again.boundaries.tolist() == b.boundaries.tolist()
    dense = attention_mask(b).dense()
    seg = np.repeat(np.arange(len(lengths)), lengths)
    np.testing.assert_array_equal(dense, seg[:, None] == seg[None, :])
