import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from nativevit.adapter import (IMAGE_END, IMAGE_START, Projector, VisionToken, arrange_with_markers,
                               arranged_from_json, arranged_to_json, mllm_resize, nearest_multiple,
                               pixel_shuffle_width, pixel_unshuffle_width, strip_markers, vision_tokens_for_llm)
from nativevit.ingest import BudgetError, VisualSample


def image(h, w):
    return VisualSample(np.random.default_rng(0).random((1, 3, h, w), dtype=np.float32))


class TestUnshuffle:
    def test_shape(self):
        assert pixel_unshuffle_width(torch.zeros(2, 4, 8)).shape == (2, 2, 16)

    def test_pairs_concatenate(self):
        x = torch.arange(2 * 4 * 3).reshape(2, 4, 3)
        y = pixel_unshuffle_width(x)
        assert torch.equal(y[1, 1], torch.cat([x[1, 2], x[1, 3]]))

    def test_inverse_bit_exact(self):
        x = torch.randn(3, 6, 5)
        assert torch.equal(pixel_shuffle_width(pixel_unshuffle_width(x)), x)

    def test_constant(self):
        y = pixel_unshuffle_width(torch.full((2, 2, 4), 0.25))
        assert torch.equal(y[..., :4], y[..., 4:]) and torch.all(y == 0.25)

    def test_odd_width(self):
        with pytest.raises(ValueError):
            pixel_unshuffle_width(torch.zeros(2, 3, 4))


class TestArrange:
    def test_two_by_three(self):
        seq = [str(e) for e in arrange_with_markers(2, 3)]
        assert seq == ["<image_start>", "x<1,1>", "x<1,2>", "x<1,3>", "<line-1>",
                       "x<2,1>", "x<2,2>", "x<2,3>", "<line-2>", "<image_end>"]

    def test_minimal(self):
        assert arrange_with_markers(1, 1) == [IMAGE_START, VisionToken(1, 1), "<line-1>", IMAGE_END]

    @given(st.integers(1, 40), st.integers(1, 40))
    def test_length_law_and_order(self, h, w):
        seq = arrange_with_markers(h, w)
        assert len(seq) == h * w + h + 2
        toks = strip_markers(seq)
        assert [(t.row, t.col) for t in toks] == [(r, c) for r in range(1, h + 1) for c in range(1, w + 1)]

    def test_json_round_trip(self):
        seq = arrange_with_markers(2, 2)
        assert arranged_from_json(arranged_to_json(seq)) == seq

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            arrange_with_markers(0, 3)


class TestResize:
    def test_nearest_multiples(self):
        out = mllm_resize(image(300, 200))
        assert (out.height, out.width) == (308, 196)
        assert 11 * 28 == 308 and 7 * 28 == 196

    def test_unchanged(self):
        x = image(28, 28)
        out = mllm_resize(x)
        np.testing.assert_array_equal(out.pixels, x.pixels)

    def test_too_small(self):
        with pytest.raises(BudgetError):
            mllm_resize(image(14, 14))

    def test_ties_round_down(self):
        assert nearest_multiple(42, 28) == 28
        assert nearest_multiple(43, 28) == 56


def test_vision_tokens_for_llm():
    feats = torch.randn(4 * 6, 16)
    out, layout = vision_tokens_for_llm(feats, 4, 6, Projector(32, 24))
    assert out.shape == (12, 24)
    assert len(layout) == 4 * 3 + 4 + 2
