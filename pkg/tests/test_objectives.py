import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from nativevit.objectives import (AlignmentHead, TeacherStub, TextConfig, TextTower, Tokenizer, encode_text,
                                  hybrid_loss, kl_distillation_loss, lambda_schedule, sigmoid_contrastive_loss)
from nativevit.encoder import PRESETS
from nativevit.packing import pack
from nativevit.ingest import PatchGrid


def unit(x):
    return F.normalize(x, dim=-1)


def brute_sigmoid_loss(x, y, t, b):
    B = x.shape[0]
    total = 0.0
    for i in range(B):
        for j in range(B):
            z = 1.0 if i == j else -1.0
            s = float(x[i] @ y[j])
            total += math.log1p(math.exp(-z * (t * s + b)))
    return total / B


class TestSigmoidLoss:
    def test_single_orthogonal_pair(self):
        x = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        y = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        assert float(sigmoid_contrastive_loss(x, y, 1.0, 0.0)) == pytest.approx(0.693147, abs=5e-7)

    def test_orthonormal_two_pairs(self):
        e = torch.eye(2, dtype=torch.float64)
        expect = (2 * math.log1p(math.exp(-1)) + 2 * math.log(2)) / 2
        got = float(sigmoid_contrastive_loss(e, e, 1.0, 0.0))
        assert got == pytest.approx(expect, abs=1e-14)
        # (2 ln(1 + 1/e) + 2 ln 2) / 2 = 1.0064089 to 7 places
        assert round(got, 6) == 1.006409

    @pytest.mark.parametrize("B", [1, 2, 5, 8])
    def test_matches_brute_force(self, B):
        g = torch.Generator().manual_seed(B)
        x = unit(torch.randn(B, 6, generator=g, dtype=torch.float64))
        y = unit(torch.randn(B, 6, generator=g, dtype=torch.float64))
        got = float(sigmoid_contrastive_loss(x, y, 3.7, -1.2))
        assert abs(got - brute_sigmoid_loss(x, y, 3.7, -1.2)) < 1e-12

    def test_symmetry(self):
        g = torch.Generator().manual_seed(1)
        x = unit(torch.randn(5, 4, generator=g, dtype=torch.float64))
        y = unit(torch.randn(5, 4, generator=g, dtype=torch.float64))
        torch.testing.assert_close(sigmoid_contrastive_loss(x, y, 2.0, -1.0), sigmoid_contrastive_loss(y, x, 2.0, -1.0))

    def test_perfect_alignment_decreasing_in_t(self):
        e = torch.eye(4, dtype=torch.float64)
        vals = [float(sigmoid_contrastive_loss(e, e, t, 0.0)) for t in np.linspace(0.1, 30, 40)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_gradient_finite_difference(self):
        g = torch.Generator().manual_seed(2)
        raw_x = torch.randn(4, 5, generator=g, dtype=torch.float64, requires_grad=True)
        raw_y = torch.randn(4, 5, generator=g, dtype=torch.float64, requires_grad=True)
        t = torch.tensor(2.5, dtype=torch.float64, requires_grad=True)
        b = torch.tensor(-0.7, dtype=torch.float64, requires_grad=True)
        f = lambda a, c, t, b: sigmoid_contrastive_loss(unit(a), unit(c), t, b)
        assert torch.autograd.gradcheck(f, (raw_x, raw_y, t, b), eps=1e-5, atol=1e-9, rtol=1e-4)

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError, match="normalized"):
            sigmoid_contrastive_loss(torch.ones(2, 3), unit(torch.ones(2, 3)), 1.0, 0.0)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            sigmoid_contrastive_loss(torch.zeros(0, 3), torch.zeros(0, 3), 1.0, 0.0)


class TestKL:
    def test_equal_is_zero(self):
        x = torch.randn(3, 8, dtype=torch.float64)
        assert float(kl_distillation_loss(x, x)) == pytest.approx(0.0, abs=1e-15)

    def test_nonnegative(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(20):
            s, t = torch.randn(2, 4, 7, generator=g, dtype=torch.float64)
            assert float(kl_distillation_loss(s, t, tau=0.7)) >= 0

    def test_hand_computed(self):
        teacher = torch.tensor([[0.0, math.log(3)]], dtype=torch.float64)
        student = torch.zeros(1, 2, dtype=torch.float64)
        expect = 0.25 * math.log(0.25 / 0.5) + 0.75 * math.log(0.75 / 0.5)
        got = float(kl_distillation_loss(student, teacher))
        assert got == pytest.approx(expect, abs=1e-15)
        assert round(got, 6) == 0.130812

    def test_shift_invariance(self):
        s, t = torch.randn(2, 3, 5, dtype=torch.float64)
        base = kl_distillation_loss(s, t, 2.0)
        torch.testing.assert_close(kl_distillation_loss(s + 4.0, t - 3.0, 2.0), base)

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            kl_distillation_loss(torch.zeros(1, 2), torch.zeros(1, 2), 0.0)


class TestHybrid:
    def test_lambda_zero(self):
        assert hybrid_loss(0.3, 5.0, 0.0) == 0.3

    def test_sum(self):
        assert hybrid_loss(0.5, 0.5, 1.0) == 1.0

    def test_gradient_scaling(self):
        g = torch.Generator().manual_seed(3)
        s = torch.randn(2, 4, generator=g, dtype=torch.float64, requires_grad=True)
        t = torch.randn(2, 4, generator=g, dtype=torch.float64)
        y = unit(torch.randn(2, 4, generator=g, dtype=torch.float64))
        f = lambda s: hybrid_loss(sigmoid_contrastive_loss(unit(s), y, 2.0, -1.0), kl_distillation_loss(s, t), 0.3)
        assert torch.autograd.gradcheck(f, (s,), eps=1e-5, atol=1e-9, rtol=1e-4)

    def test_schedule(self):
        assert lambda_schedule(7999, 8000) == 1.0
        assert lambda_schedule(8000, 8000) == 0.0
        assert lambda_schedule(10 ** 9, 8000, 2.0) == 0.0
        with pytest.raises(ValueError):
            lambda_schedule(1, 0)


class TestTextTower:
    def setup_method(self):
        self.tok = Tokenizer(["red", "circle", "blue"])
        self.tower = TextTower(TextConfig(len(self.tok)), seed=0).double()

    def test_eos_only(self):
        out = encode_text([[self.tok.eos_id]], self.tower)
        alone = self.tower.norm(self.tower.blocks[1](self.tower.blocks[0](
            self.tower.embed(torch.tensor([self.tok.eos_id])), torch.zeros(1, 2, dtype=torch.int64)),
            torch.zeros(1, 2, dtype=torch.int64)))
        torch.testing.assert_close(out, alone)

    def test_identical_and_permuted(self):
        caps = self.tok.encode_batch(["red circle", "blue circle", "red circle"])
        out = encode_text(caps, self.tower)
        torch.testing.assert_close(out[0], out[2], rtol=0, atol=0)
        perm = encode_text([caps[1], caps[0]], self.tower)
        torch.testing.assert_close(perm, out[[1, 0]], rtol=1e-12, atol=1e-12)

    def test_missing_eos(self):
        with pytest.raises(ValueError, match="eos"):
            encode_text([[3, 4]], self.tower)

    def test_causal(self):
        def hidden(ids):
            x = self.tower.embed(torch.tensor(ids))
            axes = torch.stack([torch.arange(len(ids)), torch.zeros(len(ids), dtype=torch.int64)], -1)
            for blk in self.tower.blocks:
                x = blk(x, axes, [0, len(ids)], causal=True)
            return x
        a, b = hidden([3, 4, 2]), hidden([3, 4, 5, 2])
        torch.testing.assert_close(a[:2], b[:2], rtol=1e-12, atol=1e-12)
        # the final feature does see earlier tokens
        x, y = encode_text([[3, 2], [5, 2]], self.tower)
        assert not torch.allclose(x, y)

    def test_tokenizer(self):
        assert self.tok.encode("Red, CIRCLE!") == [3, 4, 2]
        assert self.tok.encode("green") == [1, 2]


def test_teacher_is_frozen():
    teacher = TeacherStub(PRESETS["tiny"], student_width=64)
    assert not any(p.requires_grad for p in teacher.parameters())
    teacher.train()
    assert not teacher.training
    batch = pack([(PatchGrid(1, 1, 2), torch.randn(2, 1176))])
    assert teacher(batch).shape == (1, 64)


def test_alignment_head_init():
    head = AlignmentHead(64, 32)
    assert head.temperature.item() == pytest.approx(10.0)
    assert head.bias.item() == -10.0
    e = head.embed_image(torch.randn(3, 64))
    torch.testing.assert_close(e.norm(dim=-1), torch.ones(3))
