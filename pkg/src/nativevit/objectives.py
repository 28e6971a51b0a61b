"""Dual-tower alignment objectives and the small stand-in towers used with them.

The text tower and the distillation teacher are deliberately tiny, randomly
initialized modules with the same interfaces a pretrained language decoder
and a pretrained vision teacher would expose.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import Block, Encoder, EncoderConfig, RMSNorm, init_weights
from .packing import PackedBatch

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"


class Tokenizer:
    """Lower-cased word-level tokenizer; every encoded caption ends with ``<eos>``."""

    def __init__(self, words: Iterable[str]):
        vocab = [PAD, UNK, EOS]
        for w in words:
            if w not in vocab:
                vocab.append(w)
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def __len__(self) -> int:
        return len(self.vocab)

    @staticmethod
    def split(text: str) -> list[str]:
        return re.findall(r"[a-z0-9]+", text.lower())

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Tokenizer":
        words = sorted({w for t in texts for w in cls.split(t)})
        return cls(words)

    def encode(self, text: str) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(w, unk) for w in self.split(text)] + [self.eos_id]

    def encode_batch(self, texts: Sequence[str]) -> list[list[int]]:
        return [self.encode(t) for t in texts]


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int
    hidden: int = 64
    intermediate: int = 128
    layers: int = 2
    heads: int = 4
    head_dim: int = 16
    eos_id: int = 2
    norm_eps: float = 1e-6

    def block_config(self) -> EncoderConfig:
        return EncoderConfig(self.hidden, self.intermediate, self.layers, self.heads, self.head_dim,
                             layerscale_init=1.0, norm_eps=self.norm_eps)

    def to_dict(self) -> dict:
        return asdict(self)


class TextTower(nn.Module):
    """Token embeddings, causal pre-norm blocks, <eos> pooling.

    Captions are packed like image tokens; attention is causal within each
    caption and positions enter through the row half of the 2D rotary map.
    """

    def __init__(self, cfg: TextConfig, seed: int | None = 0):
        super().__init__()
        self.cfg = cfg
        bcfg = cfg.block_config()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.hidden)
        self.blocks = nn.ModuleList(Block(bcfg) for _ in range(cfg.layers))
        self.norm = RMSNorm(cfg.hidden, cfg.norm_eps)
        if seed is not None:
            g = torch.Generator().manual_seed(seed)
            init_weights(self, g, layerscale=1.0)
            with torch.no_grad():
                self.embed.weight.copy_(torch.randn(self.embed.weight.shape, generator=g))

    def forward(self, captions: Sequence[Sequence[int]]) -> torch.Tensor:
        lengths = [len(c) for c in captions]
        ids = torch.as_tensor([i for c in captions for i in c], dtype=torch.int64)
        bounds = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        pos = torch.cat([torch.arange(n) for n in lengths])
        axes = torch.stack([pos, torch.zeros_like(pos)], dim=-1)
        x = self.embed(ids)
        for blk in self.blocks:
            x = blk(x, axes, bounds, causal=True)
        x = self.norm(x)
        return x[torch.as_tensor(bounds[1:] - 1)]


def encode_text(captions: Sequence[Sequence[int]], tower: TextTower) -> torch.Tensor:
    """``[B, D_t]`` features taken at each caption's final (<eos>) position."""
    if not captions:
        raise ValueError("no captions")
    for k, c in enumerate(captions):
        if len(c) < 1 or c[-1] != tower.cfg.eos_id:
            raise ValueError(f"caption {k} does not end with the <eos> id {tower.cfg.eos_id}")
    return tower(captions)


class TeacherStub(nn.Module):
    """Frozen encoder with a fixed projection onto the student's feature width."""

    def __init__(self, cfg: EncoderConfig, student_width: int, seed: int = 1):
        super().__init__()
        self.encoder = Encoder(cfg, seed=seed)
        # teacher stands in for a converged model: fully open residual branches
        init_weights(self.encoder, torch.Generator().manual_seed(seed), layerscale=1.0)
        self.proj = nn.Linear(cfg.hidden, student_width, bias=False)
        init_weights(self.proj, torch.Generator().manual_seed(seed + 1))
        self.requires_grad_(False)

    def train(self, mode: bool = True):
        return super().train(False)

    @torch.no_grad()
    def forward(self, batch: PackedBatch) -> torch.Tensor:
        _, pooled = self.encoder(batch)
        return self.proj(pooled)


class AlignmentHead(nn.Module):
    """Linear projections into the shared space plus sigmoid-loss scale and bias."""

    def __init__(self, vision_width: int, text_width: int, embed_dim: int = 64,
                 init_temperature: float = 10.0, init_bias: float = -10.0, seed: int = 2):
        super().__init__()
        self.vision_proj = nn.Linear(vision_width, embed_dim)
        self.text_proj = nn.Linear(text_width, embed_dim)
        self.log_t = nn.Parameter(torch.tensor(math.log(init_temperature)))
        self.bias = nn.Parameter(torch.tensor(float(init_bias)))
        init_weights(self, torch.Generator().manual_seed(seed))

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_t.exp()

    def embed_image(self, pooled):
        return F.normalize(self.vision_proj(pooled), dim=-1)

    def embed_text(self, feats):
        return F.normalize(self.text_proj(feats), dim=-1)


def _check_unit_rows(x: torch.Tensor, name: str, tol: float = 1e-3):
    norms = x.detach().norm(dim=-1)
    if torch.any((norms - 1).abs() > tol):
        raise ValueError(f"{name} rows must be L2-normalized (max deviation {float((norms - 1).abs().max()):.3g})")


def sigmoid_contrastive_loss(img_emb, txt_emb, t, b) -> torch.Tensor:
    """Pairwise sigmoid loss ``-(1/B) sum_ij log sigmoid(z_ij (t <x_i, y_j> + b))``.

    ``z_ij`` is +1 on the diagonal (matched pairs) and -1 elsewhere.
    """
    B = img_emb.shape[0]
    if B == 0 or txt_emb.shape[0] != B:
        raise ValueError(f"need B >= 1 matched rows, got {B} images and {txt_emb.shape[0]} texts")
    _check_unit_rows(img_emb, "image embedding")
    _check_unit_rows(txt_emb, "text embedding")
    logits = t * img_emb @ txt_emb.T + b
    z = 2 * torch.eye(B, dtype=logits.dtype) - 1
    return -F.logsigmoid(z * logits).sum() / B


def kl_distillation_loss(student_feat, teacher_feat, tau: float = 1.0) -> torch.Tensor:
    """Mean over samples of ``KL(softmax(teacher/tau) || softmax(student/tau))``."""
    if tau <= 0:
        raise ValueError(f"distillation temperature must be positive, got {tau}")
    if student_feat.shape != teacher_feat.shape or student_feat.shape[0] < 1:
        raise ValueError(f"shape mismatch: {tuple(student_feat.shape)} vs {tuple(teacher_feat.shape)}")
    log_p = F.log_softmax(teacher_feat / tau, dim=-1)
    log_q = F.log_softmax(student_feat / tau, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(-1).mean()


def hybrid_loss(contrastive, distill, lam: float):
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return contrastive + lam * distill


def lambda_schedule(seen_samples: int, decay_point: int, lambda0: float = 1.0) -> float:
    """Step schedule: ``lambda0`` strictly before ``decay_point``, zero from then on."""
    if decay_point <= 0:
        raise ValueError("decay_point must be positive")
    return lambda0 if seen_samples < decay_point else 0.0
