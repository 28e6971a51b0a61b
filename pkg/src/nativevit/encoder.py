"""Vision transformer backbone for packed native-resolution token sequences.

Pre-norm blocks built from RMSNorm, QK-normalized attention with 2D rotary
embeddings and a SwiGLU FFN carrying an extra RMSNorm on its gated hidden
state. Both residual branches are scaled by LayerScale. There is no class
token and no absolute position embedding; the pooled embedding of a sample is
the mean of its output tokens.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .packing import PackedBatch


@dataclass(frozen=True)
class EncoderConfig:
    hidden: int
    intermediate: int
    layers: int
    heads: int
    head_dim: int
    patch_size: int = 14
    temporal_patch_size: int = 2
    channels: int = 3
    rope_base: float = 10000.0
    layerscale_init: float = 1e-5
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("hidden", "intermediate", "layers", "heads", "head_dim", "patch_size",
                     "temporal_patch_size", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.heads * self.head_dim != self.hidden:
            raise ValueError(f"heads*head_dim = {self.heads * self.head_dim} != hidden {self.hidden}")
        if self.head_dim % 4:
            raise ValueError(f"head_dim {self.head_dim} must be divisible by 4 for 2D RoPE")

    @property
    def patch_dim(self) -> int:
        return self.temporal_patch_size * self.channels * self.patch_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = {k: v for k, v in d.items() if not k.startswith("_")}
        return cls(**d)


PRESETS = {
    "0.3b": EncoderConfig(1024, 4224, 24, 16, 64),
    "0.6b": EncoderConfig(1280, 5184, 32, 16, 80),
    "1b": EncoderConfig(1920, 7680, 32, 24, 80),
    # near-zero LayerScale is a depth stabilizer; a two-block stand-in trained for a
    # few hundred steps needs its residual branches open from the start
    "tiny": EncoderConfig(64, 128, 2, 4, 16, layerscale_init=1.0),
}

# reported totals, in millions
REPORTED_PARAMS_M = {"0.3b": 310, "0.6b": 637, "1b": 1419}

PRESET_FILES = {"0.3b": "univitar-0.3b.json", "0.6b": "univitar-0.6b.json",
                "1b": "univitar-1b.json", "tiny": "tiny.json"}


def load_preset(name: str) -> EncoderConfig:
    """Read an encoder preset from the bundled JSON files."""
    fname = PRESET_FILES.get(name, name)
    if not fname.endswith(".json"):
        fname += ".json"
    text = resources.files("nativevit.presets").joinpath(fname).read_text()
    return EncoderConfig.from_dict(json.loads(text))


@dataclass(frozen=True)
class ParamCount:
    exact: int
    approx: int  # layers * (4 D^2 + 2 D I), the accounting the reported totals follow
    embed_and_norms: int

    @property
    def approx_total(self) -> int:
        return self.approx + self.embed_and_norms


def count_parameters(cfg: EncoderConfig) -> ParamCount:
    D, I, d = cfg.hidden, cfg.intermediate, cfg.head_dim
    embed = cfg.patch_dim * D + D
    per_layer_norms = 2 * D + 2 * d + I + 2 * D  # pre-norms, qk-norm, ffn norm, layerscale
    per_layer = 4 * D * D + 3 * D * I + per_layer_norms
    exact = embed + cfg.layers * per_layer + D
    approx = cfg.layers * (4 * D * D + 2 * D * I)
    return ParamCount(exact, approx, embed + cfg.layers * per_layer_norms + D)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def rope_frequencies(head_dim: int, base: float = 10000.0, dtype=torch.float64) -> torch.Tensor:
    half = head_dim // 2
    j = torch.arange(half // 2, dtype=torch.float64)
    return (base ** (-2.0 * j / half)).to(dtype)


def rope_2d(x: torch.Tensor, positions, base: float = 10000.0, row_extent=None) -> torch.Tensor:
    """Rotate ``x`` of shape ``[N, H, d]`` by 2D grid positions.

    ``positions`` is ``[N, 2]`` (raster row, col) or ``[N, 3]`` (t, row, col);
    three-column positions fold time into the row axis as ``t * row_extent +
    row``. The first ``d/2`` lanes rotate with the row index, the last ``d/2``
    with the column, lane pair ``(2j, 2j+1)`` of each half at angle
    ``pos * base^(-2j / (d/2))``.
    """
    n, _, d = x.shape
    if d % 4:
        raise ValueError(f"head_dim {d} must be divisible by 4")
    pos = torch.as_tensor(positions)
    if pos.shape[0] != n:
        raise ValueError(f"{pos.shape[0]} positions for {n} tokens")
    if pos.shape[-1] == 3:
        t, r, c = pos.unbind(-1)
        if row_extent is None:
            if torch.any(t != 0):
                raise ValueError("temporal positions need row_extent to fold into the row axis")
            row_extent = 0
        pos = torch.stack([t * torch.as_tensor(row_extent) + r, c], dim=-1)
    freqs = rope_frequencies(d, base, dtype=torch.float64)
    ang = pos.to(torch.float64)[:, :, None] * freqs  # [N, 2, d/4]
    cos = torch.cos(ang).reshape(n, 1, d // 2).to(x.dtype)
    sin = torch.sin(ang).reshape(n, 1, d // 2).to(x.dtype)
    pairs = x.reshape(n, x.shape[1], d // 2, 2)
    a, b = pairs[..., 0], pairs[..., 1]
    return torch.stack([a * cos - b * sin, a * sin + b * cos], dim=-1).reshape(x.shape)


def segment_attention(q, k, v, boundaries, causal: bool = False) -> torch.Tensor:
    """Scaled dot-product attention confined to ``[b_k, b_{k+1})`` segments.

    ``q, k, v`` are ``[L, H, d]``. Segments of equal length are batched into a
    single call; no ``L x L`` tensor is ever formed.
    """
    b = np.asarray(boundaries, dtype=np.int64)
    starts, lengths = b[:-1], np.diff(b)
    out = torch.empty_like(q)
    scale = 1.0 / math.sqrt(q.shape[-1])
    for n in np.unique(lengths):
        sel = starts[lengths == n]
        idx = torch.as_tensor(sel[:, None] + np.arange(n)[None, :])  # [G, n]
        qs, ks, vs = (t[idx].transpose(1, 2) for t in (q, k, v))  # [G, H, n, d]
        logits = qs @ ks.transpose(-1, -2) * scale
        if causal:
            future = torch.ones(int(n), int(n), dtype=torch.bool).triu(1)
            logits = logits.masked_fill(future, float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        out[idx] = (attn @ vs).transpose(1, 2)
    return out


def dense_attention(q, k, v, allowed) -> torch.Tensor:
    """Reference attention under an explicit ``[L, L]`` boolean mask."""
    allowed = torch.as_tensor(allowed, dtype=torch.bool)
    if not torch.all(allowed.any(-1)):
        raise ValueError("attention mask has a row with no allowed keys")
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = torch.einsum("ihd,jhd->hij", q, k) * scale
    logits = logits.masked_fill(~allowed, float("-inf"))
    attn = torch.softmax(logits, dim=-1)
    return torch.einsum("hij,jhd->ihd", attn, v)


class Attention(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.heads, self.head_dim, self.base = cfg.heads, cfg.head_dim, cfg.rope_base
        self.norm = RMSNorm(cfg.hidden, cfg.norm_eps)
        self.qkv = nn.Linear(cfg.hidden, 3 * cfg.hidden, bias=False)
        self.q_norm = RMSNorm(cfg.head_dim, cfg.norm_eps)
        self.k_norm = RMSNorm(cfg.head_dim, cfg.norm_eps)
        self.proj = nn.Linear(cfg.hidden, cfg.hidden, bias=False)
        self.layerscale = nn.Parameter(torch.full((cfg.hidden,), cfg.layerscale_init))

    def qk(self, x, axes):
        """Normalized, rotated queries and keys plus values, each ``[L, H, d]``."""
        L = x.shape[0]
        q, k, v = self.qkv(self.norm(x)).reshape(L, 3, self.heads, self.head_dim).unbind(1)
        q, k = self.q_norm(q), self.k_norm(k)
        if axes is not None:
            q, k = rope_2d(q, axes, self.base), rope_2d(k, axes, self.base)
        return q, k, v

    def forward(self, x, axes, boundaries=None, mask=None, causal=False):
        q, k, v = self.qk(x, axes)
        if mask is not None:
            o = dense_attention(q, k, v, mask)
        else:
            if boundaries is None:
                boundaries = [0, x.shape[0]]
            o = segment_attention(q, k, v, boundaries, causal=causal)
        return x + self.layerscale * self.proj(o.reshape(x.shape[0], -1))


class SwiGLU(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.norm = RMSNorm(cfg.hidden, cfg.norm_eps)
        self.gate = nn.Linear(cfg.hidden, cfg.intermediate, bias=False)
        self.up = nn.Linear(cfg.hidden, cfg.intermediate, bias=False)
        self.inner_norm = RMSNorm(cfg.intermediate, cfg.norm_eps)
        self.down = nn.Linear(cfg.intermediate, cfg.hidden, bias=False)
        self.layerscale = nn.Parameter(torch.full((cfg.hidden,), cfg.layerscale_init))

    def forward(self, x):
        h = self.norm(x)
        h = F.silu(self.gate(h)) * self.up(h)
        return x + self.layerscale * self.down(self.inner_norm(h))


class Block(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attn = Attention(cfg)
        self.ffn = SwiGLU(cfg)

    def forward(self, x, axes, boundaries=None, mask=None, causal=False):
        return self.ffn(self.attn(x, axes, boundaries, mask, causal))


def init_weights(module: nn.Module, generator: torch.Generator | None = None, layerscale=None):
    """Xavier-uniform projections, zero biases, unit norm gains."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, RMSNorm):
            nn.init.ones_(m.weight)
        if layerscale is not None and isinstance(m, (Attention, SwiGLU)):
            nn.init.constant_(m.layerscale, layerscale)


def segment_mean(x: torch.Tensor, boundaries) -> torch.Tensor:
    lengths = torch.as_tensor(np.diff(np.asarray(boundaries)))
    seg = torch.repeat_interleave(torch.arange(len(lengths)), lengths)
    sums = torch.zeros(len(lengths), x.shape[-1], dtype=x.dtype).index_add_(0, seg, x)
    return sums / lengths[:, None].to(x.dtype)


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, seed: int | None = 0):
        super().__init__()
        self.cfg = cfg
        # a 3D conv with kernel = stride = (pt, p, p) is this per-patch affine map
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.hidden)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.norm = RMSNorm(cfg.hidden, cfg.norm_eps)
        if seed is not None:
            init_weights(self, torch.Generator().manual_seed(seed), cfg.layerscale_init)

    def embed(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.shape[-1] != self.cfg.patch_dim:
            raise ValueError(f"patch width {patches.shape[-1]} != {self.cfg.patch_dim}")
        return self.patch_embed(patches)

    def forward(self, batch: PackedBatch, dense_mask: bool = False, use_rope: bool = True):
        """Returns per-token features ``[L, D]`` and pooled embeddings ``[K, D]``."""
        x = self.embed(batch.tokens.to(self.patch_embed.weight.dtype))
        axes = batch.rope_axes() if use_rope else None
        mask = None
        if dense_mask:
            seg = batch.segment_ids()
            mask = seg[:, None] == seg[None, :]
        for blk in self.blocks:
            x = blk(x, axes, batch.boundaries, mask)
        x = self.norm(x)
        return x, segment_mean(x, batch.boundaries)


def patch_dropout(batch: PackedBatch, rate: float, generator: torch.Generator | None = None) -> PackedBatch:
    """Keep ``ceil(n * (1 - rate))`` random tokens per segment, in original order.

    Kept tokens retain their grid positions, so rotary phases are unchanged.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"patch dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return batch
    keep_idx, starts = [], batch.boundaries[:-1]
    lengths = []
    for s, n in zip(starts, batch.lengths):
        keep = max(1, math.ceil(n * (1.0 - rate)))
        sel = torch.randperm(int(n), generator=generator)[:keep].sort().values + int(s)
        keep_idx.append(sel)
        lengths.append(keep)
    idx = torch.cat(keep_idx)
    bounds = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    return PackedBatch(batch.tokens[idx], bounds, batch.grids, batch.positions[idx])
