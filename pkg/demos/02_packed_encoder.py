"""The encoder sees one packed sequence but behaves as if each sample ran alone.

Run: python3 demos/02_packed_encoder.py
"""

import numpy as np
import torch

from nativevit.encoder import PRESETS, Encoder, rope_2d
from nativevit.ingest import PatchGrid
from nativevit.packing import attention_mask, pack

torch.set_grad_enabled(False)  # inference only
cfg = PRESETS["tiny"]
enc = Encoder(cfg, seed=0).double()
# LayerScale starts near zero, which would make every block almost an identity.
# Open the branches so the demo exercises attention for real.
for blk in enc.blocks:
    torch.nn.init.constant_(blk.attn.layerscale, 1.0)
    torch.nn.init.constant_(blk.ffn.layerscale, 1.0)

g = torch.Generator().manual_seed(0)
seqs = [(grid, torch.randn(grid.token_count, cfg.patch_dim, generator=g, dtype=torch.float64))
        for grid in (PatchGrid(1, 3, 5), PatchGrid(2, 2, 2), PatchGrid(1, 1, 1))]
batch = pack(seqs)

# The mask that a dense implementation would need: block diagonal.
mask = attention_mask(batch)
idx = np.arange(mask.size)
print("dense mask for", mask.size, "tokens (1 = may attend):")
for row in mask.allowed(idx[:, None], idx[None, :]).astype(int):
    print("".join(map(str, row)))

# Segment attention never builds that mask, yet the outputs agree.
feats, pooled = enc(batch)
dense_feats, _ = enc(batch, dense_mask=True)
print("\nsegment vs dense attention, max diff:", float((feats - dense_feats).abs().max()))

# And each segment equals a standalone forward of that sample.
start = 0
for k, one in enumerate(seqs):
    f1, p1 = enc(pack([one]))
    n = one[0].token_count
    print(f"sample {k}: packed vs alone max diff {float((feats[start:start + n] - f1).abs().max()):.1e}, "
          f"pooled diff {float((pooled[k] - p1[0]).abs().max()):.1e}")
    start += n

# 2D-RoPE: the first half of every head rotates with the row, the second half
# with the column. Logits therefore only see relative offsets.
q = torch.randn(6, cfg.heads, cfg.head_dim, dtype=torch.float64, generator=g)
k = torch.randn(6, cfg.heads, cfg.head_dim, dtype=torch.float64, generator=g)
pos = torch.tensor([[0, 0], [0, 1], [1, 0], [1, 1], [2, 3], [4, 1]])
base = torch.einsum("nhd,mhd->hnm", rope_2d(q, pos), rope_2d(k, pos))
moved = torch.einsum("nhd,mhd->hnm", rope_2d(q, pos + torch.tensor([37, 5])), rope_2d(k, pos + torch.tensor([37, 5])))
print("\nlogit change after shifting the whole grid by (37, 5):", float((base - moved).abs().max()))
