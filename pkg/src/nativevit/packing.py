"""Sequence packing with per-sample attention isolation.

A packed batch is the row-wise concatenation of every sample's tokens plus the
prefix-sum offsets (``cu_seqlens``) of the segments. Attention is only allowed
inside a segment; the offsets are the mask, a dense ``L x L`` matrix is only
ever built as a test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .ingest import PatchGrid


@dataclass
class PackedBatch:
    tokens: torch.Tensor  # [L_total, D] (raw patches or embeddings)
    boundaries: np.ndarray  # [K + 1] int64, 0 = b0 < ... < bK = L_total
    grids: list[PatchGrid]
    positions: torch.Tensor  # [L_total, 3] int64 (t, row, col)

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=np.int64)
        if b.ndim != 1 or len(b) < 2 or b[0] != 0 or np.any(np.diff(b) <= 0):
            raise ValueError(f"corrupted boundaries {b.tolist()}")
        if b[-1] != self.tokens.shape[0] or self.positions.shape[0] != self.tokens.shape[0]:
            raise ValueError(
                f"boundaries end at {b[-1]} but batch holds {self.tokens.shape[0]} tokens "
                f"and {self.positions.shape[0]} positions"
            )
        if len(self.grids) != len(b) - 1:
            raise ValueError(f"{len(self.grids)} grids for {len(b) - 1} segments")
        self.boundaries = b

    @property
    def num_segments(self) -> int:
        return len(self.boundaries) - 1

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.boundaries)

    def __len__(self) -> int:
        return int(self.boundaries[-1])

    def segment(self, k: int) -> torch.Tensor:
        return self.tokens[self.boundaries[k]:self.boundaries[k + 1]]

    def segment_ids(self) -> torch.Tensor:
        return torch.repeat_interleave(torch.arange(self.num_segments), torch.as_tensor(self.lengths))

    def rope_axes(self) -> torch.Tensor:
        """Two rotary axes per token: the (t, row) raster index and the column."""
        rows = torch.as_tensor([g.rows for g in self.grids], dtype=torch.int64)
        row_extent = torch.repeat_interleave(rows, torch.as_tensor(self.lengths))
        t, r, c = self.positions.unbind(-1)
        return torch.stack([t * row_extent + r, c], dim=-1)

    def with_tokens(self, tokens: torch.Tensor) -> "PackedBatch":
        return PackedBatch(tokens, self.boundaries, self.grids, self.positions)


def pack(sequences: Sequence[tuple[PatchGrid, object]], positions: Sequence | None = None) -> PackedBatch:
    """Concatenate ``(grid, token_matrix)`` pairs in input order.

    ``positions`` optionally overrides the per-sample (t, row, col) triples,
    which is how token subsets (patch dropout) keep their original grid
    coordinates.
    """
    if not sequences:
        raise ValueError("pack needs at least one sequence")
    mats = [torch.as_tensor(m) for _, m in sequences]
    width = mats[0].shape[1]
    for k, m in enumerate(mats):
        if m.ndim != 2 or m.shape[1] != width:
            raise ValueError(f"sequence {k} has shape {tuple(m.shape)}, expected [n, {width}]")
        if m.shape[0] == 0:
            raise ValueError(f"sequence {k} is empty")
    grids = [g for g, _ in sequences]
    if positions is None:
        pos = [torch.from_numpy(g.positions()) for g in grids]
        for k, (p, m) in enumerate(zip(pos, mats)):
            if p.shape[0] != m.shape[0]:
                raise ValueError(f"sequence {k}: grid has {p.shape[0]} cells, matrix {m.shape[0]} rows")
    else:
        pos = [torch.as_tensor(p, dtype=torch.int64) for p in positions]
    boundaries = np.concatenate([[0], np.cumsum([m.shape[0] for m in mats])]).astype(np.int64)
    return PackedBatch(torch.cat(mats, dim=0), boundaries, grids, torch.cat(pos, dim=0))


def unpack(batch: PackedBatch) -> list[torch.Tensor]:
    return [batch.segment(k) for k in range(batch.num_segments)]


class SegmentMask:
    """Block-diagonal attention predicate backed by segment offsets."""

    def __init__(self, boundaries):
        self.boundaries = np.asarray(boundaries, dtype=np.int64)
        self.size = int(self.boundaries[-1])

    def segment_of(self, i) -> np.ndarray:
        i = np.asarray(i)
        if np.any((i < 0) | (i >= self.size)):
            raise IndexError(f"token index out of range [0, {self.size})")
        return np.searchsorted(self.boundaries, i, side="right") - 1

    def allowed(self, i, j):
        return self.segment_of(i) == self.segment_of(j)

    __call__ = allowed

    def dense(self) -> np.ndarray:
        seg = self.segment_of(np.arange(self.size))
        return seg[:, None] == seg[None, :]


def attention_mask(batch: PackedBatch) -> SegmentMask:
    return SegmentMask(batch.boundaries)
