"""Post-processing of vision tokens for a language-model consumer.

Covers the width-wise 2x pixel-unshuffle, the 28-pixel resize that makes it
always applicable, and the flattening of an ``h x w`` token grid into a 1D
sequence delimited by plain-string boundary markers and per-row line anchors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import RMSNorm
from .ingest import BudgetError, VisualSample, resize_pixels

IMAGE_START = "<image_start>"
IMAGE_END = "<image_end>"


def line_anchor(row: int) -> str:
    return f"<line-{row}>"


def pixel_unshuffle_width(tokens):
    """``[h, w, D] -> [h, w/2, 2D]``; output ``(r, c)`` is inputs ``(r, 2c)`` then ``(r, 2c+1)``."""
    h, w, d = tokens.shape
    if w % 2:
        raise ValueError(f"width {w} must be even for a 2x width unshuffle")
    return tokens.reshape(h, w // 2, 2 * d)


def pixel_shuffle_width(tokens):
    """Inverse of :func:`pixel_unshuffle_width`."""
    h, w2, d2 = tokens.shape
    if d2 % 2:
        raise ValueError(f"channel width {d2} must be even")
    return tokens.reshape(h, w2 * 2, d2 // 2)


@dataclass(frozen=True)
class VisionToken:
    row: int  # 1-based
    col: int  # 1-based

    def __str__(self):
        return f"x<{self.row},{self.col}>"


def arrange_with_markers(h: int, w: int) -> list:
    """Row-major grid with a line anchor after every row, wrapped in boundary markers.

    Markers are plain strings, never tokenizer-special ids.
    """
    if h < 1 or w < 1:
        raise ValueError(f"grid must be at least 1x1, got {h}x{w}")
    seq: list = [IMAGE_START]
    for r in range(1, h + 1):
        seq.extend(VisionToken(r, c) for c in range(1, w + 1))
        seq.append(line_anchor(r))
    seq.append(IMAGE_END)
    return seq


def strip_markers(seq) -> list[VisionToken]:
    return [e for e in seq if isinstance(e, VisionToken)]


def arranged_to_json(seq) -> str:
    """Markers as strings, vision tokens as ``[row, col]`` pairs."""
    return json.dumps([e if isinstance(e, str) else [e.row, e.col] for e in seq])


def arranged_from_json(text: str) -> list:
    return [e if isinstance(e, str) else VisionToken(*e) for e in json.loads(text)]


def nearest_multiple(n: int, m: int) -> int:
    """Nearest multiple of ``m`` (ties go down), never below ``m``."""
    q, r = divmod(n, m)
    if 2 * r > m:
        q += 1
    return max(q, 1) * m


def mllm_resize(image: VisualSample, multiple: int = 28) -> VisualSample:
    """Snap each side to the nearest multiple of ``multiple`` pixels."""
    h, w = image.height, image.width
    if h < multiple or w < multiple:
        raise BudgetError(f"image {h}x{w} is below the {multiple}x{multiple} minimum")
    nh, nw = nearest_multiple(h, multiple), nearest_multiple(w, multiple)
    return image.with_pixels(resize_pixels(image.pixels, nh, nw))


class Projector(nn.Module):
    """Pre-normalized three-layer MLP from merged vision tokens to LLM width.

    Shape stub only; nothing in this package trains it.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or out_dim
        self.norm = RMSNorm(in_dim)
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, out_dim)

    def forward(self, x):
        x = F.gelu(self.fc1(self.norm(x)))
        return self.fc3(F.gelu(self.fc2(x)))


def vision_tokens_for_llm(features: torch.Tensor, rows: int, cols: int, projector: Projector):
    """Per-token encoder features of one image -> projected, width-merged grid plus its layout."""
    grid = pixel_unshuffle_width(features.reshape(rows, cols, -1))
    out = projector(grid)
    return out.reshape(rows * (cols // 2), -1), arrange_with_markers(rows, cols // 2)
