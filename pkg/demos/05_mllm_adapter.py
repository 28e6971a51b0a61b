"""Handing vision tokens to a language model: width-2 unshuffle and row markers.

Run: python3 demos/05_mllm_adapter.py
"""

import numpy as np
import torch

from nativevit.adapter import (Projector, arrange_with_markers, mllm_resize, pixel_shuffle_width,
                               pixel_unshuffle_width, vision_tokens_for_llm)
from nativevit.ingest import VisualSample

# The input is first snapped to multiples of 28 so that the patch grid has an
# even number of columns.
img = VisualSample(np.random.default_rng(0).random((1, 3, 300, 200), dtype=np.float32))
snapped = mllm_resize(img)
h, w = snapped.height // 14, snapped.width // 14
print(f"300x200 -> {snapped.height}x{snapped.width}: a {h} x {w} patch grid")

# Neighbouring columns merge into one token of twice the width: half the tokens.
feats = torch.randn(h, w, 8)
merged = pixel_unshuffle_width(feats)
print("unshuffle:", tuple(feats.shape), "->", tuple(merged.shape),
      "| round trip exact:", torch.equal(pixel_shuffle_width(merged), feats))

# Rows are delimited with line anchors so the language model keeps the 2D layout.
print("\n2 x 3 grid:", " ".join(str(t) for t in arrange_with_markers(2, 3)))
for gh, gw in ((1, 1), (4, 6), (23, 7)):
    print(f"{gh} x {gw}: {len(arrange_with_markers(gh, gw))} entries = h*w + h + 2 = {gh * gw + gh + 2}")

# All together: encoder features -> unshuffle -> projector -> layout.
out, layout = vision_tokens_for_llm(torch.randn(h * w, 64), h, w, Projector(128, 32))
print(f"\n{h * w} encoder tokens -> {out.shape[0]} projected tokens of width {out.shape[1]}, "
      f"{len(layout)} layout entries")
