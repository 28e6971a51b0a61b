"""From pixels to packed tokens without squashing anything to a square.

Run: python3 demos/01_native_tokens.py
"""

import numpy as np

from nativevit import synthetic
from nativevit.ingest import Fixed, Native, NativeAspect, TokenBudget, prepare_sequences, resize_modes, resize_to_budget
from nativevit.packing import pack

# A wide panorama, a tall poster and a short clip, all at their own sizes.
images = synthetic.make_image_corpus(2, seed=4, side_range=(90, 420))
clips = synthetic.make_video_corpus(1, seed=4, frame_range=(5, 5))
samples = [images.sample(i) for i in images.ids] + [clips.sample(i) for i in clips.ids]
for s in samples:
    print(f"{s.id:>8}  {s.modality:5}  frames={s.frames}  {s.height}x{s.width}")

# The classic recipe: shorter side to 224, center crop. Every image costs 256 tokens
# and the long side of the panorama is cut away.
fixed = resize_modes(samples[0], Fixed(224))
print("\nFixed(224):", fixed.height, "x", fixed.width, "->", (fixed.height // 14) ** 2, "tokens")

# Aspect-preserving alternative: one target length, the shape decides rows vs columns.
for length in (64, 256, 1024):
    o = resize_modes(samples[0], NativeAspect(length))
    r, c = o.height // 14, o.width // 14
    print(f"NativeAspect({length}): {r} x {c} patches = {r * c} tokens, "
          f"aspect {c / r:.3f} vs native {samples[0].width / samples[0].height:.3f}")

# A whole batch shares one scale factor so that the total stays within budget.
budget = TokenBudget(l_max=300, l_min=16)
scaled = resize_to_budget(samples[:2], budget)
print("\nbatch rescale to <= 300 tokens:",
      [(o.height // 14, o.width // 14) for o in scaled], "->",
      sum((o.height // 14) * (o.width // 14) for o in scaled), "tokens")

# prepare_sequences does the rest: lift images to two frames, normalize, cut
# 2 x 14 x 14 x 3 = 1176-wide patches. Videos keep their own temporal extent.
seqs = prepare_sequences(samples, Native(), budget=budget, f_max=8)
for (grid, tokens), s in zip(seqs, samples):
    print(f"{s.id:>8}: grid t={grid.t_patches} rows={grid.rows} cols={grid.cols} -> tokens {tuple(tokens.shape)}")

# Packing concatenates everything into one sequence. Boundaries say where each
# sample starts, so attention can stay inside its own segment. No padding.
batch = pack(seqs)
print("\npacked:", tuple(batch.tokens.shape), "boundaries", batch.boundaries.tolist())
print("first positions (t, row, col) of the clip:",
      batch.positions[batch.boundaries[2]:batch.boundaries[2] + 3].tolist())
padded = len(seqs) * max(t.shape[0] for _, t in seqs)
print(f"a padded batch would hold {padded} slots, {1 - batch.tokens.shape[0] / padded:.0%} of them wasted")
assert np.all(np.diff(batch.boundaries) > 0)
