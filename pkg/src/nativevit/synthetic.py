"""Procedurally generated image-caption and video-caption corpora.

Each item is a recipe (shape, color, size, background, native size, jitter)
rendered on demand, so a corpus of thousands of samples costs almost no
memory and every id maps to the same pixels on every call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ingest import IMAGE, VIDEO, VisualSample

SHAPES = ("circle", "square", "triangle", "diamond", "cross")
COLORS = {
    "red": (0.9, 0.1, 0.1), "green": (0.1, 0.8, 0.2), "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.1), "magenta": (0.9, 0.15, 0.85), "cyan": (0.1, 0.85, 0.9),
    "orange": (1.0, 0.55, 0.05), "white": (0.97, 0.97, 0.97),
}
BACKGROUNDS = {
    "black": (0.03, 0.03, 0.03), "gray": (0.5, 0.5, 0.5), "navy": (0.05, 0.05, 0.35),
    "brown": (0.4, 0.25, 0.1), "pink": (0.95, 0.7, 0.75),
}
SIZES = {"small": 0.16, "medium": 0.26, "large": 0.38}
MOTIONS = ("left", "right", "up", "down")

CAPTION = "a {size} {color} {shape} on a {background} background"
VIDEO_CAPTION = "a {color} {shape} moving {motion} on a {background} background"
PROMPT_TEMPLATES = ("a photo of a {}", "a picture of a {}", "an image showing a {}")


def vocabulary() -> list[str]:
    words = set("a on background moving photo of picture an image showing".split())
    for group in (SHAPES, COLORS, BACKGROUNDS, SIZES, MOTIONS):
        words.update(group)
    return sorted(words)


def shape_mask(shape: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if shape == "triangle":
        # apex up, base at cy + r
        inside_y = (dy >= -r) & (dy <= r)
        half = (dy + r) / 2.0
        return inside_y & (np.abs(dx) <= half)
    if shape == "cross":
        arm = r / 3.0
        box = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        return box & ((np.abs(dy) <= arm) | (np.abs(dx) <= arm))
    raise ValueError(f"unknown shape {shape!r}")


@dataclass(frozen=True)
class Recipe:
    id: str
    shape: str
    color: str
    size: str
    background: str
    height: int
    width: int
    cy: float  # object center, fraction of height
    cx: float
    frames: int = 1
    motion: str = ""

    @property
    def caption(self) -> str:
        if self.frames > 1:
            return VIDEO_CAPTION.format(color=self.color, shape=self.shape, motion=self.motion,
                                        background=self.background)
        return CAPTION.format(size=self.size, color=self.color, shape=self.shape,
                              background=self.background)


def render(rec: Recipe) -> np.ndarray:
    """``[T, 3, H, W]`` float32 pixels in [0, 1]."""
    h, w = rec.height, rec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32) + 0.5
    r = SIZES[rec.size] * min(h, w)
    bg = np.asarray(BACKGROUNDS[rec.background], np.float32)
    fg = np.asarray(COLORS[rec.color], np.float32)
    frames = []
    for f in range(rec.frames):
        cy, cx = rec.cy * h, rec.cx * w
        if rec.frames > 1:
            step = (f / (rec.frames - 1) - 0.5) * 0.4
            if rec.motion in ("left", "right"):
                cx += (step if rec.motion == "right" else -step) * w
            else:
                cy += (step if rec.motion == "down" else -step) * h
        m = shape_mask(rec.shape, yy, xx, cy, cx, r)[None]
        frames.append(np.where(m, fg[:, None, None], bg[:, None, None]))
    return np.stack(frames).astype(np.float32)


@dataclass
class SyntheticCorpus:
    """Id-addressed collection of recipes; ``sample(id)`` renders pixels."""

    recipes: dict[str, Recipe] = field(default_factory=dict)

    def __len__(self):
        return len(self.recipes)

    @property
    def ids(self) -> list[str]:
        return list(self.recipes)

    def caption(self, id: str) -> str:
        return self.recipes[id].caption

    def sample(self, id: str) -> VisualSample:
        rec = self.recipes[id]
        return VisualSample(render(rec), VIDEO if rec.frames > 1 else IMAGE, id)

    def modality(self, id: str) -> str:
        return VIDEO if self.recipes[id].frames > 1 else IMAGE

    def subset(self, ids) -> "SyntheticCorpus":
        return SyntheticCorpus({i: self.recipes[i] for i in ids})

    def merged(self, other: "SyntheticCorpus") -> "SyntheticCorpus":
        return SyntheticCorpus({**self.recipes, **other.recipes})


def _center(rng, extent: int, short: int, radius: float) -> float:
    """Object center as a fraction of ``extent``, drawn so the whole object
    stays inside the central ``short x short`` window. A square center crop
    then never cuts the object, so captions stay truthful under every
    resolution policy."""
    half = short / (2 * extent)
    slack = half - (radius + 0.04) * short / extent
    return 0.5 if slack <= 0 else float(rng.uniform(0.5 - slack, 0.5 + slack))


def make_image_corpus(n: int, seed: int = 0, side_range=(84, 224), prefix: str = "img") -> SyntheticCorpus:
    rng = np.random.default_rng(seed)
    recipes = {}
    for k in range(n):
        h, w = (int(v) for v in rng.integers(side_range[0], side_range[1] + 1, size=2))
        size = str(rng.choice(list(SIZES)))
        rec = Recipe(
            id=f"{prefix}{k:05d}",
            shape=str(rng.choice(SHAPES)),
            color=str(rng.choice(list(COLORS))),
            size=size,
            background=str(rng.choice(list(BACKGROUNDS))),
            height=h, width=w,
            cy=_center(rng, h, min(h, w), SIZES[size]),
            cx=_center(rng, w, min(h, w), SIZES[size]),
        )
        recipes[rec.id] = rec
    return SyntheticCorpus(recipes)


def make_video_corpus(n: int, seed: int = 0, side_range=(56, 112), frame_range=(4, 12),
                      prefix: str = "vid") -> SyntheticCorpus:
    rng = np.random.default_rng(seed)
    recipes = {}
    for k in range(n):
        h, w = (int(v) for v in rng.integers(side_range[0], side_range[1] + 1, size=2))
        rec = Recipe(
            id=f"{prefix}{k:05d}",
            shape=str(rng.choice(SHAPES)),
            color=str(rng.choice(list(COLORS))),
            size="medium",
            background=str(rng.choice(list(BACKGROUNDS))),
            height=h, width=w, cy=0.5, cx=0.5,
            frames=int(rng.integers(frame_range[0], frame_range[1] + 1)),
            motion=str(rng.choice(MOTIONS)),
        )
        recipes[rec.id] = rec
    return SyntheticCorpus(recipes)
