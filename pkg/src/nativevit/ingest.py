"""Native-resolution ingest: rescaling, frame sampling and patchification.

Every visual input is a ``[T, C, H, W]`` float array. Images carry ``T = 1``
and are lifted to two identical frames before patchification so that images
and videos share one temporal patch size of 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

IMAGE = "image"
VIDEO = "video"
MODALITIES = (IMAGE, VIDEO)

# Per-channel normalization constants (configuration, not learned).
PIXEL_MEAN = (0.5, 0.5, 0.5)
PIXEL_STD = (0.5, 0.5, 0.5)


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class VisualSample:
    pixels: np.ndarray  # [T, C, H, W], intensities in [0, 1] until normalized
    modality: str = IMAGE
    id: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be [T, C, H, W], got shape {self.pixels.shape}")
        t, _, h, w = self.pixels.shape
        if t < 1 or h < 1 or w < 1:
            raise ValueError(f"empty sample {self.id!r}: shape {self.pixels.shape}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.modality == IMAGE and t > 2:
            # T = 2 only arises from image_to_video lifting
            raise ValueError(f"image {self.id!r} has {t} frames")

    @property
    def frames(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[2]

    @property
    def width(self) -> int:
        return self.pixels.shape[3]

    def with_pixels(self, pixels: np.ndarray) -> "VisualSample":
        return replace(self, pixels=pixels)


def image_sample(pixels: np.ndarray, id: str = "") -> VisualSample:
    """Wrap an ``[H, W, C]`` or ``[C, H, W]`` image as a one-frame sample."""
    x = np.asarray(pixels)
    if x.ndim == 3 and x.shape[-1] in (1, 3) and x.shape[0] not in (1, 3):
        x = x.transpose(2, 0, 1)
    if x.dtype == np.uint8:
        x = x.astype(np.float32) / 255.0
    return VisualSample(np.ascontiguousarray(x[None], dtype=np.float32), IMAGE, id)


@dataclass(frozen=True)
class PatchGrid:
    t_patches: int
    rows: int
    cols: int
    patch_size: int = 14
    temporal_patch_size: int = 2
    sample_id: str = ""

    @property
    def token_count(self) -> int:
        return self.t_patches * self.rows * self.cols

    def positions(self) -> np.ndarray:
        """``(t, row, col)`` per token in patchify order."""
        t, r, c = np.meshgrid(
            np.arange(self.t_patches), np.arange(self.rows), np.arange(self.cols), indexing="ij"
        )
        return np.stack([t.ravel(), r.ravel(), c.ravel()], axis=1).astype(np.int64)


@dataclass(frozen=True)
class TokenBudget:
    l_max: int
    l_min: int = 1

    def __post_init__(self):
        if not (1 <= self.l_min <= self.l_max):
            raise ValueError(f"invalid token budget: l_min={self.l_min}, l_max={self.l_max}")


def temporal_patches(frames: int, temporal_patch_size: int = 2) -> int:
    # images count as one temporal patch once lifted
    return -(-frames // temporal_patch_size)


def resize_pixels(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear (antialiased) resize of a ``[T, C, H, W]`` array."""
    if pixels.shape[2] == height and pixels.shape[3] == width:
        return pixels
    x = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))
    y = F.interpolate(x, size=(height, width), mode="bilinear", align_corners=False, antialias=True)
    return y.numpy()


def center_crop(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = pixels.shape[2:]
    top = (h - height) // 2
    left = (w - width) // 2
    return pixels[:, :, top:top + height, left:left + width]


def budget_grid(samples: Sequence[VisualSample], l_max: int, patch_size: int,
                temporal_patch_size: int = 2) -> list[tuple[int, int]]:
    """Patch rows/cols per sample after a common rescale toward ``l_max`` tokens.

    With ``s = sqrt(l_max / l_total)`` (``l_total`` in un-quantized tokens),
    ``rows = floor(H * s / p)`` equals ``isqrt(H^2 * l_max // sum(n_t * H * W))``,
    so the whole computation stays in exact integer arithmetic and the budget
    bound cannot be broken by float rounding.
    """
    area = sum(temporal_patches(s.frames, temporal_patch_size) * s.height * s.width for s in samples)
    out = []
    for s in samples:
        rows = math.isqrt(s.height * s.height * l_max // area)
        cols = math.isqrt(s.width * s.width * l_max // area)
        if rows == 0 or cols == 0:
            raise BudgetError(
                f"budget too small for sample count: sample {s.id!r} "
                f"({s.height}x{s.width}) would have zero patches under l_max={l_max}"
            )
        out.append((rows, cols))
    return out


def resize_to_budget(samples: Sequence[VisualSample], budget: TokenBudget, patch_size: int = 14,
                     temporal_patch_size: int = 2) -> list[VisualSample]:
    if not samples:
        raise ValueError("resize_to_budget needs at least one sample")
    grids = budget_grid(samples, budget.l_max, patch_size, temporal_patch_size)
    return [
        s.with_pixels(resize_pixels(s.pixels, r * patch_size, c * patch_size))
        for s, (r, c) in zip(samples, grids)
    ]


def fit_clip_to_range(sample: VisualSample, budget: TokenBudget, patch_size: int = 14,
                      temporal_patch_size: int = 2) -> VisualSample:
    """Rescale one clip so its token count lands in ``[l_min, l_max]`` where possible.

    Clips already inside the range only get their sides floored to patch
    multiples. Upscaling toward ``l_min`` also floors, so the result may fall a
    few tokens short of ``l_min``; ``l_max`` is never exceeded.
    """
    nt = temporal_patches(sample.frames, temporal_patch_size)
    tokens = nt * (sample.height / patch_size) * (sample.width / patch_size)
    if budget.l_min <= tokens <= budget.l_max:
        rows, cols = sample.height // patch_size, sample.width // patch_size
        if rows == 0 or cols == 0:
            raise BudgetError(f"sample {sample.id!r} is smaller than one patch")
    else:
        target = budget.l_max if tokens > budget.l_max else budget.l_min
        # per-frame token target, exact integer form as in budget_grid
        rows, cols = budget_grid([sample], target, patch_size, temporal_patch_size)[0]
    return sample.with_pixels(resize_pixels(sample.pixels, rows * patch_size, cols * patch_size))


@dataclass(frozen=True)
class Fixed:
    """Shorter edge to ``size``, then center crop to ``size x size``."""
    size: int


@dataclass(frozen=True)
class NativeAspect:
    """Aspect-preserving rescale to at most ``tokens`` patches."""
    tokens: int


@dataclass(frozen=True)
class Native:
    """Keep native pixels; sides are center-cropped down to patch multiples."""


def parse_mode(text: str):
    """``native`` | ``fixed:224`` | ``aspect:768`` -> resolution mode object."""
    name, _, arg = text.strip().lower().partition(":")
    if name == "native" and not arg:
        return Native()
    if name == "fixed" and arg:
        return Fixed(int(arg))
    if name in ("aspect", "nativeaspect") and arg:
        return NativeAspect(int(arg))
    raise ValueError(f"unrecognized resolution mode {text!r}")


def resize_modes(sample: VisualSample, mode, patch_size: int = 14) -> VisualSample:
    h, w = sample.height, sample.width
    if isinstance(mode, Fixed):
        if mode.size % patch_size or mode.size < patch_size:
            raise ValueError(f"Fixed size {mode.size} is not a positive multiple of {patch_size}")
        short = min(h, w)
        nh = max(mode.size, round(h * mode.size / short))
        nw = max(mode.size, round(w * mode.size / short))
        pixels = center_crop(resize_pixels(sample.pixels, nh, nw), mode.size, mode.size)
        return sample.with_pixels(np.ascontiguousarray(pixels))
    if isinstance(mode, NativeAspect):
        if mode.tokens < 1:
            raise ValueError("NativeAspect needs a positive token target")
        rows = math.isqrt(h * mode.tokens // w)
        cols = math.isqrt(w * mode.tokens // h)
        if rows == 0 or cols == 0:
            raise BudgetError(f"NativeAspect({mode.tokens}) leaves {sample.id!r} with zero patches")
        return sample.with_pixels(resize_pixels(sample.pixels, rows * patch_size, cols * patch_size))
    if isinstance(mode, Native):
        rows, cols = h // patch_size, w // patch_size
        if rows == 0 or cols == 0:
            raise BudgetError(f"sample {sample.id!r} ({h}x{w}) is smaller than one patch")
        pixels = center_crop(sample.pixels, rows * patch_size, cols * patch_size)
        return sample.with_pixels(np.ascontiguousarray(pixels))
    raise TypeError(f"unknown resolution mode {mode!r}")


def image_to_video(image: VisualSample) -> VisualSample:
    """Duplicate a single frame into a two-frame clip (modality is kept)."""
    if image.frames != 1:
        raise ValueError(f"image_to_video expects one frame, got T={image.frames}")
    return image.with_pixels(np.concatenate([image.pixels, image.pixels], axis=0))


def frame_indices(frames: int, f_max: int) -> np.ndarray:
    """Uniform indices ``round(i * (T - 1) / (f_max - 1))``, halves rounded up."""
    i = np.arange(f_max, dtype=np.int64)
    # integer form of floor(i * (T-1) / (f_max-1) + 1/2)
    return (2 * i * (frames - 1) + (f_max - 1)) // (2 * (f_max - 1))


def sample_frames(video: VisualSample, f_max: int, temporal_patch_size: int = 2) -> VisualSample:
    if f_max < 2 or f_max % 2:
        raise ValueError(f"f_max must be an even number >= 2, got {f_max}")
    t = video.frames
    if t > f_max:
        return video.with_pixels(video.pixels[frame_indices(t, f_max)])
    return pad_frames(video, temporal_patch_size)


def pad_frames(sample: VisualSample, temporal_patch_size: int = 2) -> VisualSample:
    """Repeat the final frame up to the next multiple of ``temporal_patch_size``."""
    extra = -sample.frames % temporal_patch_size
    if not extra:
        return sample
    tail = np.repeat(sample.pixels[-1:], extra, axis=0)
    return sample.with_pixels(np.concatenate([sample.pixels, tail], axis=0))


def as_clip(sample: VisualSample, temporal_patch_size: int = 2) -> VisualSample:
    """Lift images and pad videos so ``T`` divides by the temporal patch size."""
    if sample.frames == 1 and temporal_patch_size == 2:
        return image_to_video(sample)
    return pad_frames(sample, temporal_patch_size)


def normalize_pixels(pixels: np.ndarray, mean=PIXEL_MEAN, std=PIXEL_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=pixels.dtype).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=pixels.dtype).reshape(1, -1, 1, 1)
    return (pixels - mean) / std


def patchify(sample: VisualSample, patch_size: int = 14,
             temporal_patch_size: int = 2) -> tuple[PatchGrid, np.ndarray]:
    """Slice ``[T, C, H, W]`` into an ``[N, pt*C*p*p]`` patch matrix.

    Patches are ordered time-major, then row, then column; each patch is
    flattened in (frame, channel, y, x) order.
    """
    t, c, h, w = sample.pixels.shape
    p, pt = patch_size, temporal_patch_size
    for axis, size, unit in (("T", t, pt), ("H", h, p), ("W", w, p)):
        if size % unit:
            raise ValueError(f"axis {axis}={size} of {sample.id!r} is not divisible by {unit}")
    nt, rows, cols = t // pt, h // p, w // p
    x = sample.pixels.reshape(nt, pt, c, rows, p, cols, p)
    x = x.transpose(0, 3, 5, 1, 2, 4, 6).reshape(nt * rows * cols, pt * c * p * p)
    grid = PatchGrid(nt, rows, cols, p, pt, sample.id)
    return grid, np.ascontiguousarray(x)


def unpatchify(grid: PatchGrid, patches: np.ndarray, channels: int = 3) -> np.ndarray:
    p, pt = grid.patch_size, grid.temporal_patch_size
    x = np.asarray(patches).reshape(grid.t_patches, grid.rows, grid.cols, pt, channels, p, p)
    x = x.transpose(0, 3, 4, 1, 5, 2, 6)
    return x.reshape(grid.t_patches * pt, channels, grid.rows * p, grid.cols * p)


def aspect_error_bound(height: int, width: int, new_height: int, patch_size: int) -> float:
    """One-patch quantization bound on ``|W'/H' - W/H|`` after floor-to-multiple.

    With ``W' in (Ws - p, Ws]`` and ``H' in (Hs - p, Hs]`` the ratio can rise by
    less than ``(W/H) * p / H'`` and fall by less than ``p / H'``.
    """
    return patch_size * max(1.0, width / height) / new_height


def prepare_sequences(samples: Sequence[VisualSample], policy="native", budget: TokenBudget | None = None,
                      patch_size: int = 14, temporal_patch_size: int = 2,
                      f_max: int | None = None) -> list[tuple[PatchGrid, np.ndarray]]:
    """Resize, lift, normalize and patchify a batch ready for packing.

    ``policy`` is a resolution mode object or one of ``"fixed224"`` and
    ``"native"``. Under ``"native"`` images share one batch-level rescale to
    ``budget.l_max`` tokens while each video clip is frame-sampled to
    ``f_max`` frames and fitted to ``[l_min, l_max]`` on its own.
    """
    if isinstance(policy, str):
        policy = Fixed(224) if policy == "fixed224" else parse_mode(policy)
    out: list = [None] * len(samples)
    if isinstance(policy, Native) and budget is not None:
        img_idx = [i for i, s in enumerate(samples) if s.modality == IMAGE]
        vid_idx = [i for i, s in enumerate(samples) if s.modality == VIDEO]
        resized = {}
        if img_idx:
            scaled = resize_to_budget([samples[i] for i in img_idx], budget, patch_size, temporal_patch_size)
            resized.update(zip(img_idx, scaled))
        for i in vid_idx:
            v = samples[i]
            if f_max is not None:
                v = sample_frames(v, f_max, temporal_patch_size)
            resized[i] = fit_clip_to_range(v, budget, patch_size, temporal_patch_size)
        ready = [resized[i] for i in range(len(samples))]
    else:
        ready = []
        for s in samples:
            if s.modality == VIDEO and f_max is not None:
                s = sample_frames(s, f_max, temporal_patch_size)
            ready.append(resize_modes(s, policy, patch_size))
    for i, s in enumerate(ready):
        clip = as_clip(s, temporal_patch_size)
        clip = clip.with_pixels(normalize_pixels(clip.pixels))
        out[i] = patchify(clip, patch_size, temporal_patch_size)
    return out
