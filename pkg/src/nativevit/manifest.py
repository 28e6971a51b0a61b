"""File-backed corpora described by a JSON-lines manifest.

Each line is ``{"id": ..., "path": ..., "modality": "image"|"video",
"caption": ...}``. Images are any format Pillow reads; a video is a
directory of frame images taken in sorted filename order. Relative paths
resolve against the manifest's directory.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .ingest import IMAGE, VIDEO, VisualSample


class ManifestError(ValueError):
    pass


def read_image(path) -> np.ndarray:
    """``[3, H, W]`` float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def read_frames(directory) -> np.ndarray:
    files = sorted(p for p in Path(directory).iterdir() if p.is_file())
    if not files:
        raise ManifestError(f"video directory {directory} has no frames")
    frames = [read_image(f) for f in files]
    if len({f.shape for f in frames}) != 1:
        raise ManifestError(f"frames in {directory} differ in size")
    return np.stack(frames)


class ManifestCorpus:
    """Same interface as :class:`nativevit.synthetic.SyntheticCorpus`, pixels read lazily."""

    def __init__(self, entries: dict[str, dict], root: Path):
        self.entries, self.root = entries, root

    @classmethod
    def load(cls, path) -> "ManifestCorpus":
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
        except OSError as e:
            raise ManifestError(f"cannot read manifest {path}: {e}") from e
        entries = {}
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                e = json.loads(line)
            except json.JSONDecodeError as err:
                raise ManifestError(f"{path}:{n}: not valid JSON ({err.msg})") from err
            missing = {"id", "path"} - set(e)
            if missing:
                raise ManifestError(f"{path}:{n}: missing field(s) {sorted(missing)}")
            e.setdefault("modality", IMAGE)
            e.setdefault("caption", "")
            if e["modality"] not in (IMAGE, VIDEO):
                raise ManifestError(f"{path}:{n}: modality must be image or video")
            if e["id"] in entries:
                raise ManifestError(f"{path}:{n}: duplicate id {e['id']!r}")
            entries[e["id"]] = e
        return cls(entries, path.parent)

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return list(self.entries)

    def caption(self, id: str) -> str:
        return self.entries[id]["caption"]

    def modality(self, id: str) -> str:
        return self.entries[id]["modality"]

    def _path(self, id: str) -> Path:
        p = Path(self.entries[id]["path"])
        return p if p.is_absolute() else self.root / p

    def sample(self, id: str) -> VisualSample:
        p = self._path(id)
        try:
            if self.modality(id) == VIDEO:
                px = read_frames(p)
            else:
                px = read_image(p)[None]
        except (OSError, Image.UnidentifiedImageError) as e:
            raise ManifestError(f"cannot read {p}: {e}") from e
        return VisualSample(px, self.modality(id), id)
