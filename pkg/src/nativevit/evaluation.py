"""Zero-shot protocols and frozen-backbone probes.

All functions read model outputs only; none of them touches model weights.
Ties in every argmax go to the lowest index.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .ingest import Fixed, Native, NativeAspect, prepare_sequences

# token range used for video evaluation
EVAL_VIDEO_TOKENS = (576, 16384)


@dataclass
class ClassPromptSet:
    name: str
    prompts: list[str]
    embedding: np.ndarray  # mean of prompt embeddings, renormalized

    def __post_init__(self):
        n = float(np.linalg.norm(self.embedding))
        if abs(n - 1.0) > 1e-4:
            raise ValueError(f"class embedding for {self.name!r} has norm {n:.6f}")


def build_class_prompts(names: Sequence[str], text_encoder, templates: Sequence[str]) -> list[ClassPromptSet]:
    """``text_encoder`` maps a list of strings to unit-norm ``[n, D_e]`` rows."""
    out = []
    for name in names:
        prompts = [t.format(name) for t in templates]
        emb = np.asarray(text_encoder(prompts), dtype=np.float64).mean(0)
        out.append(ClassPromptSet(name, prompts, emb / np.linalg.norm(emb)))
    return out


def _unit(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("zero-norm embedding has no direction")
    return x / norm


def zero_shot_classify(image_embs, classes: Sequence[ClassPromptSet], labels=None):
    """Predicted class per image by cosine similarity, plus top-1 accuracy when labels are given."""
    if not classes:
        raise ValueError("zero-shot classification needs at least one class")
    sims = _unit(image_embs) @ np.stack([c.embedding for c in classes]).T
    pred = sims.argmax(axis=1)
    acc = None if labels is None else float(np.mean(pred == np.asarray(labels)))
    return pred, acc


def retrieval_recall_at_1(img_embs, txt_embs) -> tuple[float, float]:
    """``(text->image, image->text)`` Recall@1 for row-aligned pairs."""
    img, txt = _unit(img_embs), _unit(txt_embs)
    m = img.shape[0]
    if m == 0 or txt.shape[0] != m:
        raise ValueError(f"need M >= 1 aligned pairs, got {img.shape[0]} images and {txt.shape[0]} texts")
    sims = img @ txt.T
    target = np.arange(m)
    t2i = float(np.mean(sims.argmax(axis=0) == target))
    i2t = float(np.mean(sims.argmax(axis=1) == target))
    return t2i, i2t


def _check_labels(labels, num_classes):
    y = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    if y.numel() and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return y


class LinearProbe(nn.Module):
    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(dim, num_classes)

    def forward(self, x):
        return self.fc(x)


def linear_probe(features, labels, num_classes: int | None = None, epochs: int = 100, lr: float = 0.1,
                 seed: int = 0, weight_decay: float = 0.0):
    """Full-batch softmax regression on frozen features; returns (probe, train accuracy)."""
    x = torch.as_tensor(np.asarray(features), dtype=torch.float32)
    num_classes = num_classes or int(np.max(labels)) + 1
    y = _check_labels(labels, num_classes)
    torch.manual_seed(seed)
    probe = LinearProbe(x.shape[1], num_classes)
    opt = torch.optim.Adam(probe.parameters(), lr=lr, weight_decay=weight_decay)
    for _ in range(epochs):
        opt.zero_grad()
        F.cross_entropy(probe(x), y).backward()
        opt.step()
    with torch.no_grad():
        acc = float((probe(x).argmax(1) == y).float().mean())
    return probe, acc


def probe_accuracy(probe, features, labels) -> float:
    with torch.no_grad():
        out = probe(features) if not isinstance(probe, LinearProbe) else probe(
            torch.as_tensor(np.asarray(features), dtype=torch.float32))
    return float((out.argmax(1) == torch.as_tensor(np.asarray(labels))).float().mean())


class AttentiveProbe(nn.Module):
    """Learnable queries cross-attend over one sample's tokens, then an affine classifier."""

    def __init__(self, dim: int, num_classes: int, num_queries: int = 1):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(num_queries, dim) * dim ** -0.5)
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim, bias=False)
        self.fc = nn.Linear(dim * num_queries, num_classes)

    def pool(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[0] == 0:
            raise ValueError("attentive probe got a sample with no tokens")
        logits = self.queries @ self.key(tokens).T / math.sqrt(tokens.shape[1])
        return (torch.softmax(logits, dim=-1) @ self.value(tokens)).reshape(-1)

    def forward(self, token_sets: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.fc(torch.stack([self.pool(t) for t in token_sets]))


def attentive_probe(token_features: Sequence, labels, num_classes: int | None = None, epochs: int = 100,
                    lr: float = 0.01, seed: int = 0, num_queries: int = 1):
    """Train query + classifier jointly on frozen per-sample token sets; returns (probe, accuracy)."""
    sets = [torch.as_tensor(np.asarray(t), dtype=torch.float32) for t in token_features]
    for k, t in enumerate(sets):
        if t.ndim != 2 or t.shape[0] == 0:
            raise ValueError(f"sample {k} has an empty token set")
    num_classes = num_classes or int(np.max(labels)) + 1
    y = _check_labels(labels, num_classes)
    torch.manual_seed(seed)
    probe = AttentiveProbe(sets[0].shape[1], num_classes, num_queries)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        F.cross_entropy(probe(sets), y).backward()
        opt.step()
    with torch.no_grad():
        acc = float((probe(sets).argmax(1) == y).float().mean())
    return probe, acc


# --- model-level helpers -------------------------------------------------

def encode_images(model, samples, mode=Native(), chunk: int = 64):
    """Per-sample token features (list of ``[n_k, D]``) and unit embeddings ``[M, D_e]``."""
    cfg = model.vision.cfg
    tokens, embs = [], []
    from .packing import pack
    with torch.no_grad():
        for i in range(0, len(samples), chunk):
            seqs = prepare_sequences(samples[i:i + chunk], mode, None, cfg.patch_size, cfg.temporal_patch_size)
            batch = pack(seqs)
            feats, pooled = model.vision(batch)
            tokens += [feats[batch.boundaries[k]:batch.boundaries[k + 1]] for k in range(batch.num_segments)]
            embs.append(model.head.embed_image(pooled))
    return tokens, torch.cat(embs)


def resolution_mode_sweep(model, samples, captions, modes, class_names=None, labels=None, templates=None):
    """One row per mode: token statistics, retrieval recall and (optionally) zero-shot accuracy."""
    rows = []
    txt = model.embed_texts(list(captions)).numpy()
    classes = None
    if class_names is not None:
        classes = build_class_prompts(class_names, lambda p: model.embed_texts(p).numpy(), templates)
    for mode in modes:
        toks, img = encode_images(model, samples, mode)
        counts = [t.shape[0] for t in toks]
        t2i, i2t = retrieval_recall_at_1(img.numpy(), txt)
        row = {"mode": mode_name(mode), "length": mode_length(mode), "mean_tokens": float(np.mean(counts)),
               "max_tokens": int(np.max(counts)), "recall_t2i": t2i, "recall_i2t": i2t}
        if classes is not None:
            row["zero_shot_acc"] = zero_shot_classify(img.numpy(), classes, labels)[1]
        rows.append(row)
    return rows


def mode_name(mode) -> str:
    return {Fixed: "fixed", NativeAspect: "native_aspect", Native: "native"}[type(mode)]


def mode_length(mode) -> int:
    if isinstance(mode, Fixed):
        return (mode.size // 14) ** 2
    if isinstance(mode, NativeAspect):
        return mode.tokens
    return 0


def write_csv(rows: Sequence[dict], path) -> None:
    if not rows:
        return
    fields = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


def summary_table(rows: Sequence[dict]) -> str:
    """Plain-text aligned table of result rows."""
    if not rows:
        return "(no results)"
    fields = list(dict.fromkeys(k for r in rows for k in r))
    cells = [[f"{r.get(k, ''):.4g}" if isinstance(r.get(k), float) else str(r.get(k, "")) for k in fields]
             for r in rows]
    widths = [max(len(f), *(len(c[i]) for c in cells)) for i, f in enumerate(fields)]
    lines = ["  ".join(f.ljust(w) for f, w in zip(fields, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
