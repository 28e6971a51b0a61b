"""Finite-difference audit of analytic gradients.

Each parameter tensor is probed along a few random unit directions ``d``:
the central difference ``(f(p + h d) - f(p - h d)) / 2h`` must match
``<grad f, d>``. Directional probes cover every entry of a tensor at the
cost of two forwards each, which keeps a full-model audit in seconds.
"""

from __future__ import annotations

import torch

from .encoder import PRESETS, Encoder, EncoderConfig
from .ingest import PatchGrid
from .objectives import AlignmentHead, kl_distillation_loss, sigmoid_contrastive_loss
from .packing import pack


def directional_check(loss_fn, params: dict, directions: int = 3, step: float = 1e-5, seed: int = 0,
                      floor: float = 1e-6) -> list[dict]:
    """One row per parameter: worst relative error over ``directions`` probes.

    ``loss_fn()`` must be a deterministic scalar of the tensors in ``params``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    g = torch.Generator().manual_seed(seed)
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    grads = {k: p.grad.detach().clone() for k, p in params.items()}
    rows = []
    for name, p in params.items():
        worst, worst_a, worst_n = 0.0, 0.0, 0.0
        for _ in range(directions):
            d = torch.randn(p.shape, generator=g, dtype=p.dtype)
            d /= d.norm()
            with torch.no_grad():
                orig = p.detach().clone()
                p.add_(step * d)
                up = float(loss_fn())
                p.copy_(orig - step * d)
                down = float(loss_fn())
                p.copy_(orig)
            numeric = (up - down) / (2 * step)
            analytic = float((grads[name] * d).sum())
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            if rel >= worst:
                worst, worst_a, worst_n = rel, analytic, numeric
        rows.append({"group": name, "numel": p.numel(), "analytic": worst_a, "numeric": worst_n,
                     "rel_error": worst})
    return rows


def audit_tiny(cfg: EncoderConfig = PRESETS["tiny"], directions: int = 3, step: float = 1e-5,
               seed: int = 0) -> list[dict]:
    """Audit the encoder, alignment head and both losses in float64.

    Residual branches are opened to 0.5 so that every block parameter has a
    gradient well above the difference noise floor. The batch packs an image
    and a two-step clip so temporal positions are exercised too.
    """
    torch.manual_seed(seed)
    enc = Encoder(cfg, seed=seed).double()
    for blk in enc.blocks:
        torch.nn.init.constant_(blk.attn.layerscale, 0.5)
        torch.nn.init.constant_(blk.ffn.layerscale, 0.5)
    head = AlignmentHead(cfg.hidden, 24, embed_dim=16, seed=seed + 1).double()
    g = torch.Generator().manual_seed(seed + 2)
    seqs = [(grid, torch.randn(grid.token_count, cfg.patch_dim, generator=g, dtype=torch.float64))
            for grid in (PatchGrid(1, 2, 3), PatchGrid(2, 2, 2))]
    batch = pack(seqs)
    text = torch.randn(2, 24, generator=g, dtype=torch.float64, requires_grad=True)
    teacher = torch.randn(2, cfg.hidden, generator=g, dtype=torch.float64)

    def loss():
        _, pooled = enc(batch)
        img = head.embed_image(pooled)
        txt = head.embed_text(text)
        contrastive = sigmoid_contrastive_loss(img, txt, head.temperature, head.bias)
        return contrastive + kl_distillation_loss(pooled, teacher)

    params = {f"encoder.{k}": p for k, p in enc.named_parameters()}
    params.update({f"head.{k}": p for k, p in head.named_parameters()})
    params["text_features"] = text
    return directional_check(loss, params, directions=directions, step=step, seed=seed)


def worst(rows) -> float:
    return max(r["rel_error"] for r in rows)


__all__ = ["audit_tiny", "directional_check", "worst"]
