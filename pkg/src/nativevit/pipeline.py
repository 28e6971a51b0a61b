"""Four-stage training orchestration at desk scale.

Stage 1 trains the vision tower from scratch at 224x224 against a frozen text
tower with sigmoid contrastive loss plus KL distillation from a frozen
teacher. Stage 2 unfreezes the text tower. Stage 3 switches to packed native
resolution batches. Stage 4 adds video through modality-pure alternating
batches.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint
from .encoder import Encoder, EncoderConfig, patch_dropout
from .ingest import IMAGE, VIDEO, TokenBudget, prepare_sequences
from .objectives import (AlignmentHead, TeacherStub, TextConfig, TextTower, Tokenizer, encode_text,
                         hybrid_loss, kl_distillation_loss, lambda_schedule, sigmoid_contrastive_loss)
from .packing import pack

log = logging.getLogger(__name__)

MIXED = "mixed"

# peak -> floor learning rates per stage, keyed by model size
PAPER_LR = {
    "0.3b": [(1e-3, 1e-6), (1e-5, 0.0), (1e-5, 0.0), (4e-6, 0.0)],
    "0.6b": [(1e-3, 1e-6), (1e-5, 0.0), (1e-5, 0.0), (4e-6, 0.0)],
    "1b": [(8e-4, 1e-7), (6e-6, 0.0), (6e-6, 0.0), (2e-6, 0.0)],
}
PAPER_SEEN = [12_000_000_000, 1_000_000_000, 1_000_000_000, 600_000_000]
PAPER_LAMBDA_DECAY = 8_000_000_000
PAPER_BATCH = 32768
PAPER_BATCH_STAGE4 = (26_000, 4_000)
DESK_BATCH = (64, 8)


class MissingCheckpointError(RuntimeError):
    pass


@dataclass
class StageSpec:
    index: int
    modalities: list[str]
    resolution: str  # "fixed224", "native" or a mode string such as "fixed:112"
    token_range: tuple[int, int]
    vision_trainable: bool
    text_trainable: bool
    teacher: bool
    losses: list[str]
    seen_samples: int
    peak_lr: float
    min_lr: float
    warmup_steps: int
    patch_dropout: float
    batch_image: int
    batch_video: int = 0
    text_lr_scale: float = 1.0
    lambda0: float = 0.0
    lambda_decay: int = 0  # seen-sample count at which lambda drops to zero
    paper_seen_samples: int = 0
    paper_batch: int = PAPER_BATCH
    init: str = "xavier"

    @property
    def budget(self) -> TokenBudget:
        return TokenBudget(self.token_range[1], self.token_range[0])

    def effective_warmup(self, total_steps: int) -> int:
        """Warmup length keeping the paper's warmup fraction of the stage.

        Unscaled plans get the literal step count; scaled plans keep the ratio
        warmup / (paper_seen_samples / paper_batch), at least one step and
        always short of ``total_steps``.
        """
        if not self.paper_seen_samples:
            w = self.warmup_steps
        else:
            paper_steps = self.paper_seen_samples / self.paper_batch
            w = round(self.warmup_steps * total_steps / paper_steps)
        return int(min(max(w, 1), max(total_steps - 1, 0)))


@dataclass
class StagePlan:
    stages: list[StageSpec]
    scale_factor: float = 1.0
    model_size: str = "0.3b"

    def __post_init__(self):
        idx = [s.index for s in self.stages]
        if idx != list(range(1, len(self.stages) + 1)):
            raise ValueError(f"stages must be numbered 1..n in order, got {idx}")
        for s in self.stages:
            if s.teacher and s.index != 1:
                raise ValueError(f"only stage 1 may use a teacher (stage {s.index})")
            if s.text_trainable and s.index != 2:
                raise ValueError(f"only stage 2 trains the text tower (stage {s.index})")
            if VIDEO in s.modalities and s.index != 4:
                raise ValueError(f"only stage 4 sees video (stage {s.index})")

    def stage(self, index: int) -> StageSpec:
        return self.stages[index - 1]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "StagePlan":
        d = json.loads(text)
        stages = []
        for s in d["stages"]:
            s = dict(s)
            s["token_range"] = tuple(s["token_range"])
            stages.append(StageSpec(**s))
        return cls(stages, d.get("scale_factor", 1.0), d.get("model_size", "0.3b"))

    @classmethod
    def load(cls, path) -> "StagePlan":
        return cls.from_json(Path(path).read_text())


def default_stage_plan(scale_factor: float = 1.0, model_size: str = "0.3b",
                       batch_image: int | None = None, batch_video: int | None = None) -> StagePlan:
    """Table-driven four-stage plan with sample budgets scaled by ``scale_factor``.

    Only the seen-sample budgets and the lambda decay point scale. Batch sizes
    stay at the paper's values unless ``batch_image``/``batch_video`` are given.
    """
    if not 0 < scale_factor <= 1:
        raise ValueError(f"scale_factor must be in (0, 1], got {scale_factor}")
    lrs = PAPER_LR["0.3b" if model_size == "tiny" else model_size]
    seen = [int(round(n * scale_factor)) for n in PAPER_SEEN]
    bi = batch_image or PAPER_BATCH
    bi4 = batch_image or PAPER_BATCH_STAGE4[0]
    bv4 = batch_video or PAPER_BATCH_STAGE4[1]
    common = dict(vision_trainable=True)
    stages = [
        StageSpec(1, [IMAGE], "fixed224", (256, 256), text_trainable=False, teacher=True,
                  losses=["sigmoid", "kl"], seen_samples=seen[0], peak_lr=lrs[0][0], min_lr=lrs[0][1],
                  warmup_steps=2000, patch_dropout=0.5, batch_image=bi, lambda0=1.0,
                  lambda_decay=int(round(PAPER_LAMBDA_DECAY * scale_factor)),
                  paper_seen_samples=PAPER_SEEN[0], init="xavier", **common),
        StageSpec(2, [IMAGE], "fixed224", (256, 256), text_trainable=True, teacher=False,
                  losses=["sigmoid"], seen_samples=seen[1], peak_lr=lrs[1][0], min_lr=lrs[1][1],
                  warmup_steps=2000, patch_dropout=0.0, batch_image=bi, text_lr_scale=0.1,
                  paper_seen_samples=PAPER_SEEN[1], init="from stage-1", **common),
        StageSpec(3, [IMAGE], "native", (64, 16384), text_trainable=False, teacher=False,
                  losses=["sigmoid"], seen_samples=seen[2], peak_lr=lrs[2][0], min_lr=lrs[2][1],
                  warmup_steps=2000, patch_dropout=0.5, batch_image=bi,
                  paper_seen_samples=PAPER_SEEN[2], init="from stage-2", **common),
        StageSpec(4, [IMAGE, VIDEO], "native", (64, 16384), text_trainable=False, teacher=False,
                  losses=["sigmoid"], seen_samples=seen[3], peak_lr=lrs[3][0], min_lr=lrs[3][1],
                  warmup_steps=1000, patch_dropout=0.5, batch_image=bi4, batch_video=bv4,
                  paper_seen_samples=PAPER_SEEN[3], paper_batch=sum(PAPER_BATCH_STAGE4),
                  init="from stage-3", **common),
    ]
    return StagePlan(stages, scale_factor, model_size)


def desk_stage_plan(scale_factor: float = 1e-6) -> StagePlan:
    return default_stage_plan(scale_factor, "tiny", *DESK_BATCH)


def cosine_lr(step: int, warmup: int, total: int, peak: float, floor: float = 0.0) -> float:
    """Linear warmup to ``peak`` then half-cosine decay to ``floor``."""
    if total <= 0:
        raise ValueError(f"total steps must be positive, got {total}")
    if not 0 <= warmup < total:
        raise ValueError(f"warmup ({warmup}) must be in [0, total={total})")
    if step <= warmup:
        return peak * step / warmup if warmup else peak
    if step >= total:
        return floor
    frac = (step - warmup) / (total - warmup)
    return floor + 0.5 * (peak - floor) * (1 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class BatchTicket:
    modality: str  # image | video | mixed
    ids: tuple[str, ...]
    epoch: int
    step: int


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def _chunks(ids: Sequence[str], size: int) -> list[tuple[str, ...]]:
    return [tuple(ids[i:i + size]) for i in range(0, len(ids), size)]


def interleave_ranks(n_image: int, n_video: int) -> list[str]:
    """Evenly spaced pattern: video batch ``k`` lands at 1-based rank ``ceil((k+1) n / n_v)``."""
    n = n_image + n_video
    slots = [IMAGE] * n
    for k in range(n_video):
        slots[-(-(k + 1) * n // n_video) - 1] = VIDEO
    return slots


def alternating_scheduler(image_ids, video_ids, global_batch_image: int, global_batch_video: int,
                          seed: int = 0, epoch: int = 0, random_interleave: bool = False) -> list[BatchTicket]:
    """One epoch of modality-pure batches, image and video batches interleaved.

    Both pools are shuffled with an epoch-derived seed and cut into batches
    (the last batch of a pool may be short); every id appears exactly once.
    """
    image_ids, video_ids = list(image_ids), list(video_ids)
    if not image_ids and not video_ids:
        raise ValueError("both id pools are empty")
    if image_ids and global_batch_image > len(image_ids):
        raise ValueError(f"image batch {global_batch_image} exceeds pool of {len(image_ids)}")
    if video_ids and global_batch_video > len(video_ids):
        raise ValueError(f"video batch {global_batch_video} exceeds pool of {len(video_ids)}")
    rng = _epoch_rng(seed, epoch)
    imgs = [image_ids[i] for i in rng.permutation(len(image_ids))]
    vids = [video_ids[i] for i in rng.permutation(len(video_ids))]
    ib = _chunks(imgs, global_batch_image) if imgs else []
    vb = _chunks(vids, global_batch_video) if vids else []
    if random_interleave:
        order = [IMAGE] * len(ib) + [VIDEO] * len(vb)
        order = [order[i] for i in rng.permutation(len(order))]
    else:
        order = interleave_ranks(len(ib), len(vb))
    it = {IMAGE: iter(ib), VIDEO: iter(vb)}
    return [BatchTicket(m, next(it[m]), epoch, s) for s, m in enumerate(order)]


def mixed_scheduler(image_ids, video_ids, global_batch: int, seed: int = 0, epoch: int = 0) -> list[BatchTicket]:
    """One epoch over a single shuffled pool; batches may mix modalities."""
    image_ids, video_ids = list(image_ids), list(video_ids)
    pool = image_ids + video_ids
    if not pool:
        raise ValueError("both id pools are empty")
    if global_batch > len(pool):
        raise ValueError(f"batch {global_batch} exceeds pool of {len(pool)}")
    videos = set(video_ids)
    rng = _epoch_rng(seed, epoch)
    shuffled = [pool[i] for i in rng.permutation(len(pool))]
    tickets = []
    for s, ids in enumerate(_chunks(shuffled, global_batch)):
        kinds = {VIDEO if i in videos else IMAGE for i in ids}
        tickets.append(BatchTicket(kinds.pop() if len(kinds) == 1 else MIXED, ids, epoch, s))
    return tickets


class DualTowerModel(nn.Module):
    """Vision encoder, text tower, alignment head and (stage 1 only) a teacher."""

    def __init__(self, encoder_cfg: EncoderConfig, tokenizer: Tokenizer, text_cfg: TextConfig | None = None,
                 embed_dim: int = 64, teacher_cfg: EncoderConfig | None = None, seed: int = 0):
        super().__init__()
        self.tokenizer = tokenizer
        text_cfg = text_cfg or TextConfig(vocab_size=len(tokenizer), eos_id=tokenizer.eos_id)
        s = 0 if seed is None else seed  # seed=None: weights are about to be loaded
        self.vision = Encoder(encoder_cfg, seed=s)
        self.text = TextTower(text_cfg, seed=s + 100)
        self.head = AlignmentHead(encoder_cfg.hidden, text_cfg.hidden, embed_dim, seed=s + 200)
        self.teacher = TeacherStub(teacher_cfg, encoder_cfg.hidden, seed=s + 300) if teacher_cfg else None
        self.completed_stage = 0

    def meta(self) -> dict:
        return {
            "encoder": self.vision.cfg.to_dict(),
            "text": self.text.cfg.to_dict(),
            "embed_dim": self.head.vision_proj.out_features,
            "vocab": self.tokenizer.vocab,
            "completed_stage": self.completed_stage,
        }

    def arrays(self) -> dict:
        out = {}
        for name in ("vision", "text", "head"):
            out.update(checkpoint.module_arrays(getattr(self, name), name + "."))
        return out

    def save(self, path) -> None:
        checkpoint.save(path, self.arrays(), self.meta())

    @classmethod
    def load(cls, path, encoder_cfg: EncoderConfig | None = None) -> "DualTowerModel":
        arrays, meta = checkpoint.load(path)
        return cls.from_arrays(arrays, meta, encoder_cfg)

    @classmethod
    def from_arrays(cls, arrays, meta, encoder_cfg: EncoderConfig | None = None) -> "DualTowerModel":
        from .objectives import PAD, UNK, EOS
        vocab = meta["vocab"]
        tok = Tokenizer([w for w in vocab if w not in (PAD, UNK, EOS)])
        if tok.vocab != vocab:
            raise checkpoint.CheckpointError("checkpoint vocabulary is not in canonical order")
        cfg = encoder_cfg or EncoderConfig.from_dict(meta["encoder"])
        model = cls(cfg, tok, TextConfig(**meta["text"]), meta["embed_dim"], seed=None)
        for name in ("vision", "text", "head"):
            checkpoint.load_module_arrays(getattr(model, name), arrays, name + ".")
        model.completed_stage = int(meta.get("completed_stage", 0))
        return model

    @torch.no_grad()
    def embed_images(self, sequences) -> torch.Tensor:
        _, pooled = self.vision(pack(sequences))
        return self.head.embed_image(pooled)

    @torch.no_grad()
    def embed_texts(self, captions: Sequence[str]) -> torch.Tensor:
        return self.head.embed_text(encode_text(self.tokenizer.encode_batch(captions), self.text))


def build_model(encoder_cfg: EncoderConfig, tokenizer: Tokenizer, seed: int = 0, embed_dim: int = 64,
                with_teacher: bool = True) -> DualTowerModel:
    teacher_cfg = replace(encoder_cfg, layerscale_init=1.0) if with_teacher else None
    model = DualTowerModel(encoder_cfg, tokenizer, embed_dim=embed_dim, teacher_cfg=teacher_cfg, seed=seed)
    return model


def stage_tickets(stage: StageSpec, image_ids, video_ids, seed: int, mixed: bool = False) -> list[BatchTicket]:
    """Tickets over as many epochs as the stage's sample budget needs, last one trimmed."""
    use_video = VIDEO in stage.modalities and video_ids
    vids = list(video_ids) if use_video else []
    imgs = list(image_ids) if IMAGE in stage.modalities else []
    if not imgs and not vids:
        raise ValueError(f"stage {stage.index} has no samples of modalities {stage.modalities}")
    bi = min(stage.batch_image, len(imgs)) if imgs else 1
    bv = min(stage.batch_video or 1, len(vids)) if vids else 1
    tickets, seen, epoch = [], 0, 0
    while seen < stage.seen_samples:
        if mixed:
            epoch_t = mixed_scheduler(imgs, vids, bi, seed, epoch)
        else:
            epoch_t = alternating_scheduler(imgs, vids, bi, bv, seed, epoch)
        for t in epoch_t:
            take = min(len(t.ids), stage.seen_samples - seen)
            tickets.append(BatchTicket(t.modality, t.ids[:take], t.epoch, len(tickets)))
            seen += take
            if seen >= stage.seen_samples:
                break
        epoch += 1
    return tickets


def _param_groups(modules_lr, weight_decay):
    groups = []
    for modules, lr in modules_lr:
        decay, no_decay = [], []
        for m in modules:
            for p in m.parameters():
                if p.requires_grad:
                    (decay if p.ndim >= 2 else no_decay).append(p)
        if decay:
            groups.append({"params": decay, "weight_decay": weight_decay, "base_lr": lr})
        if no_decay:
            groups.append({"params": no_decay, "weight_decay": 0.0, "base_lr": lr})
    return groups


@dataclass
class TrainSettings:
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    f_max: int = 8
    mixed: bool = False  # mixed-modality batches instead of alternating ones
    tau: float = 1.0


METRIC_FIELDS = ["step", "stage", "lr", "loss_contrastive", "loss_distill", "lambda", "tokens", "modality"]


def run_stage(stage: StageSpec, model: DualTowerModel, corpus, seed: int = 0,
              settings: TrainSettings | None = None,
              on_step: Callable[[dict], None] | None = None) -> list[dict]:
    """Train one stage in place; returns one metrics row per optimizer step."""
    settings = settings or TrainSettings()
    if model.completed_stage != stage.index - 1:
        raise MissingCheckpointError(
            f"stage {stage.index} starts {stage.init} but the model has completed stage "
            f"{model.completed_stage}; load the stage-{stage.index - 1} checkpoint first"
        )
    use_teacher = stage.teacher and "kl" in stage.losses
    if use_teacher and model.teacher is None:
        raise MissingCheckpointError("stage 1 needs the frozen teacher branch")

    ids = corpus.ids
    image_ids = [i for i in ids if corpus.modality(i) == IMAGE]
    video_ids = [i for i in ids if corpus.modality(i) == VIDEO]
    tickets = stage_tickets(stage, image_ids, video_ids, seed, settings.mixed)
    total = len(tickets)
    warmup = stage.effective_warmup(total)

    model.requires_grad_(False)
    model.vision.requires_grad_(stage.vision_trainable)
    model.text.requires_grad_(stage.text_trainable)
    model.head.requires_grad_(True)
    plan = [([model.vision, model.head], stage.peak_lr)]
    if stage.text_trainable:
        plan.append(([model.text], stage.peak_lr * stage.text_lr_scale))
    groups = _param_groups(plan, settings.weight_decay)
    opt = torch.optim.AdamW(groups, lr=stage.peak_lr, betas=settings.betas)
    trainable = [p for g in groups for p in g["params"]]

    gen = torch.Generator().manual_seed(seed)
    tok = model.tokenizer
    rows, seen = [], 0
    model.train()
    for step, ticket in enumerate(tickets):
        samples = [corpus.sample(i) for i in ticket.ids]
        seqs = prepare_sequences(samples, stage.resolution, stage.budget,
                                 model.vision.cfg.patch_size, model.vision.cfg.temporal_patch_size,
                                 settings.f_max)
        full = pack(seqs)
        batch = patch_dropout(full, stage.patch_dropout, gen)
        _, pooled = model.vision(batch)
        img = model.head.embed_image(pooled)
        captions = tok.encode_batch([corpus.caption(i) for i in ticket.ids])
        with torch.set_grad_enabled(stage.text_trainable):
            tfeat = encode_text(captions, model.text)
        txt = model.head.embed_text(tfeat)
        lc = sigmoid_contrastive_loss(img, txt, model.head.temperature, model.head.bias)
        lam, ld = 0.0, torch.zeros(())
        if use_teacher:
            lam = lambda_schedule(seen, stage.lambda_decay, stage.lambda0)
            ld = kl_distillation_loss(pooled, model.teacher(full), settings.tau)
        loss = hybrid_loss(lc, ld, lam)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if settings.grad_clip:
            torch.nn.utils.clip_grad_norm_(trainable, settings.grad_clip)
        lr = cosine_lr(step, warmup, total, stage.peak_lr, stage.min_lr)
        for g in opt.param_groups:
            g["lr"] = lr * g["base_lr"] / stage.peak_lr if stage.peak_lr else 0.0
        opt.step()
        seen += len(ticket.ids)
        row = {"step": step, "stage": stage.index, "lr": lr, "loss_contrastive": float(lc.detach()),
               "loss_distill": float(ld.detach()), "lambda": lam, "tokens": len(batch), "modality": ticket.modality}
        rows.append(row)
        if on_step:
            on_step(row)
    model.eval()
    model.requires_grad_(False)
    model.completed_stage = stage.index
    if stage.index == 1:
        model.teacher = None  # the distillation branch is dropped after stage 1
    return rows


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})


def ema(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Exponential moving average with ``alpha = 2 / (window + 1)``, seeded by the first value."""
    alpha = 2.0 / (window + 1)
    out = np.empty(len(values))
    acc = values[0] if len(values) else 0.0
    for i, v in enumerate(values):
        acc = alpha * v + (1 - alpha) * acc if i else v
        out[i] = acc
    return out


def run_plan(plan: StagePlan, model: DualTowerModel, corpus, stages: Sequence[int], out_dir,
             seed: int = 0, settings: TrainSettings | None = None) -> list[dict]:
    """Run selected stages in order, writing ``stage{k}.ckpt`` after each and ``metrics.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in stages:
        log.info("stage %d: %d samples", k, plan.stage(k).seen_samples)
        rows += run_stage(plan.stage(k), model, corpus, seed=seed + 1000 * k, settings=settings)
        model.save(out / f"stage{k}.ckpt")
    write_metrics_csv(rows, out / "metrics.csv")
    return rows
