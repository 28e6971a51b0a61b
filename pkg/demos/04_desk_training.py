"""A scaled-down staged curriculum on the synthetic shapes corpus, then retrieval.

Run: python3 demos/04_desk_training.py            (about a minute)
     FULL=1 python3 demos/04_desk_training.py     (the full desk plan for stages 1-3)
"""

import os
import time
from dataclasses import replace

import torch

from nativevit import synthetic
from nativevit.encoder import PRESETS
from nativevit.evaluation import encode_images, resolution_mode_sweep, retrieval_recall_at_1, summary_table
from nativevit.ingest import Fixed, Native, NativeAspect
from nativevit.objectives import Tokenizer
from nativevit.pipeline import StagePlan, build_model, desk_stage_plan, ema, run_stage

full = os.environ.get("FULL") == "1"
corpus = synthetic.make_image_corpus(2200 if full else 700, seed=0)
train, held = corpus.subset(corpus.ids[:-200]), corpus.subset(corpus.ids[-200:])
print("example captions:", [train.caption(i) for i in train.ids[:3]])

plan = desk_stage_plan(1e-6)
if not full:
    # keep the stage structure, shrink the budgets
    plan = StagePlan([replace(s, seen_samples=n, lambda_decay=n * 2 // 3 if s.index == 1 else 0)
                      for s, n in zip(plan.stages, (3000, 500, 500, 300))], plan.scale_factor, plan.model_size)
for s in plan.stages[:3]:
    print(f"stage {s.index}: {s.seen_samples} samples, {s.resolution}, lr {s.peak_lr:g}, "
          f"text {'trainable' if s.text_trainable else 'frozen'}, teacher {'on' if s.teacher else 'off'}")

model = build_model(PRESETS["tiny"], Tokenizer(synthetic.vocabulary()), seed=0)
t0 = time.time()
for k in (1, 2, 3):
    rows = run_stage(plan.stage(k), model, train, seed=k)
    loss = [r["loss_contrastive"] for r in rows]
    print(f"stage {k}: {len(rows)} steps, contrastive loss {loss[0]:.3f} -> EMA {ema(loss, 50)[-1]:.3f} "
          f"({time.time() - t0:.0f}s)")

with torch.no_grad():
    _, img = encode_images(model, [held.sample(i) for i in held.ids], Native())
    txt = model.embed_texts([held.caption(i) for i in held.ids])
t2i, i2t = retrieval_recall_at_1(img.numpy(), txt.numpy())
print(f"\nheld-out R@1: text->image {t2i:.3f}, image->text {i2t:.3f} (chance {1 / 200:.3f})")

# The same encoder under different resolution policies.
rows = resolution_mode_sweep(model, [held.sample(i) for i in held.ids], [held.caption(i) for i in held.ids],
                             [Fixed(224), NativeAspect(256), NativeAspect(576), Native()],
                             class_names=list(synthetic.SHAPES),
                             labels=[synthetic.SHAPES.index(held.recipes[i].shape) for i in held.ids],
                             templates=synthetic.PROMPT_TEMPLATES)
print(summary_table(rows))
