"""Command-line entry point: ``nativevit {patchify,train,eval}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Every argument is validated, and every problem reported, before any output
file is written.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import synthetic
from .checkpoint import CheckpointError
from .encoder import EncoderConfig, load_preset
from .evaluation import (attentive_probe, build_class_prompts, encode_images, linear_probe, probe_accuracy,
                         resolution_mode_sweep, retrieval_recall_at_1, summary_table, write_csv,
                         zero_shot_classify)
from .ingest import BudgetError, Fixed, Native, NativeAspect, TokenBudget, parse_mode, prepare_sequences
from .manifest import ManifestCorpus, ManifestError
from .objectives import Tokenizer
from .pipeline import (PAPER_SEEN, DualTowerModel, MissingCheckpointError, StagePlan, TrainSettings,
                       build_model, desk_stage_plan, run_stage, write_metrics_csv)

log = logging.getLogger("nativevit")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SUITES = ("retrieval", "zeroshot", "probe", "sweep")
SWEEP_MODES = (Fixed(224), Fixed(448), NativeAspect(256), NativeAspect(576), NativeAspect(1024), Native())


class UsageError(Exception):
    def __init__(self, problems):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


# --- argument parsing ----------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--out", type=Path, help="output directory, created if absent")
    p.add_argument("--mode", default="native", help="native | fixed:S | aspect:L (default native)")
    p.add_argument("--budget-max", type=int, help="L_max: largest token count per batch")
    p.add_argument("--budget-min", type=int, default=1, help="L_min: smallest token count per sample")
    p.add_argument("--frames-max", type=int, default=8, help="F_max: frames kept per video (even, default 8)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nativevit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("patchify", help="report grid sizes and token counts for a manifest")
    p.add_argument("manifest", type=Path, help="JSON-lines manifest")
    p.add_argument("--batch-size", type=int, default=0, help="samples per packed batch (0: whole manifest)")
    _common(p)

    p = sub.add_parser("train", help="run training stages and write checkpoints plus metrics.csv")
    p.add_argument("--config", help="stage-plan JSON file (default: bundled stageplan-desk.json)")
    p.add_argument("--encoder", default="tiny", help="encoder preset name or JSON file (default tiny)")
    p.add_argument("--stage", default="1", help="stages to run, e.g. 1, 1,2,3 or 1-4")
    p.add_argument("--scale", type=float, help="rescale every stage's sample budget to paper budget x scale")
    p.add_argument("--manifest", type=Path, help="training manifest (default: synthetic corpus)")
    p.add_argument("--synthetic-images", type=int, default=2000,
                   help="synthetic image-caption pairs when no manifest is given (default 2000)")
    p.add_argument("--synthetic-videos", type=int, default=200,
                   help="synthetic video-caption pairs when no manifest is given (default 200)")
    p.add_argument("--resume", type=Path, help="checkpoint of the stage before the first selected one")
    p.add_argument("--mixed", action="store_true", help="mixed-modality batches instead of alternating")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write result CSVs")
    p.add_argument("--checkpoint", type=Path, required=True, help="stage checkpoint written by train")
    p.add_argument("--suite", default="all", help=f"comma list of {', '.join(SUITES)} or 'all'")
    p.add_argument("--manifest", type=Path, help="evaluation manifest (default: synthetic held-out set)")
    p.add_argument("--config", help="encoder preset name or JSON file the checkpoint must match")
    p.add_argument("--eval-size", type=int, default=200, help="synthetic evaluation pairs")
    _common(p)
    return parser


def parse_stages(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out += list(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def _load_encoder(name: str) -> EncoderConfig:
    p = Path(name)
    if p.suffix == ".json" and p.exists():
        return EncoderConfig.from_dict(json.loads(p.read_text()))
    return load_preset(name)


def _check_common(args, problems: list[str]):
    mode = None
    try:
        mode = parse_mode(args.mode)
    except ValueError as e:
        problems.append(str(e))
    budget = None
    if args.budget_max is not None:
        try:
            budget = TokenBudget(args.budget_max, args.budget_min)
        except ValueError as e:
            problems.append(str(e))
    if args.frames_max < 2 or args.frames_max % 2:
        problems.append(f"--frames-max must be an even number >= 2, got {args.frames_max}")
    if args.out is not None and args.out.exists() and not args.out.is_dir():
        problems.append(f"--out {args.out} exists and is not a directory")
    return mode, budget


def _load_manifest(path: Path, problems: list[str]):
    try:
        corpus = ManifestCorpus.load(path)
    except ManifestError as e:
        problems.append(str(e))
        return None
    if len(corpus) == 0:
        problems.append(f"manifest {path} lists no samples")
        return None
    return corpus


# --- patchify ------------------------------------------------------------

def cmd_patchify(args) -> int:
    problems: list[str] = []
    mode, budget = _check_common(args, problems)
    if args.batch_size < 0:
        problems.append("--batch-size must be >= 0")
    corpus = _load_manifest(args.manifest, problems)
    if problems:
        raise UsageError(problems)

    ids = corpus.ids
    size = args.batch_size or len(ids)
    rows, batches = [], []
    for b, start in enumerate(range(0, len(ids), size)):
        chunk = ids[start:start + size]
        seqs = prepare_sequences([corpus.sample(i) for i in chunk], mode, budget, f_max=args.frames_max)
        total = 0
        for i, (grid, _) in zip(chunk, seqs):
            rows.append({"id": i, "batch": b, "modality": corpus.modality(i), "t": grid.t_patches,
                         "rows": grid.rows, "cols": grid.cols, "tokens": grid.token_count})
            total += grid.token_count
        stats = {"batch": b, "samples": len(chunk), "tokens": total}
        if budget is not None:
            stats["l_max"] = budget.l_max
            stats["waste"] = 1.0 - total / budget.l_max
        batches.append(stats)

    fields = ["id", "batch", "modality", "t", "rows", "cols", "tokens"]
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "tokens.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        write_csv(batches, args.out / "batches.csv")
    out = csv.DictWriter(sys.stdout, fieldnames=fields, lineterminator="\n")
    out.writeheader()
    out.writerows(rows)
    for s in batches:
        msg = f"batch {s['batch']}: {s['samples']} samples, {s['tokens']} tokens"
        if "waste" in s:
            msg += f", waste {s['waste']:.4f} of L_max={s['l_max']}"
        print("# " + msg)
    return EXIT_OK


# --- train ---------------------------------------------------------------

def _scaled(plan: StagePlan, scale: float) -> StagePlan:
    stages = []
    for s in plan.stages:
        paper = s.paper_seen_samples or PAPER_SEEN[s.index - 1]
        seen = int(round(paper * scale))
        decay = int(round(s.lambda_decay * scale / plan.scale_factor)) if s.lambda_decay else 0
        stages.append(dataclasses.replace(s, seen_samples=seen, lambda_decay=decay))
    return StagePlan(stages, scale, plan.model_size)


def _train_corpus(args):
    if args.manifest is not None:
        return ManifestCorpus.load(args.manifest)
    imgs = synthetic.make_image_corpus(args.synthetic_images, seed=args.seed)
    vids = synthetic.make_video_corpus(args.synthetic_videos, seed=args.seed) if args.synthetic_videos else None
    return imgs.merged(vids) if vids else imgs


def cmd_train(args) -> int:
    problems: list[str] = []
    _, budget = _check_common(args, problems)
    plan = None
    try:
        plan = StagePlan.load(args.config) if args.config else desk_stage_plan()
    except (OSError, ValueError, TypeError, KeyError) as e:
        problems.append(f"cannot load stage plan {args.config}: {e}")
    if args.scale is not None and not 0 < args.scale <= 1:
        problems.append(f"--scale must be in (0, 1], got {args.scale}")
    if plan is not None and args.scale is not None and not problems:
        plan = _scaled(plan, args.scale)
    try:
        stages = parse_stages(args.stage)
    except ValueError:
        problems.append(f"--stage {args.stage!r} is not a stage list such as 1,2,3 or 1-4")
        stages = []
    n = len(plan.stages) if plan else 4
    if any(not 1 <= k <= n for k in stages):
        problems.append(f"stages must lie in 1..{n}, got {stages}")
    elif stages and stages != list(range(stages[0], stages[0] + len(stages))):
        problems.append(f"stages must be consecutive and increasing, got {stages}")
    try:
        enc_cfg = _load_encoder(args.encoder)
    except (OSError, ValueError, TypeError) as e:
        problems.append(f"cannot load encoder preset {args.encoder!r}: {e}")
    if stages and stages[0] > 1 and args.resume is None:
        problems.append(f"stage {stages[0]} needs --resume with the stage-{stages[0] - 1} checkpoint")
    if args.resume is not None and not args.resume.is_file():
        problems.append(f"--resume checkpoint not found: {args.resume}")
    if args.out is None:
        problems.append("--out is required for train")
    if args.manifest is not None:
        _load_manifest(args.manifest, problems)
    if args.synthetic_images < 1:
        problems.append("--synthetic-images must be >= 1")
    if problems:
        raise UsageError(problems)

    if budget is not None:
        plan = StagePlan([dataclasses.replace(s, token_range=(budget.l_min, budget.l_max))
                          if s.resolution == "native" else s for s in plan.stages],
                         plan.scale_factor, plan.model_size)
    if args.mode != "native":
        # --mode replaces the native-resolution stages; fixed224 stages keep their crop
        plan = StagePlan([dataclasses.replace(s, resolution=args.mode)
                          if s.resolution == "native" else s for s in plan.stages],
                         plan.scale_factor, plan.model_size)
    corpus = _train_corpus(args)
    torch.manual_seed(args.seed)
    if args.resume is not None:
        model = DualTowerModel.load(args.resume)
        if model.completed_stage != stages[0] - 1:
            raise UsageError([f"--resume checkpoint completed stage {model.completed_stage}, "
                              f"but stage {stages[0]} needs stage {stages[0] - 1}"])
    else:
        if args.manifest is None:
            tok = Tokenizer(synthetic.vocabulary())
        else:
            tok = Tokenizer.from_texts(corpus.caption(i) for i in corpus.ids)
        model = build_model(enc_cfg, tok, seed=args.seed)

    settings = TrainSettings(f_max=args.frames_max, mixed=args.mixed)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "plan.json").write_text(plan.to_json() + "\n")
    rows = []
    for k in stages:
        t0 = time.perf_counter()
        stage_rows = run_stage(plan.stage(k), model, corpus, seed=args.seed + 1000 * k, settings=settings)
        rows += stage_rows
        model.save(args.out / f"stage{k}.ckpt")
        first, last = stage_rows[0]["loss_contrastive"], stage_rows[-1]["loss_contrastive"]
        log.info("stage %d: %d steps in %.1fs, contrastive loss %.4f -> %.4f",
                 k, len(stage_rows), time.perf_counter() - t0, first, last)
    write_metrics_csv(rows, args.out / "metrics.csv")
    return EXIT_OK


# --- eval ----------------------------------------------------------------

def _eval_corpus(args):
    if args.manifest is not None:
        return ManifestCorpus.load(args.manifest)
    # held-out ids come from a seed the training corpus never uses
    return synthetic.make_image_corpus(args.eval_size, seed=10_000 + args.seed, prefix="eval")


def _suite_retrieval(model, corpus, ids, mode):
    samples = [corpus.sample(i) for i in ids]
    _, img = encode_images(model, samples, mode)
    txt = model.embed_texts([corpus.caption(i) for i in ids])
    t2i, i2t = retrieval_recall_at_1(img.numpy(), txt.numpy())
    return [{"suite": "retrieval", "pairs": len(ids), "recall_t2i": t2i, "recall_i2t": i2t}]


def _shape_labels(corpus, ids):
    if not hasattr(corpus, "recipes"):
        return None
    return [synthetic.SHAPES.index(corpus.recipes[i].shape) for i in ids]


def _suite_zeroshot(model, corpus, ids, mode):
    labels = _shape_labels(corpus, ids)
    if labels is None:
        return []
    classes = build_class_prompts(synthetic.SHAPES, lambda p: model.embed_texts(p).numpy(),
                                  synthetic.PROMPT_TEMPLATES)
    _, img = encode_images(model, [corpus.sample(i) for i in ids], mode)
    _, acc = zero_shot_classify(img.numpy(), classes, labels)
    return [{"suite": "zeroshot", "classes": len(classes), "samples": len(ids), "top1": acc}]


def _suite_probe(model, corpus, ids, mode, seed):
    labels = _shape_labels(corpus, ids)
    if labels is None:
        return []
    tokens, _ = encode_images(model, [corpus.sample(i) for i in ids], mode)
    half = len(ids) // 2
    pooled = np.stack([t.mean(0).numpy() for t in tokens])
    y = np.asarray(labels)
    lin, _ = linear_probe(pooled[:half], y[:half], len(synthetic.SHAPES), epochs=200, lr=0.01, seed=seed)
    att, _ = attentive_probe(tokens[:half], y[:half], len(synthetic.SHAPES), epochs=100, lr=0.01, seed=seed)
    test_att = probe_accuracy(att, tokens[half:], y[half:])
    return [{"suite": "probe", "probe": "linear", "train": half, "test_acc": probe_accuracy(lin, pooled[half:], y[half:])},
            {"suite": "probe", "probe": "attentive", "train": half, "test_acc": test_att}]


def cmd_eval(args) -> int:
    problems: list[str] = []
    mode, _ = _check_common(args, problems)
    suites = list(SUITES) if args.suite == "all" else [s.strip() for s in args.suite.split(",")]
    bad = [s for s in suites if s not in SUITES]
    if bad:
        problems.append(f"unknown suite(s) {bad}; choose from {', '.join(SUITES)} or all")
    if not args.checkpoint.is_file():
        problems.append(f"checkpoint not found: {args.checkpoint}")
    enc_cfg = None
    if args.config:
        try:
            enc_cfg = _load_encoder(args.config)
        except (OSError, ValueError, TypeError) as e:
            problems.append(f"cannot load encoder preset {args.config!r}: {e}")
    if args.manifest is not None:
        _load_manifest(args.manifest, problems)
    if args.out is None:
        problems.append("--out is required for eval")
    model = None
    if not problems:
        try:
            model = DualTowerModel.load(args.checkpoint, enc_cfg)
        except CheckpointError as e:
            problems.append(f"checkpoint {args.checkpoint} does not match the configuration: {e}")
    if problems:
        raise UsageError(problems)

    torch.manual_seed(args.seed)
    corpus = _eval_corpus(args)
    ids = corpus.ids
    args.out.mkdir(parents=True, exist_ok=True)
    for suite in suites:
        if suite == "retrieval":
            rows = _suite_retrieval(model, corpus, ids, mode)
        elif suite == "zeroshot":
            rows = _suite_zeroshot(model, corpus, ids, mode)
        elif suite == "probe":
            rows = _suite_probe(model, corpus, ids, mode, args.seed)
        else:
            labels = _shape_labels(corpus, ids)
            rows = resolution_mode_sweep(model, [corpus.sample(i) for i in ids],
                                         [corpus.caption(i) for i in ids], SWEEP_MODES,
                                         class_names=synthetic.SHAPES if labels else None, labels=labels,
                                         templates=synthetic.PROMPT_TEMPLATES)
        if not rows:
            log.warning("suite %s needs synthetic labels; skipped", suite)
            continue
        write_csv(rows, args.out / f"{suite}.csv")
        print(f"== {suite}")
        print(summary_table(rows))
    return EXIT_OK


COMMANDS = {"patchify": cmd_patchify, "train": cmd_train, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        for p in e.problems:
            print(f"error: {p}", file=sys.stderr)
        return EXIT_USAGE
    except (BudgetError, ManifestError, MissingCheckpointError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - last-resort runtime failure
        log.debug("traceback", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
