"""Native-resolution vision transformer pipeline.

Images and videos are patchified at their own aspect ratio under a shared
token budget, packed into one sequence with per-sample attention segments,
encoded with 2D-RoPE, and trained against a text tower with a sigmoid
contrastive loss plus feature distillation over a staged curriculum.
"""

from .encoder import Encoder, EncoderConfig, PRESETS, load_preset
from .ingest import BudgetError, Fixed, Native, NativeAspect, TokenBudget, VisualSample, patchify, prepare_sequences
from .packing import PackedBatch, pack, unpack
from .pipeline import DualTowerModel, StagePlan, StageSpec, build_model, desk_stage_plan, run_stage

__version__ = "0.1.0"

__all__ = ["BudgetError", "DualTowerModel", "Encoder", "EncoderConfig", "Fixed", "Native", "NativeAspect",
           "PRESETS", "PackedBatch", "StagePlan", "StageSpec", "TokenBudget", "VisualSample", "build_model",
           "desk_stage_plan", "load_preset", "pack", "patchify", "prepare_sequences", "run_stage", "unpack"]
