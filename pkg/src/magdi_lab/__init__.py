"""Structured distillation of multi-agent interaction graphs into a small student LM."""

from __future__ import annotations

from .graph import EdgeVariant, GraphError, Mag, NodeRecord, Structure, build_mag, corpus_stats
from .sim import SimConfig, gen_corpus
from .student import ModelConfig, StudentModel, Vocab, generate
from .distill import DistillHead, LossWeights, combined_loss
from .trainer import Level, TrainConfig, load_checkpoint, save_checkpoint, train
from .evaluation import EvalReport, Student, efficiency_report, evaluate, self_consistency

__all__ = [
    "DistillHead",
    "EdgeVariant",
    "EvalReport",
    "GraphError",
    "Level",
    "LossWeights",
    "Mag",
    "ModelConfig",
    "NodeRecord",
    "SimConfig",
    "Structure",
    "Student",
    "StudentModel",
    "TrainConfig",
    "Vocab",
    "build_mag",
    "combined_loss",
    "corpus_stats",
    "efficiency_report",
    "evaluate",
    "gen_corpus",
    "generate",
    "load_checkpoint",
    "save_checkpoint",
    "self_consistency",
    "train",
]
