"""Desk-scale class-incremental learning lab.

A frozen miniature vision transformer provides features; per-task prompts
are selected by a first-stage classifier (fine-to-coarse floor indexing) and
consumed by a second-stage label classifier; prototype-anchored feature
translation keeps both classifier heads balanced across old classes. The
harness measures accuracy, forgetting, and parameter/memory overhead against
finetune and key-correlation baselines.
"""
from .backbone import (BackboneConfig, BackboneParams, extract_feature,
                       load_backbone, pretrain_and_freeze, save_backbone)
from .errors import ConfigError, ContractViolation, DomainError, IdxParseError
from .harness import (AccuracyMatrix, Scenario, ablation_suite, avg_accuracy,
                      avg_incremental_accuracy, baseline_finetune,
                      baseline_kv_correlation, complexity_accounting,
                      forgetting_measure, make_learner, make_splits,
                      run_scenario)
from .data import LabeledImageSet, gen_synthetic, load_idx, write_idx
from .numeric import Adam, adam_step, cross_entropy, finite_diff_check, softmax_rows
from .pipeline import (FinetuneLearner, KvCorrelationLearner, PipelineConfig,
                       PrePromptLearner, StageConfig, TaskLayout, eq5_task_index)
from .prompts import (PromptPool, forward_with_prompt, prefix_tuning_msa,
                      prompt_tuning_msa)
from .translation import (PrototypeStore, build_translation, compute_prototypes,
                          nearest_new_prototype, sample_translated_batch,
                          translate_features)

__version__ = "0.1.0"

__all__ = [
    "Adam", "AccuracyMatrix", "BackboneConfig", "BackboneParams",
    "ConfigError", "ContractViolation", "DomainError", "FinetuneLearner",
    "IdxParseError", "KvCorrelationLearner", "LabeledImageSet",
    "PipelineConfig", "PrePromptLearner", "PromptPool", "PrototypeStore",
    "Scenario", "StageConfig", "TaskLayout", "ablation_suite", "adam_step",
    "avg_accuracy", "avg_incremental_accuracy", "baseline_finetune",
    "baseline_kv_correlation", "build_translation", "complexity_accounting",
    "compute_prototypes", "cross_entropy", "eq5_task_index", "extract_feature",
    "finite_diff_check", "forgetting_measure", "forward_with_prompt",
    "gen_synthetic", "load_backbone", "load_idx", "make_learner",
    "make_splits", "nearest_new_prototype", "prefix_tuning_msa",
    "pretrain_and_freeze", "prompt_tuning_msa", "run_scenario",
    "sample_translated_batch", "save_backbone", "softmax_rows",
    "translate_features", "write_idx",
]
