"""Shared fixtures: frozen backbones and synthetic class banks.

The tiny backbone (8x8 images, 16-dim) is pretrained on one synthetic bank
and reused across unit tests; incremental tasks draw from a different bank
so pretraining stays class-disjoint. The desk-scale backbone mirrors the
committed CI configuration and backs the heavier integration and acceptance
tests.
"""
import numpy as np
import pytest

from preprompt.backbone import BackboneConfig, pretrain_and_freeze
from preprompt.data import gen_synthetic
from preprompt.harness import make_splits
from preprompt.pipeline import PipelineConfig, StageConfig

TINY_CFG = dict(image_h=8, image_w=8, channels=1, patch=4, embed_dim=16,
                heads=2, depth=2)

# synthetic bank seeds; pretraining banks never share a seed with task banks
TINY_PRETRAIN_SEED = 501
TINY_TASK_SEED = 502
CI_PRETRAIN_SEED = 101
CI_TASK_SEED = 202


@pytest.fixture(scope="session")
def tiny_frozen():
    bank = gen_synthetic(4, 40, image_h=8, image_w=8, noise=0.08,
                         seed=TINY_PRETRAIN_SEED)
    params, acc = pretrain_and_freeze(bank.images, bank.labels,
                                      BackboneConfig(**TINY_CFG),
                                      epochs=20, seed=0, batch_size=32)
    assert acc > 0.9
    return params


@pytest.fixture(scope="session")
def tiny_task_bank():
    # 8 classes: enough for a few 2-class tasks
    return gen_synthetic(8, 30, image_h=8, image_w=8, noise=0.08,
                         seed=TINY_TASK_SEED)


def tiny_pipeline_config(**kw):
    base = dict(prompt_mode="prefix", prompt_len=2, prompted_layers=(0, 1),
                prompt_stage=StageConfig(5e-3, 10, 8),
                label_stage=StageConfig(0.05, 10, 8))
    base.update(kw)
    return PipelineConfig(**base)


def task_slices(bank, classes):
    idx = np.flatnonzero(np.isin(bank.labels, classes))
    return bank.images[idx], bank.labels[idx]


# --- desk-scale configuration shared by integration + acceptance tests ----

CI_BACKBONE = BackboneConfig()          # 28x28, P=7, D=64, m=4, depth=6
CI_CLASSES = 20
CI_TASKS = 5
CI_TRAIN_PER_CLASS = 80
CI_TEST_PER_CLASS = 40
CI_NOISE = 0.12


def ci_pipeline_config(**kw):
    base = dict(prompt_mode="prefix", prompt_len=5,
                prompted_layers=(0, 1, 2, 3, 4),
                prompt_stage=StageConfig(5e-3, 30, 24),
                label_stage=StageConfig(5e-3, 28, 24))
    base.update(kw)
    return PipelineConfig(**base)


@pytest.fixture(scope="session")
def ci_backbone():
    bank = gen_synthetic(10, 150, noise=CI_NOISE, seed=CI_PRETRAIN_SEED)
    params, acc = pretrain_and_freeze(bank.images, bank.labels, CI_BACKBONE,
                                      epochs=6, seed=7, batch_size=64)
    assert acc > 0.9, f"pretraining underfit: {acc}"
    return params


@pytest.fixture(scope="session")
def ci_datasets():
    bank = gen_synthetic(CI_CLASSES, CI_TRAIN_PER_CLASS + CI_TEST_PER_CLASS,
                         noise=CI_NOISE, seed=CI_TASK_SEED)
    train_idx, test_idx = [], []
    for c in range(CI_CLASSES):
        rows = np.flatnonzero(bank.labels == c)
        train_idx.append(rows[:CI_TRAIN_PER_CLASS])
        test_idx.append(rows[CI_TRAIN_PER_CLASS:])
    return (bank.subset(np.concatenate(train_idx)),
            bank.subset(np.concatenate(test_idx)))


@pytest.fixture(scope="session")
def ci_scenario(ci_datasets):
    train, test = ci_datasets
    return make_splits(train, test, CI_TASKS, seed=11)
