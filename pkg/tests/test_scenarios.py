"""Scenario-level comparative behavior at a reduced desk profile."""
import numpy as np
import pytest

from preprompt.harness import (ablation_learner, avg_accuracy,
                               baseline_finetune, baseline_kv_correlation,
                               forgetting_measure, make_learner, make_splits,
                               run_scenario)
from preprompt.pipeline import PipelineConfig, StageConfig

from conftest import ci_pipeline_config


def reduced_config(**kw):
    base = dict(prompt_mode="prefix", prompt_len=5,
                prompted_layers=(0, 1, 2, 3, 4),
                prompt_stage=StageConfig(5e-3, 12, 24),
                label_stage=StageConfig(5e-3, 10, 24))
    base.update(kw)
    return PipelineConfig(**base)


@pytest.fixture(scope="module")
def runs(ci_backbone, ci_datasets):
    train, test = ci_datasets
    scenario = make_splits(train, test, 5, seed=21)
    cfg = reduced_config()
    return {
        "scenario": scenario,
        "preprompt": run_scenario(
            scenario, make_learner("preprompt", ci_backbone, cfg, 21),
            eval_seed=21, method="preprompt", seed=21),
        "finetune": baseline_finetune(scenario, ci_backbone, cfg, 21),
        "kv": baseline_kv_correlation(scenario, ci_backbone, cfg, 21),
    }


def last_row_selection(result):
    t = result.matrix.n_tasks
    vals = [r["selection_accuracy"] for r in result.selection if r["task_k"] == t]
    return float(np.mean(vals))


class TestComparativeRuns:
    def test_all_runs_valid(self, runs):
        for key in ("preprompt", "finetune", "kv"):
            assert runs[key].matrix.valid

    def test_finetune_exhibits_forgetting(self, runs):
        assert forgetting_measure(runs["finetune"].matrix) > 0.0

    def test_preprompt_beats_finetune(self, runs):
        assert (avg_accuracy(runs["preprompt"].matrix)
                > avg_accuracy(runs["finetune"].matrix))

    def test_predictive_selection_beats_key_correlation(self, runs):
        assert last_row_selection(runs["preprompt"]) >= last_row_selection(runs["kv"])

    def test_kv_selection_reported_per_task(self, runs):
        t = runs["kv"].matrix.n_tasks
        pairs = {(r["task_k"], r["task_j"]) for r in runs["kv"].selection}
        assert (t, 1) in pairs and (t, t) in pairs

    def test_finetune_deterministic_per_seed(self, ci_backbone, ci_datasets):
        train, test = ci_datasets
        cfg = reduced_config()
        rows = []
        for _ in range(2):
            scenario = make_splits(train, test, 5, seed=22)
            res = baseline_finetune(scenario, ci_backbone, cfg, 22)
            rows.append(np.concatenate(res.matrix.rows))
        assert np.array_equal(rows[0], rows[1])


class TestSingleTask:
    def test_finetune_close_to_untranslated_preprompt(self, ci_backbone,
                                                      ci_datasets):
        # with one task there is nothing to forget; the single-head baseline
        # and the two-stage method without translation should land close
        train, test = ci_datasets
        scenario = make_splits(train, test, 5, seed=23)
        scenario.tasks = scenario.tasks[:1]
        cfg = reduced_config(translate_prompt_stage=False,
                             translate_label_stage=False)
        res_pp = run_scenario(scenario,
                              make_learner("preprompt", ci_backbone, cfg, 23),
                              eval_seed=23, method="preprompt", seed=23)
        res_ft = baseline_finetune(scenario, ci_backbone, cfg, 23)
        a_pp = avg_accuracy(res_pp.matrix)
        a_ft = avg_accuracy(res_ft.matrix)
        assert abs(a_pp - a_ft) < 0.1
        assert a_pp > 0.9 and a_ft > 0.9


def test_ablation_row0_is_finetune_bit_for_bit(tiny_frozen, tiny_task_bank):
    from conftest import tiny_pipeline_config
    from preprompt.data import LabeledImageSet
    ds = LabeledImageSet(tiny_task_bank.images, tiny_task_bank.labels)
    scenario = make_splits(ds, ds, 4, seed=3, max_train_per_class=20,
                           max_test_per_class=10)
    cfg = tiny_pipeline_config()
    res_row0 = run_scenario(scenario,
                            ablation_learner((False, False, False),
                                             tiny_frozen, cfg, 9),
                            eval_seed=9, method="ablation-0", seed=9)
    res_ft = run_scenario(scenario,
                          make_learner("finetune", tiny_frozen, cfg, 9),
                          eval_seed=9, method="finetune", seed=9)
    for r1, r2 in zip(res_row0.matrix.rows, res_ft.matrix.rows):
        assert np.array_equal(r1, r2)


def test_within_task_accuracy_after_training(ci_backbone, ci_datasets):
    # a 2-class desk task is essentially solved by the label stage
    train, test = ci_datasets
    scenario = make_splits(train, test, 10, seed=24)
    scenario.tasks = scenario.tasks[:1]
    cfg = reduced_config()
    learner = make_learner("preprompt", ci_backbone, cfg, 24)
    task = scenario.tasks[0]
    learner.learn_task(task.train_x, task.train_y, task.classes)
    preds = learner.predict(task.train_x)
    assert float(np.mean(preds == task.train_y)) > 0.95
