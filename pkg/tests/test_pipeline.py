"""Two-stage pipeline: indexing, stage training, learner orchestration."""
import numpy as np
import pytest

from preprompt.errors import ConfigError, ContractViolation, DomainError
from preprompt.numeric import cross_entropy_batch, finite_diff_check
from preprompt.pipeline import (KvCorrelationLearner, LinearHead,
                                PrePromptLearner, StageConfig, TaskLayout,
                                _translated_count, eq5_task_index,
                                train_label_stage, train_prompt_stage)
from preprompt.prompts import PromptPool

from conftest import task_slices, tiny_pipeline_config


def random_layout(rng, regime):
    t = int(rng.integers(2, 8))
    if regime == "equal":
        size = int(rng.integers(1, 9))
        return [size] * t
    first = int(rng.integers(1, 30))
    inc = int(rng.integers(1, 9))
    return [first] + [inc] * (t - 1)


class TestEq5Indexing:
    def test_first_class_maps_to_task_zero(self):
        assert eq5_task_index(0, [10, 10, 10]) == 0

    def test_equal_tasks_floor(self):
        assert eq5_task_index(27, [10, 10, 10]) == 2

    def test_unequal_first_task_footnote(self):
        # first task of 50 classes, increments of 10: class 63 -> task 2
        counts = [50] + [10] * 5
        assert eq5_task_index(63, counts) == 2
        assert eq5_task_index(49, counts) == 0
        assert eq5_task_index(50, counts) == 1

    def test_out_of_range_rejected(self):
        with pytest.raises(DomainError):
            eq5_task_index(30, [10, 10, 10])

    def test_unsupported_layout_rejected(self):
        with pytest.raises(ConfigError):
            eq5_task_index(3, [4, 2, 3])

    @pytest.mark.parametrize("regime", ["equal", "unequal"])
    def test_matches_brute_force_lookup(self, regime):
        rng = np.random.default_rng(42)
        for _ in range(200):
            counts = random_layout(rng, regime)
            layout = TaskLayout()
            base = 0
            for count in counts:
                layout.add_task(range(base, base + count))
                base += count
            c = int(rng.integers(0, sum(counts)))
            assert eq5_task_index(c, counts) == layout.task_of_index(c)


class TestTaskLayout:
    def test_overlap_rejected(self):
        layout = TaskLayout()
        layout.add_task([3, 7])
        with pytest.raises(DomainError):
            layout.add_task([7, 9])

    def test_duplicate_within_task_rejected(self):
        layout = TaskLayout()
        with pytest.raises(DomainError):
            layout.add_task([1, 1])

    def test_index_round_trip(self):
        layout = TaskLayout()
        layout.add_task([30, 10])
        layout.add_task([20, 40])
        labels = np.array([10, 40, 30, 20])
        idx = layout.indices_of(labels)
        assert idx.tolist() == [1, 3, 0, 2]
        assert layout.originals_of(idx).tolist() == labels.tolist()

    def test_unknown_label_rejected(self):
        layout = TaskLayout()
        layout.add_task([1])
        with pytest.raises(DomainError):
            layout.indices_of(np.array([2]))


class TestLinearHead:
    def test_extend_preserves_old_rows(self):
        head = LinearHead(4)
        head.extend(2)
        head.w[:] = 1.5
        head.b[:] = -1.0
        head.extend(3)
        assert head.n_classes == 5
        assert np.all(head.w[:2] == 1.5)
        assert np.all(head.w[2:] == 0.0)
        assert np.all(head.b[:2] == -1.0)

    def test_extend_zero_rejected(self):
        with pytest.raises(DomainError):
            LinearHead(4).extend(0)


def test_translated_count_balances_classes():
    # 24 live rows over 2 new classes with 4 old classes -> 48 translated rows
    assert _translated_count(24, 2, 4) == 48
    assert _translated_count(24, 4, 4) == 24
    assert _translated_count(5, 4, 2) == 3  # 2.5 rounds half up


class TestPromptStage:
    def test_unfrozen_backbone_rejected(self, tiny_task_bank):
        from preprompt.backbone import BackboneParams, BackboneConfig
        from conftest import TINY_CFG
        params = BackboneParams.init_random(BackboneConfig(**TINY_CFG), 0)
        head = LinearHead(16)
        head.extend(2)
        from preprompt.translation import PrototypeStore
        with pytest.raises(ContractViolation):
            train_prompt_stage(tiny_task_bank.images[:4], np.zeros(4, dtype=int),
                               params, head, PrototypeStore(), False,
                               StageConfig(1e-2, 1, 4), seed=0)

    def test_single_class_accuracy_one(self, tiny_frozen, tiny_task_bank):
        images, _ = task_slices(tiny_task_bank, [0])
        head = LinearHead(16)
        head.extend(1)
        from preprompt.translation import PrototypeStore
        feats = train_prompt_stage(images, np.zeros(len(images), dtype=int),
                                   tiny_frozen, head, PrototypeStore(), False,
                                   StageConfig(1e-2, 1, 8), seed=0)
        assert np.all(np.argmax(head.logits(feats), axis=1) == 0)

    def test_gradient_of_head_loss_matches_finite_diff(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(0, 1, (6, 16))
        labels = np.array([0, 1, 2, 0, 1, 2])
        w = rng.normal(0, 0.1, (3, 16))
        b = rng.normal(0, 0.1, 3)

        def loss():
            return cross_entropy_batch(feats @ w.T + b, labels)[0]

        _, dlogits = cross_entropy_batch(feats @ w.T + b, labels)
        grads = {"w": dlogits.T @ feats, "b": dlogits.sum(axis=0)}
        assert finite_diff_check(loss, {"w": w, "b": b}, grads) < 1e-4

    def test_only_prompt_classifier_changes(self, tiny_frozen, tiny_task_bank):
        learner = PrePromptLearner(tiny_frozen, tiny_pipeline_config(), seed=0)
        images, labels = task_slices(tiny_task_bank, [0, 1])
        learner.learn_task(images, labels, [0, 1])
        backbone_sum = tiny_frozen.checksum()
        clal_sum = learner.clal.checksum()
        prompt_sums = [p.checksum() for p in learner.pool.entries]
        images2, labels2 = task_slices(tiny_task_bank, [2, 3])
        learner.layout.add_task([2, 3])
        learner.clap.extend(2)
        train_prompt_stage(images2, learner.layout.indices_of(labels2),
                           tiny_frozen, learner.clap, learner.prototypes, True,
                           learner.cfg.prompt_stage, seed=1)
        assert tiny_frozen.checksum() == backbone_sum
        assert learner.clal.checksum() == clal_sum
        assert [p.checksum() for p in learner.pool.entries] == prompt_sums


class TestLabelStage:
    def test_zero_epochs_leaves_new_rows_at_init(self, tiny_frozen, tiny_task_bank):
        pool = PromptPool("prefix", 2, (0, 1), 16)
        pool.alloc_task_prompt(0, seed=0)
        head = LinearHead(16)
        head.extend(2)
        images, labels = task_slices(tiny_task_bank, [0, 1])
        layout = TaskLayout()
        layout.add_task([0, 1])
        from preprompt.translation import PrototypeStore
        train_label_stage(images, layout.indices_of(labels), tiny_frozen, pool,
                          0, head, PrototypeStore(), False,
                          StageConfig(0.05, 0, 8), seed=0)
        assert np.all(head.w == 0.0)
        assert np.all(head.b == 0.0)

    def test_frozen_prompt_rejected(self, tiny_frozen, tiny_task_bank):
        pool = PromptPool("prefix", 2, (0, 1), 16)
        pool.alloc_task_prompt(0, seed=0)
        pool.freeze_task(0)
        head = LinearHead(16)
        head.extend(2)
        images, labels = task_slices(tiny_task_bank, [0, 1])
        from preprompt.translation import PrototypeStore
        with pytest.raises(ContractViolation):
            train_label_stage(images, np.zeros(len(images), dtype=int),
                              tiny_frozen, pool, 0, head, PrototypeStore(),
                              False, StageConfig(0.05, 1, 8), seed=0)


class TestLearner:
    @pytest.fixture()
    def trained(self, tiny_frozen, tiny_task_bank):
        learner = PrePromptLearner(tiny_frozen, tiny_pipeline_config(), seed=3)
        for task, classes in enumerate(([0, 1], [2, 3])):
            images, labels = task_slices(tiny_task_bank, classes)
            learner.learn_task(images, labels, classes)
        return learner

    def test_bookkeeping_after_two_tasks(self, trained):
        assert trained.tasks_learned == 2
        assert len(trained.pool) == 2
        assert len(trained.prototypes) == 4
        assert trained.clap.n_classes == 4
        assert trained.clal.n_classes == 4
        assert all(p.frozen for p in trained.pool.entries)

    def test_class_overlap_rejected(self, trained, tiny_task_bank):
        images, labels = task_slices(tiny_task_bank, [3, 4])
        with pytest.raises(DomainError):
            trained.learn_task(images, labels, [3, 4])

    def test_labels_outside_declared_classes_rejected(self, trained, tiny_task_bank):
        images, labels = task_slices(tiny_task_bank, [4, 5])
        with pytest.raises(DomainError):
            trained.learn_task(images, labels, [4, 6])

    def test_predict_prompt_is_one_hot(self, trained, tiny_task_bank):
        task, onehot = trained.predict_prompt(tiny_task_bank.images[0])
        assert onehot.shape == (2,)
        assert onehot.sum() == 1.0
        assert onehot[task] == 1.0

    def test_classify_composes_the_two_stages(self, trained, tiny_task_bank):
        rng = np.random.default_rng(9)
        for _ in range(100):
            img = rng.random((8, 8, 1))
            task, _ = trained.predict_prompt(img)
            assert trained.classify(img) == trained.predict_label(img, task)

    def test_forced_true_task_matches_per_task_accuracy(self, trained, tiny_task_bank):
        for task, classes in enumerate(([0, 1], [2, 3])):
            images, labels = task_slices(tiny_task_bank, classes)
            forced = trained.predict(images, force_tasks=np.full(len(images), task))
            per_label = np.array([trained.predict_label(img, task) for img in images])
            assert np.array_equal(forced, per_label)

    def test_single_class_always_predicted(self, tiny_frozen, tiny_task_bank):
        learner = PrePromptLearner(tiny_frozen, tiny_pipeline_config(), seed=1)
        images, labels = task_slices(tiny_task_bank, [5])
        learner.learn_task(images, labels, [5])
        assert np.all(learner.predict(tiny_task_bank.images[:10]) == 5)

    def test_hand_set_dominant_row_wins(self, trained, tiny_task_bank):
        trained.clal.w[:] = 0.0
        trained.clal.b[:] = 0.0
        trained.clal.b[2] = 100.0
        img = tiny_task_bank.images[0]
        assert trained.predict_label(img, 0) == trained.layout.class_order[2]

    def test_empty_pool_rejected(self, tiny_frozen):
        learner = PrePromptLearner(tiny_frozen, tiny_pipeline_config(), seed=0)
        with pytest.raises(ContractViolation):
            learner.predict_prompt(np.zeros((8, 8, 1)))
        with pytest.raises(ContractViolation):
            learner.predict(np.zeros((1, 8, 8, 1)))

    def test_determinism_across_instances(self, tiny_frozen, tiny_task_bank):
        outs = []
        for _ in range(2):
            learner = PrePromptLearner(tiny_frozen, tiny_pipeline_config(), seed=5)
            for classes in ([0, 1], [2, 3]):
                images, labels = task_slices(tiny_task_bank, classes)
                learner.learn_task(images, labels, classes)
            outs.append((learner.clap.checksum(), learner.clal.checksum(),
                         [p.digest for p in learner.pool.entries]))
        assert outs[0] == outs[1]

    def test_label_stage_leaves_prompt_classifier_alone(self, tiny_frozen,
                                                        tiny_task_bank):
        learner = PrePromptLearner(tiny_frozen, tiny_pipeline_config(), seed=6)
        images, labels = task_slices(tiny_task_bank, [0, 1])
        learner.layout.add_task([0, 1])
        learner.clal.extend(2)
        learner._train_selection_stage(
            images, learner.features(images), learner.layout.indices_of(labels), 0)
        clap_sum = learner.clap.checksum()
        learner.pool.alloc_task_prompt(0, seed=0)
        train_label_stage(images, learner.layout.indices_of(labels), tiny_frozen,
                          learner.pool, 0, learner.clal, learner.prototypes,
                          False, learner.cfg.label_stage, seed=0)
        assert learner.clap.checksum() == clap_sum


class TestKvCorrelation:
    def test_single_task_selection_correct(self, tiny_frozen, tiny_task_bank):
        learner = KvCorrelationLearner(tiny_frozen, tiny_pipeline_config(), seed=0)
        images, labels = task_slices(tiny_task_bank, [0, 1])
        learner.learn_task(images, labels, [0, 1])
        tasks = learner.predict_task_from_features(learner.features(images))
        assert np.all(tasks == 0)

    def test_keys_frozen_after_task(self, tiny_frozen, tiny_task_bank):
        learner = KvCorrelationLearner(tiny_frozen, tiny_pipeline_config(), seed=0)
        images, labels = task_slices(tiny_task_bank, [0, 1])
        learner.learn_task(images, labels, [0, 1])
        with pytest.raises(ValueError):
            learner.keys[0][0] = 1.0

    def test_requires_prompt_stage(self, tiny_frozen):
        with pytest.raises(ConfigError):
            KvCorrelationLearner(
                tiny_frozen, tiny_pipeline_config(use_prompt_stage=False), seed=0)


def test_reset_prompt_classifier_flag(tiny_frozen, tiny_task_bank):
    from preprompt.pipeline import PrePromptLearner
    cfg = tiny_pipeline_config(reset_prompt_classifier=True)
    learner = PrePromptLearner(tiny_frozen, cfg, seed=2)
    for classes in ([0, 1], [2, 3]):
        images, labels = task_slices(tiny_task_bank, classes)
        learner.learn_task(images, labels, classes)
    # still classifies; old classes survive via translated features
    images, labels = task_slices(tiny_task_bank, [0, 1])
    acc = float(np.mean(learner.predict(images) == labels))
    assert acc > 0.5
