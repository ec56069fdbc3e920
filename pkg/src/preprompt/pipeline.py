"""Two-stage predictive pipeline: prompt prediction, then label prediction.

Stage one trains a linear prompt classifier on prompt-free features and maps
its argmax class to a task by fine-to-coarse floor indexing. Stage two trains
the current task's prompt jointly with a linear label classifier on prompted
features. Both stages can mix in translated old-class features so the
accumulated classifier heads keep seeing every learned class.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backbone import (PREFIX_MODE, BackboneParams, features_backward,
                       features_forward)
from .errors import ConfigError, ContractViolation, DomainError
from .numeric import Adam, cross_entropy_batch
from .prompts import PromptPool, batch_features
from .translation import (PrototypeStore, build_translation,
                          compute_prototypes, sample_translated_batch)

log = logging.getLogger(__name__)

# Seed-stream tags for deterministic child RNGs.
_TAG_PROMPT_STAGE = 1
_TAG_LABEL_STAGE = 2
_TAG_PROMPT_INIT = 3
_TAG_SELECTOR = 4


@dataclass
class StageConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("bad epoch/batch settings")


@dataclass
class PipelineConfig:
    prompt_mode: str = PREFIX_MODE
    prompt_len: int = 5
    prompted_layers: tuple[int, ...] = (0, 1, 2, 3, 4)
    prompt_stage: StageConfig = field(
        default_factory=lambda: StageConfig(5e-3, 50, 24))
    label_stage: StageConfig = field(
        default_factory=lambda: StageConfig(0.1, 50, 24))
    use_prompt_stage: bool = True
    translate_prompt_stage: bool = True
    translate_label_stage: bool = True
    # experiment flag: retrain the prompt classifier from scratch each task
    # instead of fine-tuning it incrementally
    reset_prompt_classifier: bool = False


class TaskLayout:
    """Per-task class counts plus the global (arrival-order) class indexing."""

    def __init__(self):
        self.counts: list[int] = []
        self.class_order: list[int] = []
        self._index_of: dict[int, int] = {}

    @property
    def n_tasks(self) -> int:
        return len(self.counts)

    @property
    def n_classes(self) -> int:
        return len(self.class_order)

    def add_task(self, classes: Sequence[int]) -> None:
        classes = [int(c) for c in classes]
        if len(set(classes)) != len(classes):
            raise DomainError("duplicate class within a task")
        overlap = set(classes) & set(self.class_order)
        if overlap:
            raise DomainError(f"classes {sorted(overlap)} already belong to a task")
        for c in classes:
            self._index_of[c] = len(self.class_order)
            self.class_order.append(c)
        self.counts.append(len(classes))

    def indices_of(self, labels: np.ndarray) -> np.ndarray:
        try:
            return np.array([self._index_of[int(v)] for v in labels], dtype=np.int64)
        except KeyError as exc:
            raise DomainError(f"label {exc.args[0]} not in any learned task") from None

    def originals_of(self, indices: np.ndarray) -> np.ndarray:
        order = np.asarray(self.class_order, dtype=np.int64)
        return order[np.asarray(indices, dtype=np.int64)]

    def task_of_index(self, class_index: int) -> int:
        """Brute-force lookup of the task owning a classifier index."""
        upper = 0
        for task, count in enumerate(self.counts):
            upper += count
            if class_index < upper:
                return task
        raise DomainError(f"class index {class_index} out of range")

    def task_slice(self, task: int) -> range:
        start = sum(self.counts[:task])
        return range(start, start + self.counts[task])


def eq5_task_index(argmax_class: int, counts: Sequence[int]) -> int:
    """Fine-to-coarse floor indexing from an argmax class to a task id.

    Supports equal-sized tasks and the unequal-first-task regime (first task
    larger or smaller, all later tasks equal).
    """
    total = sum(counts)
    if not 0 <= argmax_class < total:
        raise DomainError(f"class {argmax_class} out of range for {total} classes")
    if len(counts) == 1:
        return 0
    if all(c == counts[0] for c in counts):
        return argmax_class // counts[0]
    if len(set(counts[1:])) != 1:
        raise ConfigError(f"unsupported task layout {list(counts)}")
    if argmax_class < counts[0]:
        return 0
    return (argmax_class - counts[0]) // counts[1] + 1


def _eq5_task_indices(argmax_classes: np.ndarray, counts: Sequence[int]) -> np.ndarray:
    if len(counts) == 1 or all(c == counts[0] for c in counts):
        return argmax_classes // counts[0] if len(counts) > 1 else np.zeros_like(argmax_classes)
    if len(set(counts[1:])) != 1:
        raise ConfigError(f"unsupported task layout {list(counts)}")
    return np.where(argmax_classes < counts[0], 0,
                    (argmax_classes - counts[0]) // counts[1] + 1)


class LinearHead:
    """Linear classifier over D-dim features; rows accumulate task by task."""

    def __init__(self, dim: int):
        self.dim = dim
        self.w = np.zeros((0, dim))
        self.b = np.zeros(0)

    @property
    def n_classes(self) -> int:
        return self.w.shape[0]

    def extend(self, n_new: int) -> None:
        if n_new < 1:
            raise DomainError("must extend by at least one class")
        self.w = np.vstack([self.w, np.zeros((n_new, self.dim))])
        self.b = np.concatenate([self.b, np.zeros(n_new)])

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.w.T + self.b

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        h.update(self.w.tobytes())
        h.update(self.b.tobytes())
        return h.hexdigest()


def group_by_class(features: np.ndarray, class_indices: np.ndarray
                   ) -> dict[int, np.ndarray]:
    return {int(c): features[class_indices == c]
            for c in np.unique(class_indices)}


def _translated_count(n_live: int, n_new_classes: int, n_old_classes: int) -> int:
    """Rows to add so old and new classes get equal expected representation."""
    return int(np.floor(n_live * n_old_classes / n_new_classes + 0.5))


def train_head_on_features(features: np.ndarray, class_indices: np.ndarray,
                           head: LinearHead, store: PrototypeStore,
                           translate: bool, stage: StageConfig,
                           rng: np.random.Generator) -> None:
    """Cross-entropy training of a linear head over fixed features.

    With translation enabled, each minibatch is the concatenation of live
    rows and freshly sampled translated old-class rows. The translated set
    is rebuilt every epoch from the (fixed) live features.
    """
    n = features.shape[0]
    opt = Adam({"w": head.w, "b": head.b}, learning_rate=stage.learning_rate,
               beta1=stage.beta1, beta2=stage.beta2, epsilon=stage.epsilon)
    fbc = group_by_class(features, class_indices)
    for _ in range(stage.epochs):
        tset = build_translation(store, fbc) if translate and len(store) else None
        order = rng.permutation(n)
        for start in range(0, n, stage.batch_size):
            idx = order[start:start + stage.batch_size]
            bf = features[idx]
            bl = class_indices[idx]
            if tset:
                k = _translated_count(len(idx), len(fbc), len(tset))
                if k > 0:
                    rows, tl = sample_translated_batch(tset, k, rng)
                    bf = np.vstack([bf, rows])
                    bl = np.concatenate([bl, tl])
            logits = bf @ head.w.T + head.b
            _, dlogits = cross_entropy_batch(logits, bl)
            opt.step({"w": head.w, "b": head.b},
                     {"w": dlogits.T @ bf, "b": dlogits.sum(axis=0)})


def train_prompt_stage(images: np.ndarray, class_indices: np.ndarray,
                       backbone: BackboneParams, head: LinearHead,
                       store: PrototypeStore, translate: bool,
                       stage: StageConfig, seed: int,
                       features: np.ndarray | None = None) -> np.ndarray:
    """Train the prompt classifier on prompt-free features; returns the features."""
    backbone.require_frozen("train_prompt_stage")
    if features is None:
        features = batch_features(images, backbone)
    rng = np.random.default_rng(np.random.SeedSequence([_TAG_PROMPT_STAGE, seed]))
    train_head_on_features(features, class_indices, head, store, translate,
                           stage, rng)
    return features


def train_label_stage(images: np.ndarray, class_indices: np.ndarray,
                      backbone: BackboneParams, pool: PromptPool, task_id: int,
                      head: LinearHead, store: PrototypeStore, translate: bool,
                      stage: StageConfig, seed: int) -> None:
    """Jointly train the label classifier and the current task's prompt.

    Translated old-class rows bypass the backbone and join each batch at the
    classifier input; they are rebuilt every epoch from the current prompted
    features of the matched classes. Previous tasks' prompts stay untouched.
    """
    backbone.require_frozen("train_label_stage")
    pool.validate_depth(backbone.config.depth)
    prompt = pool.entries[task_id]
    if prompt.frozen:
        raise ContractViolation(f"prompt of completed task {task_id} is immutable")
    layer_prompts = pool.layer_prompts(task_id)
    trainable = {"w": head.w, "b": head.b}
    for layer, arr in prompt.layers.items():
        trainable[f"p{layer}"] = arr
    opt = Adam(trainable, learning_rate=stage.learning_rate, beta1=stage.beta1,
               beta2=stage.beta2, epsilon=stage.epsilon)
    rng = np.random.default_rng(np.random.SeedSequence([_TAG_LABEL_STAGE, seed]))
    n = images.shape[0]
    n_new = len(np.unique(class_indices))
    for _ in range(stage.epochs):
        tset = None
        if translate and len(store):
            prompted = batch_features(images, backbone, pool, task_id)
            tset = build_translation(store, group_by_class(prompted, class_indices))
        order = rng.permutation(n)
        for start in range(0, n, stage.batch_size):
            idx = order[start:start + stage.batch_size]
            feat, cache = features_forward(images[idx], backbone, layer_prompts,
                                           want_cache=True)
            bf = feat
            bl = class_indices[idx]
            if tset:
                k = _translated_count(len(idx), n_new, len(tset))
                if k > 0:
                    rows, tl = sample_translated_batch(tset, k, rng)
                    bf = np.vstack([feat, rows])
                    bl = np.concatenate([bl, tl])
            logits = bf @ head.w.T + head.b
            _, dlogits = cross_entropy_batch(logits, bl)
            grads = {"w": dlogits.T @ bf, "b": dlogits.sum(axis=0)}
            dfeat = dlogits[:len(idx)] @ head.w
            _, pgrads = features_backward(dfeat, cache, backbone, layer_prompts,
                                          want_prompt_grads=True)
            for layer in prompt.layers:
                grads[f"p{layer}"] = pgrads[layer]
            opt.step(trainable, grads)


class PrePromptLearner:
    """System state for the two-stage method; also covers the finetune ablations.

    With ``use_prompt_stage`` off there are no prompts and no prompt
    classifier: the label head is trained directly on prompt-free features
    (optionally with translated features), which is the finetune baseline.
    """

    method_name = "preprompt"

    def __init__(self, backbone: BackboneParams, cfg: PipelineConfig, seed: int):
        backbone.require_frozen("learner construction")
        self.backbone = backbone
        self.cfg = cfg
        self.seed = seed
        dim = backbone.config.embed_dim
        self.layout = TaskLayout()
        self.clal = LinearHead(dim)
        self.clap: LinearHead | None = None
        self.pool: PromptPool | None = None
        if cfg.use_prompt_stage:
            self.clap = LinearHead(dim)
            self.pool = PromptPool(cfg.prompt_mode, cfg.prompt_len,
                                   cfg.prompted_layers, dim)
            self.pool.validate_depth(backbone.config.depth)
        self.prototypes = PrototypeStore()
        self.backbone_checksum = backbone.checksum()

    # -- training ----------------------------------------------------------

    def learn_task(self, images: np.ndarray, labels: np.ndarray,
                   classes: Sequence[int]) -> None:
        task = self.layout.n_tasks
        classes = [int(c) for c in classes]
        if not set(int(v) for v in labels) <= set(classes):
            raise DomainError("task labels outside the declared class set")
        self.layout.add_task(classes)
        class_idx = self.layout.indices_of(labels)
        self.clal.extend(len(classes))

        features = batch_features(np.asarray(images, dtype=np.float64), self.backbone)
        fbc = group_by_class(features, class_idx)
        if set(fbc) != set(self.layout.task_slice(task)):
            raise DomainError("every declared class needs at least one sample")
        protos = compute_prototypes(fbc)

        if self.cfg.use_prompt_stage:
            self._train_selection_stage(images, features, class_idx, task)
            self.pool.alloc_task_prompt(task, seed=self._child_seed(_TAG_PROMPT_INIT, task))
            train_label_stage(images, class_idx, self.backbone, self.pool, task,
                              self.clal, self.prototypes,
                              self.cfg.translate_label_stage, self.cfg.label_stage,
                              seed=self._child_seed(_TAG_LABEL_STAGE, task))
            self.pool.freeze_task(task)
        else:
            rng = np.random.default_rng(
                np.random.SeedSequence([_TAG_LABEL_STAGE, self._child_seed(_TAG_LABEL_STAGE, task)]))
            train_head_on_features(features, class_idx, self.clal, self.prototypes,
                                   self.cfg.translate_label_stage,
                                   self.cfg.label_stage, rng)

        for c in self.layout.task_slice(task):
            self.prototypes.add(c, protos[c], task)
        self._verify_frozen_state()
        log.info("learned task %d (%d classes, %d samples)",
                 task, len(classes), len(labels))

    def _train_selection_stage(self, images, features, class_idx, task) -> None:
        self.clap.extend(self.layout.counts[task])
        if self.cfg.reset_prompt_classifier:
            self.clap.w[:] = 0.0
            self.clap.b[:] = 0.0
        rng = np.random.default_rng(
            np.random.SeedSequence([_TAG_PROMPT_STAGE, self._child_seed(_TAG_PROMPT_STAGE, task)]))
        train_head_on_features(features, class_idx, self.clap, self.prototypes,
                               self.cfg.translate_prompt_stage,
                               self.cfg.prompt_stage, rng)

    def _child_seed(self, tag: int, task: int) -> int:
        return int(np.random.SeedSequence([self.seed, tag, task]).generate_state(1)[0])

    def _verify_frozen_state(self) -> None:
        if self.backbone.checksum() != self.backbone_checksum:
            raise ContractViolation("frozen backbone changed during training")
        if self.pool is not None:
            self.pool.verify_integrity()

    # -- inference ---------------------------------------------------------

    @property
    def tasks_learned(self) -> int:
        return self.layout.n_tasks

    def features(self, images: np.ndarray) -> np.ndarray:
        return batch_features(np.asarray(images, dtype=np.float64), self.backbone)

    def predict_task_from_features(self, features: np.ndarray) -> np.ndarray:
        if self.clap is None or self.clap.n_classes == 0:
            raise ContractViolation("prompt classifier not trained")
        argmax = np.argmax(self.clap.logits(features), axis=1)
        return _eq5_task_indices(argmax, self.layout.counts)

    def predict_prompt(self, image: np.ndarray) -> tuple[int, np.ndarray]:
        """Task id plus the one-hot posterior over the prompt pool."""
        if self.pool is None or len(self.pool) == 0:
            raise ContractViolation("no prompts learned yet")
        task = int(self.predict_task_from_features(self.features(image[None]))[0])
        onehot = np.zeros(len(self.pool))
        onehot[task] = 1.0
        return task, onehot

    def predict_label(self, image: np.ndarray, task_id: int) -> int:
        """Label prediction under one task's prompt; returns the original class id."""
        feat = batch_features(np.asarray(image, dtype=np.float64)[None],
                              self.backbone, self.pool, task_id)
        idx = int(np.argmax(self.clal.logits(feat), axis=1)[0])
        return int(self.layout.originals_of(np.array([idx]))[0])

    def predict(self, images: np.ndarray,
                force_tasks: np.ndarray | None = None) -> np.ndarray:
        """Original-class predictions for a batch; samples are independent."""
        if self.layout.n_tasks == 0:
            raise ContractViolation("no tasks learned yet")
        images = np.asarray(images, dtype=np.float64)
        if not self.cfg.use_prompt_stage:
            feats = self.features(images)
            return self.layout.originals_of(np.argmax(self.clal.logits(feats), axis=1))
        if force_tasks is not None:
            tasks = np.asarray(force_tasks, dtype=np.int64)
        else:
            tasks = self.predict_task_from_features(self.features(images))
        out = np.zeros(images.shape[0], dtype=np.int64)
        for task in np.unique(tasks):
            mask = tasks == task
            feats = batch_features(images[mask], self.backbone, self.pool, int(task))
            out[mask] = np.argmax(self.clal.logits(feats), axis=1)
        return self.layout.originals_of(out)

    def classify(self, image: np.ndarray) -> int:
        """Two-stage prediction for one sample: select the prompt, then the label."""
        return int(self.predict(np.asarray(image)[None])[0])


class FinetuneLearner(PrePromptLearner):
    """Growing linear head on frozen prompt-free features; no prompts."""

    method_name = "finetune"

    def __init__(self, backbone: BackboneParams, cfg: PipelineConfig, seed: int,
                 translate: bool = False):
        base = PipelineConfig(
            prompt_mode=cfg.prompt_mode, prompt_len=cfg.prompt_len,
            prompted_layers=cfg.prompted_layers, prompt_stage=cfg.prompt_stage,
            label_stage=cfg.label_stage, use_prompt_stage=False,
            translate_prompt_stage=False, translate_label_stage=translate)
        super().__init__(backbone, base, seed)


class KvCorrelationLearner(PrePromptLearner):
    """Key-correlation prompt selection: one trainable key vector per task.

    Keys are trained to attract current-task prompt-free features (cosine
    pull loss); inference selects the prompt whose key is most similar to
    the query feature. The label stage is unchanged.
    """

    method_name = "kv-correlation"

    def __init__(self, backbone: BackboneParams, cfg: PipelineConfig, seed: int):
        if not cfg.use_prompt_stage:
            raise ConfigError("kv-correlation requires the prompt stage")
        super().__init__(backbone, cfg, seed)
        self.clap = None
        self.keys: list[np.ndarray] = []

    def _train_selection_stage(self, images, features, class_idx, task) -> None:
        rng = np.random.default_rng(
            np.random.SeedSequence([_TAG_SELECTOR, self._child_seed(_TAG_SELECTOR, task)]))
        key = rng.normal(0.0, 0.02, size=self.backbone.config.embed_dim)
        stage = self.cfg.prompt_stage
        opt = Adam({"key": key}, learning_rate=stage.learning_rate,
                   beta1=stage.beta1, beta2=stage.beta2, epsilon=stage.epsilon)
        n = features.shape[0]
        for _ in range(stage.epochs):
            order = rng.permutation(n)
            for start in range(0, n, stage.batch_size):
                f = features[order[start:start + stage.batch_size]]
                fn = np.linalg.norm(f, axis=1)
                kn = np.linalg.norm(key)
                cos = (f @ key) / (fn * kn)
                # d(1 - cos)/dkey averaged over the batch
                dkey = -(f / (fn * kn)[:, None]
                         - np.outer(cos / kn**2, key)).mean(axis=0)
                opt.step({"key": key}, {"key": dkey})
        key.flags.writeable = False
        self.keys.append(key)

    def predict_task_from_features(self, features: np.ndarray) -> np.ndarray:
        if not self.keys:
            raise ContractViolation("no keys learned yet")
        keys = np.stack(self.keys)
        keys = keys / np.linalg.norm(keys, axis=1, keepdims=True)
        feats = features / np.linalg.norm(features, axis=1, keepdims=True)
        return np.argmax(feats @ keys.T, axis=1)

    def predict_prompt(self, image: np.ndarray) -> tuple[int, np.ndarray]:
        if not self.keys:
            raise ContractViolation("no keys learned yet")
        task = int(self.predict_task_from_features(self.features(image[None]))[0])
        onehot = np.zeros(len(self.keys))
        onehot[task] = 1.0
        return task, onehot
