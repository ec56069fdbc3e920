"""Prototype store and prototype-anchored feature translation.

Old-class features are synthesized from current-task features by parallel
translation: copy the live rows of the nearest new class, subtract their
mean, add the old prototype. Translation is an isometry, so within-class
geometry is preserved while the cloud is re-centered on the old class.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ContractViolation, DomainError


class PrototypeStore:
    """One mean feature per learned class; entries are immutable once stored."""

    def __init__(self):
        self._mus: dict[int, np.ndarray] = {}
        self._task_of: dict[int, int] = {}

    def add(self, class_idx: int, mu: np.ndarray, task_idx: int) -> None:
        if class_idx in self._mus:
            raise ContractViolation(f"prototype for class {class_idx} already stored")
        arr = np.array(mu, dtype=np.float64).reshape(-1)
        arr.flags.writeable = False
        self._mus[class_idx] = arr
        self._task_of[class_idx] = task_idx

    def __len__(self) -> int:
        return len(self._mus)

    def __contains__(self, class_idx: int) -> bool:
        return class_idx in self._mus

    def classes(self) -> list[int]:
        return list(self._mus)

    def mu(self, class_idx: int) -> np.ndarray:
        return self._mus[class_idx]

    def task_of(self, class_idx: int) -> int:
        return self._task_of[class_idx]

    def items(self):
        return self._mus.items()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for c in sorted(self._mus):
            h.update(str(c).encode())
            h.update(self._mus[c].tobytes())
        return h.hexdigest()


@dataclass
class TranslatedClass:
    rows: np.ndarray        # same row count as the source class's live features
    source_class: int       # new class whose features were shifted


@dataclass
class TranslatedFeatureSet:
    entries: dict[int, TranslatedClass] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return bool(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def compute_prototypes(features_by_class: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Arithmetic mean feature per class (float64)."""
    protos = {}
    for class_idx, rows in features_by_class.items():
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] == 0:
            raise DomainError(f"class {class_idx} has no feature rows")
        protos[class_idx] = rows.mean(axis=0)
    return protos


_METRIC_ORDER = {"euclidean": 2, "manhattan": 1}


def nearest_new_prototype(mu_old: np.ndarray,
                          new_prototypes: Mapping[int, np.ndarray],
                          metric: str = "euclidean") -> int:
    """Distance argmin over new prototypes; ties go to the lowest class id."""
    if not new_prototypes:
        raise DomainError("no new prototypes to match against")
    if metric not in _METRIC_ORDER:
        raise DomainError(f"unknown metric {metric!r}")
    order = _METRIC_ORDER[metric]
    best_id = None
    best_d = np.inf
    for class_idx in sorted(new_prototypes):
        d = float(np.linalg.norm(mu_old - new_prototypes[class_idx], ord=order))
        if d < best_d:
            best_d = d
            best_id = class_idx
    return best_id


def translate_features(source_features: np.ndarray, mu_new: np.ndarray,
                       mu_old: np.ndarray) -> np.ndarray:
    """Per-row shift: f_hat = f_new - mu_new + mu_old.

    The shift vector is formed once so equal prototypes give the identity
    exactly and pairwise row distances are preserved bit-for-bit.
    """
    source_features = np.asarray(source_features, dtype=np.float64)
    if source_features.shape[1] != mu_new.shape[0] or mu_new.shape != mu_old.shape:
        raise DomainError("feature dimension mismatch in translation")
    return source_features + (mu_old - mu_new)


def build_translation(store: PrototypeStore,
                      new_features_by_class: Mapping[int, np.ndarray],
                      metric: str = "euclidean") -> TranslatedFeatureSet:
    """Synthesize features for every stored old class from current-task features.

    New prototypes are computed from the supplied features; each old class is
    matched to its nearest new prototype, and that class's live rows are
    shifted onto the old prototype. An empty store yields an empty set (the
    first-task path).
    """
    out = TranslatedFeatureSet()
    if len(store) == 0:
        return out
    new_protos = compute_prototypes(new_features_by_class)
    for old_class, mu_old in store.items():
        k_star = nearest_new_prototype(mu_old, new_protos, metric)
        rows = translate_features(new_features_by_class[k_star],
                                  new_protos[k_star], mu_old)
        out.entries[old_class] = TranslatedClass(rows=rows, source_class=k_star)
    return out


def sample_translated_batch(tset: TranslatedFeatureSet, count: int,
                            rng: np.random.Generator | int
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``count`` rows balanced across old classes, with replacement.

    Returns (rows, class labels). The per-class allocation splits ``count``
    as evenly as possible; leftover slots go to a seeded random subset.
    """
    if count <= 0:
        raise DomainError("sample count must be positive")
    if not tset:
        raise DomainError("cannot sample from an empty translated set")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    classes = sorted(tset.entries)
    base, rem = divmod(count, len(classes))
    bonus = set(rng.choice(len(classes), size=rem, replace=False)) if rem else set()
    rows = []
    labels = []
    for pos, class_idx in enumerate(classes):
        k = base + (1 if pos in bonus else 0)
        if k == 0:
            continue
        pool_rows = tset.entries[class_idx].rows
        picks = rng.integers(0, pool_rows.shape[0], size=k)
        rows.append(pool_rows[picks])
        labels.append(np.full(k, class_idx, dtype=np.int64))
    return np.concatenate(rows, axis=0), np.concatenate(labels)
