"""Task prompt pool and the two MSA augmentation mechanisms.

Prompt tuning prepends the prompt rows to the query, key and value sources,
lengthening the output by the prompt row count. Prefix tuning splits the
stored block equally into key rows and value rows and leaves the output
shape unchanged. In prefix mode a prompt of "length L" stores L rows for
keys plus L rows for values per prompted layer (a 2L x D matrix), which is
what the parameter accounting counts.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .backbone import (PREFIX_MODE, PROMPT_MODE, BackboneParams,
                       extract_feature, features_forward, msa_forward)
from .errors import ConfigError, ContractViolation, DomainError


def prompt_tuning_msa(h_q: np.ndarray, h_k: np.ndarray, h_v: np.ndarray,
                      p: np.ndarray, blk: dict[str, np.ndarray]) -> np.ndarray:
    """MSA(Con(p, h_Q), Con(p, h_K), Con(p, h_V)) for single (rows, D) inputs."""
    if p.ndim != 2 or p.shape[1] != h_q.shape[1]:
        raise DomainError(f"prompt width {p.shape} does not match tokens {h_q.shape}")
    q = np.concatenate([p, h_q], axis=0)[None]
    k = np.concatenate([p, h_k], axis=0)[None]
    v = np.concatenate([p, h_v], axis=0)[None]
    out, _ = msa_forward(q, k, v, blk["wq"], blk["wk"], blk["wv"], blk["wo"])
    return out[0]


def prefix_tuning_msa(h_q: np.ndarray, h_k: np.ndarray, h_v: np.ndarray,
                      p: np.ndarray, blk: dict[str, np.ndarray]) -> np.ndarray:
    """MSA(h_Q, Con(p_K, h_K), Con(p_V, h_V)); p splits equally into K/V rows."""
    if p.ndim != 2 or p.shape[1] != h_q.shape[1]:
        raise DomainError(f"prompt width {p.shape} does not match tokens {h_q.shape}")
    if p.shape[0] % 2:
        raise ConfigError("prefix prompt must have an even row count")
    s = p.shape[0] // 2
    k = np.concatenate([p[:s], h_k], axis=0)[None]
    v = np.concatenate([p[s:], h_v], axis=0)[None]
    out, _ = msa_forward(h_q[None], k, v, blk["wq"], blk["wk"], blk["wv"], blk["wo"])
    return out[0]


@dataclass
class Prompt:
    task_id: int
    mode: str
    layers: dict[int, np.ndarray]  # block index -> stored rows x D
    frozen: bool = False
    digest: str | None = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for idx in sorted(self.layers):
            h.update(np.ascontiguousarray(self.layers[idx]).tobytes())
        return h.hexdigest()

    def freeze(self) -> None:
        for arr in self.layers.values():
            arr.flags.writeable = False
        self.frozen = True
        self.digest = self.checksum()


class PromptPool:
    """Ordered collection of per-task prompts, one entry per learned task.

    ``prompt_len`` counts rows per key and per value block in prefix mode
    (stored matrix is 2*prompt_len x D per layer) and prepended rows in
    prompt-tuning mode. Prompts of completed tasks are frozen read-only.
    """

    def __init__(self, mode: str, prompt_len: int, prompted_layers: tuple[int, ...],
                 embed_dim: int):
        if mode not in (PREFIX_MODE, PROMPT_MODE):
            raise ConfigError(f"unknown prompt mode {mode!r}")
        if prompt_len < 1:
            raise ConfigError("prompt length must be >= 1")
        if len(prompted_layers) != len(set(prompted_layers)) or not prompted_layers:
            raise ConfigError("prompted layers must be a nonempty set of indices")
        if any(i < 0 for i in prompted_layers):
            raise ConfigError("prompted layer indices must be >= 0")
        self.mode = mode
        self.prompt_len = prompt_len
        self.prompted_layers = tuple(sorted(prompted_layers))
        self.embed_dim = embed_dim
        self.entries: list[Prompt] = []

    @property
    def rows_per_layer(self) -> int:
        return 2 * self.prompt_len if self.mode == PREFIX_MODE else self.prompt_len

    def __len__(self) -> int:
        return len(self.entries)

    def alloc_task_prompt(self, task_id: int, seed: int) -> Prompt:
        """Append a freshly initialized prompt for the next task (0-based id)."""
        if task_id != len(self.entries):
            raise DomainError(
                f"task id {task_id} invalid for pool of size {len(self.entries)}")
        rng = np.random.default_rng(np.random.SeedSequence([0x9406, seed, task_id]))
        layers = {i: rng.normal(0.0, 0.02, size=(self.rows_per_layer, self.embed_dim))
                  for i in self.prompted_layers}
        prompt = Prompt(task_id=task_id, mode=self.mode, layers=layers)
        self.entries.append(prompt)
        return prompt

    def layer_prompts(self, task_id: int) -> dict[int, tuple[str, np.ndarray]]:
        """Per-layer (mode, matrix) map consumed by the backbone forward."""
        prompt = self.entries[task_id]
        return {i: (self.mode, arr) for i, arr in prompt.layers.items()}

    def freeze_task(self, task_id: int) -> None:
        self.entries[task_id].freeze()

    def verify_integrity(self) -> None:
        """Raise if any completed task's prompt changed since freezing."""
        for prompt in self.entries:
            if prompt.frozen and prompt.checksum() != prompt.digest:
                raise ContractViolation(
                    f"prompt of task {prompt.task_id} changed after freezing")

    def parameter_count(self) -> int:
        return sum(arr.size for p in self.entries for arr in p.layers.values())

    def validate_depth(self, depth: int) -> None:
        if any(i >= depth for i in self.prompted_layers):
            raise ConfigError(
                f"prompted layers {self.prompted_layers} exceed backbone depth {depth}")


def forward_with_prompt(image: np.ndarray, params: BackboneParams,
                        pool: PromptPool | None = None,
                        task_id: int | None = None) -> np.ndarray:
    """Feature of one image under a task prompt; plain feature when task_id is None."""
    if pool is None or task_id is None:
        return extract_feature(image, params)
    pool.validate_depth(params.config.depth)
    feat, _ = features_forward(np.asarray(image, dtype=np.float64)[None], params,
                               pool.layer_prompts(task_id))
    return feat[0]


def batch_features(images: np.ndarray, params: BackboneParams,
                   pool: PromptPool | None = None, task_id: int | None = None,
                   batch_size: int = 256) -> np.ndarray:
    """Features for many images, computed in chunks without gradient caches."""
    layer_prompts = None
    if pool is not None and task_id is not None:
        pool.validate_depth(params.config.depth)
        layer_prompts = pool.layer_prompts(task_id)
    chunks = []
    for start in range(0, images.shape[0], batch_size):
        feat, _ = features_forward(images[start:start + batch_size], params,
                                   layer_prompts)
        chunks.append(feat)
    if not chunks:
        return np.zeros((0, params.config.embed_dim))
    return np.concatenate(chunks, axis=0)
