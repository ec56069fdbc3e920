"""Scenario state checkpoint: one section-tagged binary file.

Envelope: magic "PPCK" | u32 version | u32 section count | sections |
u64 checksum (first 8 bytes of the SHA-256 over all section bytes).
Each section is a 4-byte tag, a little-endian u64 payload length, and the
payload. Sections:

  LAYT  u32 T | u32 n_classes | T x u32 counts | n_classes x i64 class ids
  CLAP  u32 K | u32 D | K*D f64 weights | K f64 bias   (prompt classifier)
  CLAL  same layout (label classifier)
  POOL  u32 mode (0 prefix, 1 prompt) | u32 prompt_len | u32 n_layers |
        layer indices u32 | u32 n_tasks | per task, per layer: rows x D f64
  PROT  u32 n | u32 D | per entry: i32 class id | i32 task index | D f64

All reals are little-endian float64.
"""
from __future__ import annotations

import hashlib
import struct

import numpy as np

from .backbone import PREFIX_MODE, PROMPT_MODE, BackboneParams
from .errors import DomainError
from .pipeline import LinearHead, PipelineConfig, PrePromptLearner
from .prompts import Prompt

MAGIC = b"PPCK"
VERSION = 1


def _head_payload(head: LinearHead) -> bytes:
    return (struct.pack("<II", head.n_classes, head.dim)
            + np.ascontiguousarray(head.w, dtype="<f8").tobytes()
            + np.ascontiguousarray(head.b, dtype="<f8").tobytes())


def _read_head(payload: bytes, dim: int) -> tuple[np.ndarray, np.ndarray]:
    k, d = struct.unpack_from("<II", payload, 0)
    if d != dim:
        raise DomainError(f"head dimension {d} does not match backbone {dim}")
    w = np.frombuffer(payload, dtype="<f8", count=k * d, offset=8)
    b = np.frombuffer(payload, dtype="<f8", count=k, offset=8 + k * d * 8)
    return w.astype(np.float64).reshape(k, d), b.astype(np.float64)


def save_state(learner: PrePromptLearner, path) -> None:
    sections: list[tuple[bytes, bytes]] = []

    layout = learner.layout
    sections.append((b"LAYT", struct.pack("<II", layout.n_tasks, layout.n_classes)
                     + struct.pack(f"<{layout.n_tasks}I", *layout.counts)
                     + np.asarray(layout.class_order, dtype="<i8").tobytes()))
    if learner.clap is not None:
        sections.append((b"CLAP", _head_payload(learner.clap)))
    sections.append((b"CLAL", _head_payload(learner.clal)))
    if learner.pool is not None:
        pool = learner.pool
        body = struct.pack("<III", 0 if pool.mode == PREFIX_MODE else 1,
                           pool.prompt_len, len(pool.prompted_layers))
        body += struct.pack(f"<{len(pool.prompted_layers)}I", *pool.prompted_layers)
        body += struct.pack("<I", len(pool.entries))
        for prompt in pool.entries:
            for layer in pool.prompted_layers:
                body += np.ascontiguousarray(prompt.layers[layer],
                                             dtype="<f8").tobytes()
        sections.append((b"POOL", body))
    protos = learner.prototypes
    body = struct.pack("<II", len(protos), learner.backbone.config.embed_dim)
    for class_idx, mu in protos.items():
        body += struct.pack("<ii", class_idx, protos.task_of(class_idx))
        body += np.ascontiguousarray(mu, dtype="<f8").tobytes()
    sections.append((b"PROT", body))

    blob = b""
    for tag, payload in sections:
        blob += tag + struct.pack("<Q", len(payload)) + payload
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(sections)))
        fh.write(blob)
        fh.write(hashlib.sha256(blob).digest()[:8])


def load_state(path, backbone: BackboneParams, cfg: PipelineConfig,
               seed: int = 0) -> PrePromptLearner:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise DomainError(f"bad state magic at offset 0: {raw[:4]!r}")
    version, n_sections = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise DomainError(f"unsupported state version {version}")
    blob = raw[12:-8]
    if hashlib.sha256(blob).digest()[:8] != raw[-8:]:
        raise DomainError("state checksum mismatch")

    sections: dict[bytes, bytes] = {}
    pos = 0
    for _ in range(n_sections):
        tag = blob[pos:pos + 4]
        (length,) = struct.unpack_from("<Q", blob, pos + 4)
        pos += 12
        sections[tag] = blob[pos:pos + length]
        pos += length

    dim = backbone.config.embed_dim
    learner = PrePromptLearner(backbone, cfg, seed)

    layt = sections[b"LAYT"]
    n_tasks, n_classes = struct.unpack_from("<II", layt, 0)
    counts = struct.unpack_from(f"<{n_tasks}I", layt, 8)
    order = np.frombuffer(layt, dtype="<i8", count=n_classes, offset=8 + 4 * n_tasks)
    start = 0
    for count in counts:
        learner.layout.add_task(order[start:start + count].tolist())
        start += count

    if b"CLAP" in sections:
        if learner.clap is None:
            raise DomainError("state has a prompt classifier but config does not")
        learner.clap.w, learner.clap.b = _read_head(sections[b"CLAP"], dim)
    learner.clal.w, learner.clal.b = _read_head(sections[b"CLAL"], dim)

    if b"POOL" in sections:
        if learner.pool is None:
            raise DomainError("state has a prompt pool but config does not")
        body = sections[b"POOL"]
        mode_code, prompt_len, n_layers = struct.unpack_from("<III", body, 0)
        mode = PREFIX_MODE if mode_code == 0 else PROMPT_MODE
        layers = struct.unpack_from(f"<{n_layers}I", body, 12)
        if (mode != learner.pool.mode or prompt_len != learner.pool.prompt_len
                or tuple(layers) != learner.pool.prompted_layers):
            raise DomainError("prompt pool layout does not match config")
        (pool_tasks,) = struct.unpack_from("<I", body, 12 + 4 * n_layers)
        rows = learner.pool.rows_per_layer
        pos = 16 + 4 * n_layers
        for task_id in range(pool_tasks):
            per_layer = {}
            for layer in layers:
                arr = np.frombuffer(body, dtype="<f8", count=rows * dim, offset=pos)
                per_layer[layer] = arr.astype(np.float64).reshape(rows, dim)
                pos += rows * dim * 8
            prompt = Prompt(task_id=task_id, mode=mode, layers=per_layer)
            prompt.freeze()
            learner.pool.entries.append(prompt)

    body = sections[b"PROT"]
    n, d = struct.unpack_from("<II", body, 0)
    if d != dim:
        raise DomainError(f"prototype dimension {d} does not match backbone {dim}")
    pos = 8
    for _ in range(n):
        class_idx, task_idx = struct.unpack_from("<ii", body, pos)
        mu = np.frombuffer(body, dtype="<f8", count=dim, offset=pos + 8)
        learner.prototypes.add(class_idx, mu.astype(np.float64), task_idx)
        pos += 8 + dim * 8
    return learner
