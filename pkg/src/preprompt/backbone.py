"""Miniature vision transformer backbone.

Patch embedding, pre-norm multi-head self-attention blocks with per-head
(block-diagonal) query/key/value projections, and a final layer norm over
the class token. The backbone is pretrained once with a throwaway linear
head, then frozen; during incremental learning only prompts and classifier
heads receive gradients.

Forward passes operate on batches shaped (B, N, D). Every forward helper
returns a cache consumed by its matching backward helper; gradients are
accumulated by explicit reverse-mode traversal of the fixed graph
(embed -> blocks -> final norm), no autodiff tape involved.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation, DomainError
from .kernels import (ln_backward_2d, ln_forward_2d, softmax_backward_2d,
                      softmax_forward_2d)
from .numeric import Adam, check_finite, cross_entropy_batch

log = logging.getLogger(__name__)

LN_EPS = 1e-6
CHECKPOINT_MAGIC = b"PPVT"
CHECKPOINT_VERSION = 1

# Per-layer prompt injection modes.
PREFIX_MODE = "prefix"
PROMPT_MODE = "prompt"


@dataclass(frozen=True)
class BackboneConfig:
    image_h: int = 28
    image_w: int = 28
    channels: int = 1
    patch: int = 7
    embed_dim: int = 64
    heads: int = 4
    depth: int = 6
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if min(self.image_h, self.image_w, self.channels, self.patch,
               self.embed_dim, self.heads) < 1:
            raise ConfigError("backbone dimensions must be positive")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}")
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def n_patches(self) -> int:
        return (self.image_h // self.patch) * (self.image_w // self.patch)

    @property
    def seq_len(self) -> int:
        return self.n_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


_BLOCK_FIELDS = ("wq", "wk", "wv", "wo", "ln1g", "ln1b",
                 "w1", "b1", "w2", "b2", "ln2g", "ln2b")


class BackboneParams:
    """All transformer parameters, kept in a fixed, documented tensor order.

    Checkpoint/checksum order: proj, cls, pos, then per block
    wq, wk, wv, wo, ln1g, ln1b, w1, b1, w2, b2, ln2g, ln2b, then lnfg, lnfb.
    Freezing marks every array read-only, so later mutation attempts raise.
    """

    def __init__(self, config: BackboneConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors
        self.frozen = False

    @classmethod
    def init_random(cls, config: BackboneConfig, seed: int) -> "BackboneParams":
        rng = np.random.default_rng(np.random.SeedSequence([0x5EED, seed]))
        d, m, dh, hid = (config.embed_dim, config.heads,
                         config.head_dim, config.mlp_hidden)

        def glorot(*shape):
            fan_in, fan_out = shape[-2], shape[-1]
            return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)

        t: dict[str, np.ndarray] = {}
        t["proj"] = rng.normal(0.0, 0.02, size=(config.patch_dim, d))
        t["cls"] = rng.normal(0.0, 0.02, size=(d,))
        t["pos"] = rng.normal(0.0, 0.02, size=(config.seq_len, d))
        for i in range(config.depth):
            t[f"b{i}.wq"] = glorot(m, dh, dh)
            t[f"b{i}.wk"] = glorot(m, dh, dh)
            t[f"b{i}.wv"] = glorot(m, dh, dh)
            t[f"b{i}.wo"] = glorot(d, d)
            t[f"b{i}.ln1g"] = np.ones(d)
            t[f"b{i}.ln1b"] = np.zeros(d)
            t[f"b{i}.w1"] = glorot(d, hid)
            t[f"b{i}.b1"] = np.zeros(hid)
            t[f"b{i}.w2"] = glorot(hid, d)
            t[f"b{i}.b2"] = np.zeros(d)
            t[f"b{i}.ln2g"] = np.ones(d)
            t[f"b{i}.ln2b"] = np.zeros(d)
        t["lnfg"] = np.ones(d)
        t["lnfb"] = np.zeros(d)
        return cls(config, t)

    def block(self, i: int) -> dict[str, np.ndarray]:
        return {f: self.tensors[f"b{i}.{f}"] for f in _BLOCK_FIELDS}

    def freeze(self) -> str:
        for arr in self.tensors.values():
            arr.flags.writeable = False
        self.frozen = True
        return self.checksum()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in self.tensors.values():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def require_frozen(self, who: str) -> None:
        if not self.frozen:
            raise ContractViolation(f"{who} requires a frozen backbone")


# ---------------------------------------------------------------------------
# Elementary layers


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    x2 = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
    out, xhat, inv = ln_forward_2d(x2, g, b, LN_EPS)
    return out.reshape(x.shape), (xhat, inv, x.shape)


def layer_norm_backward(dy: np.ndarray, cache, g: np.ndarray):
    xhat, inv, shape = cache
    dy2 = np.ascontiguousarray(dy.reshape(-1, dy.shape[-1]))
    dx, dg, db = ln_backward_2d(dy2, xhat, inv, g)
    return dx.reshape(shape), dg, db


# tanh form of GELU; the backward differentiates the same approximation
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(x: np.ndarray):
    u = x * x
    u *= _GELU_C * _GELU_A
    u += _GELU_C
    u *= x
    th = np.tanh(u)
    out = th + 1.0
    out *= x
    out *= 0.5
    return out, (x, th)


def gelu_backward(dy: np.ndarray, cache):
    x, th = cache
    inner = x * x
    inner *= 3.0 * _GELU_C * _GELU_A
    inner += _GELU_C
    sech2 = th * th
    np.subtract(1.0, sech2, out=sech2)
    inner *= sech2
    inner *= x
    inner += th
    inner += 1.0
    inner *= 0.5
    inner *= dy
    return inner


def _split_heads(x: np.ndarray, m: int) -> np.ndarray:
    """(B, N, D) -> (B, m, N, D/m); segment i is columns [i*dh, (i+1)*dh)."""
    b, n, d = x.shape
    return x.reshape(b, n, m, d // m).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, m, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, m * dh)


def _block_diag(w: np.ndarray) -> np.ndarray:
    """(m, dh, dh) per-head projections as one block-diagonal (D, D) matrix."""
    m, dh, _ = w.shape
    out = np.zeros((m * dh, m * dh))
    for i in range(m):
        out[i * dh:(i + 1) * dh, i * dh:(i + 1) * dh] = w[i]
    return out


def _diag_blocks(full: np.ndarray, m: int) -> np.ndarray:
    dh = full.shape[0] // m
    return np.stack([full[i * dh:(i + 1) * dh, i * dh:(i + 1) * dh]
                     for i in range(m)])


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def msa_forward(qsrc: np.ndarray, ksrc: np.ndarray, vsrc: np.ndarray,
                wq: np.ndarray, wk: np.ndarray, wv: np.ndarray, wo: np.ndarray):
    """Multi-head self-attention over three token sources.

    Each source is split into m contiguous width-D/m segments; segment i is
    projected by the i-th head's square projection, attention is scaled by
    sqrt(D/m), head outputs are concatenated and mixed by the output
    projection. Key and value sources must have equal row counts.

    The per-head projections are applied as one block-diagonal matmul so the
    hot path runs as a few large GEMMs.
    """
    m = wq.shape[0]
    d = qsrc.shape[-1]
    if d != m * wq.shape[1]:
        raise DomainError(f"token width {d} does not match {m} heads of {wq.shape[1]}")
    if ksrc.shape[-1] != d or vsrc.shape[-1] != d:
        raise DomainError("query/key/value sources must share the embedding width")
    if ksrc.shape[1] != vsrc.shape[1]:
        raise DomainError("key and value sources must have the same row count")
    bq = _block_diag(wq)
    bk = _block_diag(wk)
    bv = _block_diag(wv)
    q = _split_heads((_flat(qsrc) @ bq).reshape(qsrc.shape), m)
    k = _split_heads((_flat(ksrc) @ bk).reshape(ksrc.shape), m)
    v = _split_heads((_flat(vsrc) @ bv).reshape(vsrc.shape), m)
    scale = 1.0 / np.sqrt(wq.shape[1])
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    attn = softmax_forward_2d(
        np.ascontiguousarray(scores.reshape(-1, scores.shape[-1]))
    ).reshape(scores.shape)
    per_head = attn @ v
    heads_out = _merge_heads(per_head)
    out = (_flat(heads_out) @ wo).reshape(heads_out.shape)
    cache = (qsrc, ksrc, vsrc, q, k, v, attn, heads_out, scale, (bq, bk, bv))
    return out, cache


def msa_backward(dout: np.ndarray, cache, wq, wk, wv, wo, want_param_grads: bool):
    qsrc, ksrc, vsrc, q, k, v, attn, heads_out, scale, (bq, bk, bv) = cache
    m = wq.shape[0]
    grads = None
    dout2 = _flat(dout)
    if want_param_grads:
        grads = {"wo": _flat(heads_out).T @ dout2}
    dheads = _split_heads((dout2 @ wo.T).reshape(dout.shape), m)
    dattn = dheads @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dheads
    dscores = softmax_backward_2d(
        np.ascontiguousarray(dattn.reshape(-1, dattn.shape[-1])),
        np.ascontiguousarray(attn.reshape(-1, attn.shape[-1]))
    ).reshape(dattn.shape)
    dscores *= scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dq2 = _flat(_merge_heads(dq))
    dk2 = _flat(_merge_heads(dk))
    dv2 = _flat(_merge_heads(dv))
    if want_param_grads:
        # off-diagonal blocks of the full gradient belong to entries pinned
        # at zero, so only the diagonal blocks are free parameters
        grads["wq"] = _diag_blocks(_flat(qsrc).T @ dq2, m)
        grads["wk"] = _diag_blocks(_flat(ksrc).T @ dk2, m)
        grads["wv"] = _diag_blocks(_flat(vsrc).T @ dv2, m)
    dqsrc = (dq2 @ bq.T).reshape(qsrc.shape)
    dksrc = (dk2 @ bk.T).reshape(ksrc.shape)
    dvsrc = (dv2 @ bv.T).reshape(vsrc.shape)
    return dqsrc, dksrc, dvsrc, grads


def mlp_forward(x: np.ndarray, w1, b1, w2, b2):
    x2 = _flat(x)
    pre = x2 @ w1 + b1
    act, gc = gelu(pre)
    out = (act @ w2 + b2).reshape(x.shape[:-1] + (w2.shape[1],))
    return out, (x2, gc, act)


def mlp_backward(dy: np.ndarray, cache, w1, w2, want_param_grads: bool):
    x2, gc, act = cache
    dy2 = _flat(dy)
    grads = None
    if want_param_grads:
        grads = {"w2": act.T @ dy2, "b2": dy2.sum(axis=0)}
    dpre = gelu_backward(dy2 @ w2.T, gc)
    if want_param_grads:
        grads["w1"] = x2.T @ dpre
        grads["b1"] = dpre.sum(axis=0)
    return (dpre @ w1.T).reshape(dy.shape[:-1] + (w1.shape[0],)), grads


# ---------------------------------------------------------------------------
# Transformer block with optional per-layer prompt injection


def _block_forward(h: np.ndarray, blk: dict[str, np.ndarray], prompt=None):
    """Pre-norm block: h + MSA(LN(h)), then h + MLP(LN(h)).

    ``prompt`` is None or (mode, p). Prefix mode splits p equally into key
    and value rows, leaving the token count unchanged. Prompt-tuning mode
    prepends all p rows to the query/key/value sources; the p rows also
    join the residual stream, so the block output carries L extra rows.
    """
    bsz = h.shape[0]
    u1, ln1c = layer_norm(h, blk["ln1g"], blk["ln1b"])
    n_prompt = 0
    mode = None
    if prompt is not None:
        mode, p = prompt
        pb = np.broadcast_to(p, (bsz,) + p.shape)
        if mode == PREFIX_MODE:
            if p.shape[0] % 2:
                raise ConfigError("prefix prompt row count must be even")
            s = p.shape[0] // 2
            a, msac = msa_forward(u1, np.concatenate([pb[:, :s], u1], axis=1),
                                  np.concatenate([pb[:, s:], u1], axis=1),
                                  blk["wq"], blk["wk"], blk["wv"], blk["wo"])
            h1 = h + a
        elif mode == PROMPT_MODE:
            n_prompt = p.shape[0]
            ext = np.concatenate([pb, u1], axis=1)
            a, msac = msa_forward(ext, ext, ext,
                                  blk["wq"], blk["wk"], blk["wv"], blk["wo"])
            h1 = np.concatenate([pb, h], axis=1) + a
        else:
            raise ConfigError(f"unknown prompt mode {mode!r}")
    else:
        a, msac = msa_forward(u1, u1, u1,
                              blk["wq"], blk["wk"], blk["wv"], blk["wo"])
        h1 = h + a
    u2, ln2c = layer_norm(h1, blk["ln2g"], blk["ln2b"])
    f, mlpc = mlp_forward(u2, blk["w1"], blk["b1"], blk["w2"], blk["b2"])
    h2 = h1 + f
    cache = (ln1c, msac, ln2c, mlpc, mode, n_prompt)
    return h2, cache


def _block_backward(dh2: np.ndarray, cache, blk: dict[str, np.ndarray],
                    prompt_len_prefix: int, want_param_grads: bool,
                    want_prompt_grad: bool):
    """Returns (dh_in, dprompt | None, block param grads | None)."""
    ln1c, msac, ln2c, mlpc, mode, n_prompt = cache
    grads: dict[str, np.ndarray] | None = {} if want_param_grads else None

    du2, mg = mlp_backward(dh2, mlpc, blk["w1"], blk["w2"], want_param_grads)
    dx, dg, db = layer_norm_backward(du2, ln2c, blk["ln2g"])
    dh1 = dh2 + dx
    if want_param_grads:
        grads.update(mg)
        grads["ln2g"] = dg
        grads["ln2b"] = db

    dq, dk, dv, ag = msa_backward(dh1, msac, blk["wq"], blk["wk"],
                                  blk["wv"], blk["wo"], want_param_grads)
    if want_param_grads:
        grads.update(ag)

    dp = None
    if mode is None:
        du1 = dq + dk + dv
        dh = dh1
    elif mode == PREFIX_MODE:
        s = prompt_len_prefix // 2
        du1 = dq + dk[:, s:] + dv[:, s:]
        dh = dh1
        if want_prompt_grad:
            dp = np.concatenate([dk[:, :s].sum(axis=0), dv[:, :s].sum(axis=0)], axis=0)
    else:  # prompt tuning: strip the L prepended rows from every path
        dext = dq + dk + dv
        du1 = dext[:, n_prompt:]
        dh = dh1[:, n_prompt:]
        if want_prompt_grad:
            dp = dext[:, :n_prompt].sum(axis=0) + dh1[:, :n_prompt].sum(axis=0)

    dx1, dg1, db1 = layer_norm_backward(du1, ln1c, blk["ln1g"])
    dh = dh + dx1
    if want_param_grads:
        grads["ln1g"] = dg1
        grads["ln1b"] = db1
    return dh, dp, grads


# ---------------------------------------------------------------------------
# Full model


def patchify(images: np.ndarray, config: BackboneConfig) -> np.ndarray:
    """(B, H, W, C) -> (B, n_patches, P*P*C).

    Patch order is row-major over the patch grid; within a patch, pixels are
    row-major with the channel index varying fastest.
    """
    b = images.shape[0]
    p = config.patch
    gh, gw = config.image_h // p, config.image_w // p
    if images.shape[1:] != (config.image_h, config.image_w, config.channels):
        raise DomainError(
            f"image shape {images.shape[1:]} does not match config "
            f"({config.image_h}, {config.image_w}, {config.channels})")
    x = images.reshape(b, gh, p, gw, p, config.channels)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, config.patch_dim)


def tokens_from_images(images: np.ndarray, params: BackboneParams):
    """Embed a batch of images: Con(cls, proj(patches)) + positional rows."""
    cfg = params.config
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    check_finite(images, "images")
    patches = patchify(images, cfg)
    embedded = (_flat(patches) @ params.tensors["proj"]).reshape(
        patches.shape[0], patches.shape[1], cfg.embed_dim)
    cls_rows = np.broadcast_to(params.tensors["cls"], (images.shape[0], 1, cfg.embed_dim))
    tok = np.concatenate([cls_rows, embedded], axis=1) + params.tensors["pos"]
    return tok, patches


def features_forward(images: np.ndarray, params: BackboneParams,
                     layer_prompts: dict[int, tuple[str, np.ndarray]] | None = None,
                     want_cache: bool = False):
    """Run the full backbone; returns (features (B, D), cache | None).

    ``layer_prompts`` maps block index -> (mode, prompt matrix). In prompt-
    tuning mode each prompted block prepends its rows, shifting the class
    token index; the final feature is always the class-token row after the
    final layer norm.
    """
    tok, patches = tokens_from_images(images, params)
    h = tok
    cls_idx = 0
    block_caches = []
    for i in range(params.config.depth):
        prompt = layer_prompts.get(i) if layer_prompts else None
        h, bc = _block_forward(h, params.block(i), prompt)
        if prompt is not None and prompt[0] == PROMPT_MODE:
            cls_idx += prompt[1].shape[0]
        block_caches.append(bc)
    cls_row = h[:, cls_idx]
    feat, lnfc = layer_norm(cls_row, params.tensors["lnfg"], params.tensors["lnfb"])
    if not want_cache:
        return feat, None
    cache = (patches, block_caches, cls_idx, lnfc, h.shape)
    return feat, cache


def features_backward(dfeat: np.ndarray, cache, params: BackboneParams,
                      layer_prompts: dict[int, tuple[str, np.ndarray]] | None = None,
                      want_param_grads: bool = False,
                      want_prompt_grads: bool = False):
    """Reverse-mode pass matching ``features_forward``.

    Returns (param_grads | None, prompt_grads | None); prompt grads are keyed
    by block index and shaped like the stored prompt matrices.
    """
    patches, block_caches, cls_idx, lnfc, h_shape = cache
    dcls, dlnfg, dlnfb = layer_norm_backward(dfeat, lnfc, params.tensors["lnfg"])
    dh = np.zeros(h_shape)
    dh[:, cls_idx] = dcls

    param_grads: dict[str, np.ndarray] | None = None
    if want_param_grads:
        param_grads = {"lnfg": dlnfg, "lnfb": dlnfb}
    prompt_grads: dict[int, np.ndarray] | None = {} if want_prompt_grads else None

    for i in reversed(range(params.config.depth)):
        prompt = layer_prompts.get(i) if layer_prompts else None
        plen = prompt[1].shape[0] if prompt and prompt[0] == PREFIX_MODE else 0
        dh, dp, bg = _block_backward(dh, block_caches[i], params.block(i), plen,
                                     want_param_grads,
                                     want_prompt_grads and prompt is not None)
        if want_param_grads:
            for name, g in bg.items():
                param_grads[f"b{i}.{name}"] = g
        if want_prompt_grads and dp is not None:
            prompt_grads[i] = dp

    if want_param_grads:
        param_grads["pos"] = dh.sum(axis=0)
        param_grads["cls"] = dh[:, 0].sum(axis=0)
        param_grads["proj"] = _flat(patches).T @ _flat(dh[:, 1:])
    return param_grads, prompt_grads


# ---------------------------------------------------------------------------
# Public single-sample / single-matrix operations


def patch_embed(image: np.ndarray, params: BackboneParams) -> np.ndarray:
    """Embed one H x W x C image into the (N, D) token matrix."""
    tok, _ = tokens_from_images(np.asarray(image, dtype=np.float64)[None], params)
    return tok[0]


def attention_heads(qsrc: np.ndarray, ksrc: np.ndarray, vsrc: np.ndarray,
                    wq, wk, wv) -> list[np.ndarray]:
    """Per-head attention outputs for single (rows, D) sources, pre-concat."""
    m = wq.shape[0]
    d = m * wq.shape[1]
    out, cache = msa_forward(qsrc[None], ksrc[None], vsrc[None],
                             wq, wk, wv, np.eye(d))
    per_head = cache[6] @ cache[5]  # attn @ v
    return [per_head[0, i] for i in range(m)]


def msa(h_in: np.ndarray, params: BackboneParams, block_index: int,
        prompt: tuple[str, np.ndarray] | None = None) -> np.ndarray:
    """Full MSA for one (N, D) matrix, with optional prompt injection."""
    blk = params.block(block_index)
    u = h_in[None]
    if prompt is None:
        out, _ = msa_forward(u, u, u, blk["wq"], blk["wk"], blk["wv"], blk["wo"])
        return out[0]
    mode, p = prompt
    if mode == PREFIX_MODE:
        from .prompts import prefix_tuning_msa
        return prefix_tuning_msa(h_in, h_in, h_in, p, blk)
    from .prompts import prompt_tuning_msa
    return prompt_tuning_msa(h_in, h_in, h_in, p, blk)


def block_forward(h_in: np.ndarray, params: BackboneParams, block_index: int,
                  prompt: tuple[str, np.ndarray] | None = None) -> np.ndarray:
    """One pre-norm block applied to a single (N, D) matrix."""
    out, _ = _block_forward(h_in[None], params.block(block_index), prompt)
    return out[0]


def extract_feature(image: np.ndarray, params: BackboneParams,
                    layer_prompts: dict[int, tuple[str, np.ndarray]] | None = None
                    ) -> np.ndarray:
    """Class-token feature (D,) for one image, optionally prompted."""
    feat, _ = features_forward(np.asarray(image, dtype=np.float64)[None], params,
                               layer_prompts)
    return feat[0]


# ---------------------------------------------------------------------------
# Pretraining


def pretrain_and_freeze(images: np.ndarray, labels: np.ndarray,
                        config: BackboneConfig, epochs: int, seed: int,
                        learning_rate: float = 1e-3, batch_size: int = 64
                        ) -> tuple[BackboneParams, float]:
    """Supervised pretraining with a throwaway linear head, then freeze.

    Returns the frozen parameters and the final training accuracy of the
    discarded head (0.0 when epochs == 0). The pretraining dataset must be
    class-disjoint from every later incremental task.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise DomainError("pretraining dataset is empty")
    if images.shape[0] != labels.shape[0]:
        raise DomainError("image/label count mismatch")

    params = BackboneParams.init_random(config, seed)
    if epochs == 0:
        params.freeze()
        return params, 0.0

    n_classes = int(labels.max()) + 1
    head_w = np.zeros((n_classes, config.embed_dim))
    head_b = np.zeros(n_classes)
    trainable = dict(params.tensors)
    trainable["head.w"] = head_w
    trainable["head.b"] = head_b
    opt = Adam(trainable, learning_rate=learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([0x9E7A, seed]))

    n = images.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            feat, fcache = features_forward(images[idx], params, want_cache=True)
            logits = feat @ head_w.T + head_b
            loss, dlogits = cross_entropy_batch(logits, labels[idx])
            total_loss += loss * len(idx)
            grads = {"head.w": dlogits.T @ feat, "head.b": dlogits.sum(axis=0)}
            dfeat = dlogits @ head_w
            pg, _ = features_backward(dfeat, fcache, params, want_param_grads=True)
            grads.update(pg)
            opt.step(trainable, grads)
        log.info("pretrain epoch=%d mean_loss=%.4f", epoch, total_loss / n)

    correct = 0
    for start in range(0, n, 256):
        feat, _ = features_forward(images[start:start + 256], params)
        pred = np.argmax(feat @ head_w.T + head_b, axis=1)
        correct += int((pred == labels[start:start + 256]).sum())
    train_acc = correct / n
    checksum = params.freeze()
    log.info("pretrain done: head train accuracy=%.4f checksum=%s",
             train_acc, checksum[:16])
    return params, train_acc


# ---------------------------------------------------------------------------
# Checkpoint I/O
#
# Layout: magic "PPVT" | u32 version | u32 fields H, W, C, P, D, m, depth,
# mlp_hidden, frozen | parameter blocks as little-endian float64 in the
# documented tensor order | u64 checksum (first 8 bytes of the SHA-256 of
# the parameter bytes, little-endian).


def _config_header(config: BackboneConfig, frozen: bool) -> bytes:
    return struct.pack("<9I", config.image_h, config.image_w, config.channels,
                       config.patch, config.embed_dim, config.heads,
                       config.depth, config.mlp_hidden, int(frozen))


def save_backbone(params: BackboneParams, path) -> None:
    payload = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes()
                       for t in params.tensors.values())
    digest = hashlib.sha256(payload).digest()[:8]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(_config_header(params.config, params.frozen))
        fh.write(payload)
        fh.write(digest)


def load_backbone(path) -> BackboneParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DomainError(f"bad checkpoint magic at offset 0: {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DomainError(f"unsupported checkpoint version {version}")
    fields = struct.unpack_from("<9I", raw, 8)
    h, w, c, p, d, m, depth, mlp_hidden, frozen = fields
    config = BackboneConfig(image_h=h, image_w=w, channels=c, patch=p,
                            embed_dim=d, heads=m, depth=depth,
                            mlp_ratio=mlp_hidden / d)
    template = BackboneParams.init_random(config, 0)
    offset = 8 + 36
    payload_len = sum(t.size for t in template.tensors.values()) * 8
    payload = raw[offset:offset + payload_len]
    if len(payload) != payload_len or len(raw) < offset + payload_len + 8:
        raise DomainError(f"truncated checkpoint at offset {len(raw)}")
    digest = hashlib.sha256(payload).digest()[:8]
    if digest != raw[offset + payload_len:offset + payload_len + 8]:
        raise DomainError("checkpoint checksum mismatch")
    tensors = {}
    pos = 0
    for name, t in template.tensors.items():
        nbytes = t.size * 8
        tensors[name] = np.frombuffer(payload[pos:pos + nbytes],
                                      dtype="<f8").astype(np.float64).reshape(t.shape)
        pos += nbytes
    out = BackboneParams(config, tensors)
    if frozen:
        out.freeze()
    return out
