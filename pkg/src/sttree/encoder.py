"""Time patch encoder: partition into patches, windowed self-attention with
a shifted second pass, post-norm MLP, and a pooled logits head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionParams, attention_apply
from .params import ParamStore
from .tensor import Tensor, TensorError


class PartitionError(TensorError):
    """Series length not divisible by the patch width 4n."""


@dataclass
class EncoderConfig:
    num_channels: int
    num_classes: int
    partition_factor: int = 1
    embed_dim: int = 64
    window_size: int = 4
    mlp_hidden: int = 128
    attention_kernel: int = 3
    num_layers: int = 1
    use_attention: bool = True

    @property
    def patch_width(self) -> int:
        return 4 * self.partition_factor

    def validate(self) -> None:
        for name in ("num_channels", "num_classes", "partition_factor", "embed_dim",
                     "window_size", "mlp_hidden", "num_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"encoder {name} must be >= 1")
        if self.attention_kernel < 1 or self.attention_kernel % 2 == 0:
            raise ValueError("attention_kernel must be odd and positive")


@dataclass
class BlockParams:
    attn_q: AttentionParams | None
    attn_k: AttentionParams | None
    attn_v: AttentionParams | None
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class EncoderParams:
    patch_w: Tensor  # (4nC, D)
    patch_b: Tensor  # (D,)
    blocks: list[BlockParams]  # alternating plain / shifted passes
    head_w: Tensor  # (D, M)
    head_b: Tensor  # (M,)

    @classmethod
    def create(cls, store: ParamStore, cfg: EncoderConfig, prefix: str = "encoder") -> "EncoderParams":
        cfg.validate()
        d, h = cfg.embed_dim, cfg.mlp_hidden
        raw = cfg.patch_width * cfg.num_channels
        blocks = []
        for i in range(2 * cfg.num_layers):
            p = f"{prefix}.block{i}"
            attn = [
                AttentionParams.create(store, f"{p}.attn_{s}", cfg.attention_kernel)
                if cfg.use_attention else None
                for s in "qkv"
            ]
            blocks.append(BlockParams(
                *attn,
                store.fan_in(f"{p}.wq", (d, d), d), store.fan_in(f"{p}.bq", (d,), d),
                store.fan_in(f"{p}.wk", (d, d), d), store.fan_in(f"{p}.bk", (d,), d),
                store.fan_in(f"{p}.wv", (d, d), d), store.fan_in(f"{p}.bv", (d,), d),
                store.constant(f"{p}.ln1_gain", (d,), 1.0), store.constant(f"{p}.ln1_bias", (d,), 0.0),
                store.fan_in(f"{p}.mlp_w1", (d, h), d), store.fan_in(f"{p}.mlp_b1", (h,), d),
                store.fan_in(f"{p}.mlp_w2", (h, d), h), store.fan_in(f"{p}.mlp_b2", (d,), h),
                store.constant(f"{p}.ln2_gain", (d,), 1.0), store.constant(f"{p}.ln2_bias", (d,), 0.0),
            ))
        return cls(
            patch_w=store.fan_in(f"{prefix}.patch_embed.weight", (raw, d), raw),
            patch_b=store.fan_in(f"{prefix}.patch_embed.bias", (d,), raw),
            blocks=blocks,
            head_w=store.fan_in(f"{prefix}.logits_head.weight", (d, cfg.num_classes), d),
            head_b=store.fan_in(f"{prefix}.logits_head.bias", (cfg.num_classes,), d),
        )


@dataclass
class EncoderOutput:
    patches: Tensor  # (B, P, D)
    logits: Tensor  # (B, M)


def time_partition(x: Tensor, partition_factor: int = 1) -> Tensor:
    """(B, C, T) -> (B, T/4n, 4n*C); feature ``k*C + c`` of patch ``p`` is x[b, c, 4n*p + k]."""
    b, c, length = x.shape
    w = 4 * partition_factor
    if length % w:
        raise PartitionError(f"series length {length} is not divisible by {w}")
    return T.reshape(T.transpose(x, (0, 2, 1)), (b, length // w, w * c))


def time_unpartition(patches: np.ndarray, num_channels: int) -> np.ndarray:
    """Inverse index map of :func:`time_partition` on raw arrays."""
    b, p, width = patches.shape
    w = width // num_channels
    return patches.reshape(b, p * w, num_channels).transpose(0, 2, 1)


def shift_indices(num_patches: int, shift: int) -> np.ndarray:
    """Position ``i`` after shifting holds patch ``(i + shift) % P``."""
    return (np.arange(num_patches) + shift) % num_patches


def _attend(g: Tensor, blk: BlockParams) -> Tensor:
    """Dense attention inside windows. g: (N, w, D) -> (N, w, D)."""
    d = g.shape[-1]

    def refine(params):
        if params is None:
            return g
        return T.transpose(attention_apply(T.transpose(g, (0, 2, 1)), params), (0, 2, 1))

    q = T.linear(refine(blk.attn_q), blk.wq, blk.bq)
    k = T.linear(refine(blk.attn_k), blk.wk, blk.bk)
    v = T.linear(refine(blk.attn_v), blk.wv, blk.bv)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
    return T.matmul(T.softmax(scores, axis=-1), v)


def window_self_attention(h: Tensor, blk: BlockParams, window_size: int, shift: bool) -> Tensor:
    """One attention block over non-overlapping windows of ``window_size`` patches.

    With ``shift`` the patch axis is rotated left by ``window_size // 2``
    before grouping and rotated back afterwards. A short trailing window is
    attended on its own.
    """
    b, p, d = h.shape
    s = window_size // 2 if shift else 0
    x = T.roll(h, -s, axis=1) if s else h
    w = min(window_size, p)
    nfull, rem = divmod(p, w)
    parts = []
    if nfull:
        body = x if not rem else T.getitem(x, (slice(None), slice(0, nfull * w)))
        out = _attend(T.reshape(body, (b * nfull, w, d)), blk)
        parts.append(T.reshape(out, (b, nfull * w, d)))
    if rem:
        parts.append(_attend(T.getitem(x, (slice(None), slice(nfull * w, p))), blk))
    attn = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
    y = T.layer_norm(T.add(x, attn), blk.ln1_gain, blk.ln1_bias)
    mlp = T.linear(T.relu(T.linear(y, blk.mlp_w1, blk.mlp_b1)), blk.mlp_w2, blk.mlp_b2)
    y = T.layer_norm(T.add(y, mlp), blk.ln2_gain, blk.ln2_bias)
    return T.roll(y, s, axis=1) if s else y


def encoder_forward(x: Tensor, params: EncoderParams, cfg: EncoderConfig) -> EncoderOutput:
    h = T.linear(time_partition(x, cfg.partition_factor), params.patch_w, params.patch_b)
    for i, blk in enumerate(params.blocks):
        h = window_self_attention(h, blk, cfg.window_size, shift=bool(i % 2))
    logits = T.linear(T.mean(h, axis=1), params.head_w, params.head_b)
    return EncoderOutput(h, logits)
