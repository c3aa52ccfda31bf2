"""Channel + spatial attention gate used for Q/K/V refinement and tree edges.

Inputs are laid out ``(B, C, L)``. The channel gate pools over ``L`` and
convolves the 2-row ``[avg; max]`` descriptor along ``C``; the spatial gate
pools over ``C`` and convolves along ``L``. Both kernels are ``(1, 2, a)``
with zero same-padding.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .params import ParamStore
from .tensor import Tensor


@dataclass
class AttentionParams:
    channel_kernel: Tensor  # (1, 2, a)
    spatial_kernel: Tensor  # (1, 2, a)

    @property
    def kernel_size(self) -> int:
        return self.channel_kernel.shape[2]

    @classmethod
    def create(cls, store: ParamStore, prefix: str, kernel_size: int = 3) -> "AttentionParams":
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"attention kernel size must be odd and positive, got {kernel_size}")
        fan = 2 * kernel_size
        return cls(
            store.fan_in(f"{prefix}.channel_kernel", (1, 2, kernel_size), fan),
            store.fan_in(f"{prefix}.spatial_kernel", (1, 2, kernel_size), fan),
        )


def channel_attention(q: Tensor, params: AttentionParams) -> Tensor:
    """(B, C, L) -> (B, C, 1) gate in (0, 1)."""
    b, c, _ = q.shape
    desc = T.concat([T.avgpool1d(q, "global"), T.maxpool1d(q, "global")], axis=2)  # (B, C, 2)
    desc = T.transpose(desc, (0, 2, 1))  # (B, 2, C)
    gate = T.sigmoid(T.conv1d(desc, params.channel_kernel, padding="same"))  # (B, 1, C)
    return T.reshape(gate, (b, c, 1))


def spatial_attention(q: Tensor, params: AttentionParams) -> Tensor:
    """(B, C, L) -> (B, 1, L) gate in (0, 1)."""
    desc = T.concat([T.mean(q, axis=1, keepdims=True), T.max_(q, axis=1, keepdims=True)], axis=1)
    return T.sigmoid(T.conv1d(desc, params.spatial_kernel, padding="same"))


def attention_apply(z: Tensor, params: AttentionParams | None) -> Tensor:
    """Gate ``z`` by its channel map, then by the spatial map of the gated result.

    ``params=None`` is the identity (attention ablated).
    """
    if params is None:
        return z
    q = T.mul(z, channel_attention(z, params))
    return T.mul(q, spatial_attention(q, params))
