"""Per-pixel mask-deviation network with a graph self-attention stage.

Maps a coding mask to a strictly positive map ``g`` of the same shape,
read as the standard deviation of each mask pixel's fabrication error.
Pipeline: two 3x3 conv+relu stages embed the mask; two 1x1 projections
form an all-pairs pixel affinity E = H1^T H2 / C'; a one-hop graph pass
over E with the raw mask as node features gates the embedding
(attention = sigmoid(E m W) + 1, kept >= 1 so gating never suppresses a
pixel below its embedding); a final 1x1 conv plus softplus yields g > 0.

The affinity matrix is N x N for N mask pixels, so inputs are capped at
N <= 4096 (64 x 64); larger masks should be processed as crops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ndgrad import (
    ShapeError,
    Tensor,
    add,
    conv2d,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    softplus,
    transpose,
    xavier_uniform,
)

__all__ = ["GstParams", "ResourceLimitError", "N_LIMIT", "gst_init", "gst_forward"]

N_LIMIT = 4096


class ResourceLimitError(RuntimeError):
    """Input would allocate an affinity matrix beyond the supported size."""


@dataclass
class GstParams:
    """Learnable tensors of the deviation network, in forward order."""

    embed1_w: Tensor
    embed1_b: Tensor
    embed2_w: Tensor
    embed2_b: Tensor
    proj1_w: Tensor
    proj1_b: Tensor
    proj2_w: Tensor
    proj2_b: Tensor
    gcn_w: Tensor
    out_w: Tensor
    out_b: Tensor

    def parameters(self):
        """(name, tensor) pairs in a fixed order."""
        return [
            ("embed1_w", self.embed1_w),
            ("embed1_b", self.embed1_b),
            ("embed2_w", self.embed2_w),
            ("embed2_b", self.embed2_b),
            ("proj1_w", self.proj1_w),
            ("proj1_b", self.proj1_b),
            ("proj2_w", self.proj2_w),
            ("proj2_b", self.proj2_b),
            ("gcn_w", self.gcn_w),
            ("out_w", self.out_w),
            ("out_b", self.out_b),
        ]

    def param_count(self):
        return sum(t.data.size for _, t in self.parameters())

    @property
    def channels(self):
        return self.embed1_w.data.shape[0]

    @property
    def proj_channels(self):
        return self.proj1_w.data.shape[0]


def gst_init(channels=8, proj_channels=4, rng=None, embed_kernel=3):
    """Xavier-uniform weights (gain 1), zero biases."""
    if rng is None:
        raise ValueError("gst_init requires an rng")
    if channels < 1 or proj_channels < 1:
        raise ValueError("channel counts must be >= 1")
    if embed_kernel % 2 == 0:
        raise ValueError(f"embed kernel must be odd, got {embed_kernel}")
    c, cp, k = channels, proj_channels, embed_kernel

    def conv_w(cout, cin, kk):
        return Tensor(
            xavier_uniform(rng, (cout, cin, kk, kk), cin * kk * kk, cout * kk * kk)
        )

    return GstParams(
        embed1_w=conv_w(c, 1, k),
        embed1_b=Tensor(np.zeros(c)),
        embed2_w=conv_w(c, c, k),
        embed2_b=Tensor(np.zeros(c)),
        proj1_w=conv_w(cp, c, 1),
        proj1_b=Tensor(np.zeros(cp)),
        proj2_w=conv_w(cp, c, 1),
        proj2_b=Tensor(np.zeros(cp)),
        gcn_w=Tensor(xavier_uniform(rng, (1, c), 1, c)),
        out_w=conv_w(1, c, 1),
        out_b=Tensor(np.zeros(1)),
    )


def gst_forward(m, params):
    """Mask (H x W array) -> per-pixel deviation map g (H x W Tensor, g > 0).

    With all parameters zero the output is softplus(0) = ln 2 everywhere.
    """
    mv = m.values if hasattr(m, "values") else np.asarray(m, dtype=np.float64)
    if mv.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mv.shape}")
    h, w = mv.shape
    n = h * w
    if n > N_LIMIT:
        raise ResourceLimitError(
            f"mask has {n} pixels; the all-pairs affinity supports at most "
            f"{N_LIMIT} (e.g. 64x64). Process larger masks as crops."
        )
    c = params.channels
    cp = params.proj_channels

    x = Tensor(mv[None, :, :])
    h0 = relu(conv2d(x, params.embed1_w, params.embed1_b))
    h0 = relu(conv2d(h0, params.embed2_w, params.embed2_b))

    h1 = conv2d(h0, params.proj1_w, params.proj1_b)
    h2 = conv2d(h0, params.proj2_w, params.proj2_b)
    h1f = reshape(h1, (cp, n))
    h2f = reshape(h2, (cp, n))
    affinity = mul(matmul(transpose(h1f), h2f), 1.0 / cp)

    nodes = Tensor(mv.reshape(n, 1))
    gate = sigmoid(matmul(matmul(affinity, nodes), params.gcn_w))
    att = add(gate, 1.0)
    att_chw = reshape(transpose(att), (c, h, w))

    gated = mul(h0, att_chw)
    z = conv2d(gated, params.out_w, params.out_b)
    return softplus(reshape(z, (h, w)))
