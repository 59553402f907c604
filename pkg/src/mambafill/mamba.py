"""Gated selective-SSM sequence blocks, unidirectional and bidirectional.

The block widens its input into two channels: one runs a causal depthwise
convolution followed by a selective scan (twice for the bidirectional
variant, once over the sequence and once over its time reversal), the other
becomes a multiplicative gate. Directional outputs are averaged before
gating so that a length-1 sequence behaves identically in both variants and
tied directional parameters keep the forward/backward symmetry exact.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Context, Module, Parameter, ShapeError, Tensor
from .ssm import SelectiveSsm, selective_scan


def _init_linear(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_out))


class MambaBlock(Module):
    """Residual gated block operating on [B, N, L, d] along the time axis L.

    ``cond_channels`` > 0 enables the conditioning path: a feature tensor of
    that width is concatenated on the channel axis before the first layer
    norm, and the input projection absorbs the widened input. The residual
    connection always adds the un-concatenated block input.
    """

    def __init__(self, channels: int, rng: np.random.Generator, *,
                 expansion: int = 2, conv_width: int = 4, state_dim: int = 16,
                 dropout: float = 0.1, bidirectional: bool = True,
                 cond_channels: int = 0, parallel_scan: bool = True):
        d = channels
        inner = expansion * d
        d_in = d + cond_channels
        self.channels = d
        self.inner = inner
        self.cond_channels = cond_channels
        self.dropout = dropout
        self.bidirectional = bidirectional
        self.parallel_scan = parallel_scan

        self.ln_in_gain = Parameter(np.ones(d_in))
        self.ln_in_bias = Parameter(np.zeros(d_in))
        self.in_proj = Parameter(_init_linear(rng, d_in, 2 * inner))
        self.conv_fwd = Parameter(rng.normal(0.0, 1.0 / np.sqrt(conv_width), (conv_width, inner)))
        self.ssm_fwd = SelectiveSsm(inner, state_dim, rng)
        if bidirectional:
            self.conv_bwd = Parameter(
                rng.normal(0.0, 1.0 / np.sqrt(conv_width), (conv_width, inner)))
            self.ssm_bwd = SelectiveSsm(inner, state_dim, rng)
        # Zero init keeps the residual path exact at initialization.
        self.out_proj = Parameter(np.zeros((inner, d)))
        self.ln_out_gain = Parameter(np.ones(d))
        self.ln_out_bias = Parameter(np.zeros(d))

    def _directional(self, ctx: Context, path: Tensor, conv: Parameter,
                     ssm: SelectiveSsm, reverse: bool) -> Tensor:
        z = ad.flip(path, axis=-2) if reverse else path
        z = ad.depthwise_conv1d(z, ctx.p(conv))
        z = ad.silu(z)
        y = selective_scan(ctx, z, ssm, parallel=self.parallel_scan)
        return ad.flip(y, axis=-2) if reverse else y

    def forward(self, ctx: Context, x: Tensor, cond: Tensor | None = None) -> Tensor:
        x = ad.constant(x)
        if x.shape[-1] != self.channels:
            raise ShapeError(f"mamba block: expected {self.channels} channels, "
                             f"got {x.shape[-1]}")
        if self.cond_channels:
            if cond is None or cond.shape[-1] != self.cond_channels:
                got = None if cond is None else cond.shape
                raise ShapeError(f"mamba block: conditioning features of width "
                                 f"{self.cond_channels} required, got {got}")
            h = ad.concat([x, cond], axis=-1)
        else:
            if cond is not None:
                raise ShapeError("mamba block: unexpected conditioning features")
            h = x
        h = ad.layer_norm(h, ctx.p(self.ln_in_gain), ctx.p(self.ln_in_bias))
        h = ad.dropout(h, self.dropout, ctx.rng, ctx.train)
        h = ad.matmul(h, ctx.p(self.in_proj))
        path = ad.slice_axis(h, -1, 0, self.inner)
        gate = ad.slice_axis(h, -1, self.inner, 2 * self.inner)

        y = self._directional(ctx, path, self.conv_fwd, self.ssm_fwd, reverse=False)
        if self.bidirectional:
            yb = self._directional(ctx, path, self.conv_bwd, self.ssm_bwd, reverse=True)
            y = ad.mul(ad.add(y, yb), 0.5)

        out = ad.mul(y, ad.silu(gate))
        out = ad.matmul(out, ctx.p(self.out_proj))
        out = ad.layer_norm(out, ctx.p(self.ln_out_gain), ctx.p(self.ln_out_bias))
        return ad.add(x, out)
