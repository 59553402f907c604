"""The conditional noise-prediction network.

A prior encoder turns the interpolated series and the graph into
conditioning features. A stack of noise-estimation blocks consumes the
noisy sample together with those features, each block emitting both the
input of the next block and a skip output; the skip outputs are aggregated
and compressed to one noise estimate per (node, time) entry.

Temporal mixing is bidirectional (or unidirectional, for ablation) Mamba
blocks; spatial mixing is virtual-node attention followed by message
passing, applied per time step.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Context, Module, Parameter, ShapeError, Tensor
from .graph import MpnnLayer, VirtualNodeAttention
from .mamba import MambaBlock, _init_linear


@dataclass(frozen=True)
class ModelConfig:
    """Architecture settings.

    Desk-scale defaults keep the whole benchmark suite fast on one CPU; the
    reference full-scale configuration (channels=64, 4 layers, 8 heads,
    state_dim=16, virtual_nodes=16+) is reachable through the same fields.
    """

    nodes: int = 8
    seq_len: int = 24
    channels: int = 16
    nem_layers: int = 2
    heads: int = 4
    virtual_nodes: int = 4
    expansion: int = 2
    conv_width: int = 4
    state_dim: int = 16
    dropout: float = 0.1
    diffusion_steps: int = 50
    mode: str = "bi"

    def __post_init__(self):
        for name in ("nodes", "seq_len", "channels", "nem_layers", "heads",
                     "virtual_nodes", "expansion", "conv_width", "state_dim",
                     "diffusion_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.mode not in ("uni", "bi"):
            raise ValueError(f"mode must be 'uni' or 'bi', got {self.mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def config_hash(self) -> bytes:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).digest()


@dataclass
class ConditioningBundle:
    """Everything the reverse chain conditions on besides the noisy sample."""

    x_interp: np.ndarray       # [B, N, L], gap-free interpolated series
    adjacency_norm: np.ndarray  # [N, N]
    t: np.ndarray | int | None = None   # diffusion step(s) for this call
    t_emb: np.ndarray | None = None     # optional precomputed sinusoid rows


def sinusoidal_step_embedding(t, dim: int) -> np.ndarray:
    """Sin/cos features of the diffusion step over geometric frequencies.

    dim must be even; frequency i is 10000^(-2i/dim), so dim=2 yields the
    plain (sin t, cos t) pair. Deterministic in t.
    """
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = 10000.0 ** (-(2.0 * np.arange(half) / dim))
    angles = t_arr[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


class Mlp(Module):
    """Two affine layers with a silu between them."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int,
                 rng: np.random.Generator, zero_last: bool = False):
        self.w1 = Parameter(_init_linear(rng, d_in, d_hidden))
        self.b1 = Parameter(np.zeros(d_hidden))
        if zero_last:
            self.w2 = Parameter(np.zeros((d_hidden, d_out)))
        else:
            self.w2 = Parameter(_init_linear(rng, d_hidden, d_out))
        self.b2 = Parameter(np.zeros(d_out))

    def forward(self, ctx: Context, x: Tensor) -> Tensor:
        h = ad.silu(ad.linear(x, ctx.p(self.w1), ctx.p(self.b1)))
        return ad.linear(h, ctx.p(self.w2), ctx.p(self.b2))


class PriorEncoder(Module):
    """Conditioning-feature extractor.

    Projects the interpolated series to d channels, mixes time with a Mamba
    block, mixes space with virtual-node attention plus message passing, and
    refines with an MLP. Output: [B, N, L, d].
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.channels
        self.input_proj = Parameter(_init_linear(rng, 1, d))
        self.temporal = MambaBlock(
            d, rng, expansion=cfg.expansion, conv_width=cfg.conv_width,
            state_dim=cfg.state_dim, dropout=cfg.dropout,
            bidirectional=cfg.mode == "bi")
        self.attention = VirtualNodeAttention(d, cfg.nodes, cfg.virtual_nodes,
                                              cfg.heads, rng)
        self.mpnn = MpnnLayer(d, rng)
        self.refine = Mlp(d, d, d, rng)

    def forward(self, ctx: Context, x_interp: np.ndarray,
                adjacency_norm: np.ndarray) -> Tensor:
        x = ad.constant(np.asarray(x_interp, dtype=np.float64))
        h = ad.matmul(ad.reshape(x, x.shape + (1,)), ctx.p(self.input_proj))
        h = self.temporal.forward(ctx, h)
        h = self.attention.forward(ctx, h)
        h = self.mpnn.forward(ctx, h, adjacency_norm)
        return self.refine.forward(ctx, h)


class NoiseBlock(Module):
    """One layer of the noise-estimation stack.

    Adds the projected step embedding to its input, runs a Mamba block with
    the prior features concatenated, mixes space, then splits a width-2d
    projection into the next-layer state (residual-added to the input) and
    the skip output.
    """

    def __init__(self, cfg: ModelConfig, emb_dim: int, rng: np.random.Generator):
        d = cfg.channels
        self.channels = d
        self.t_proj = Parameter(_init_linear(rng, emb_dim, d))
        self.t_bias = Parameter(np.zeros(d))
        self.temporal = MambaBlock(
            d, rng, expansion=cfg.expansion, conv_width=cfg.conv_width,
            state_dim=cfg.state_dim, dropout=cfg.dropout,
            bidirectional=cfg.mode == "bi", cond_channels=d)
        self.attention = VirtualNodeAttention(d, cfg.nodes, cfg.virtual_nodes,
                                              cfg.heads, rng)
        self.mpnn = MpnnLayer(d, rng)
        # Zero init: the block starts as an identity pass-through with a
        # zero skip output.
        self.split_proj = Parameter(np.zeros((d, 2 * d)))
        self.split_bias = Parameter(np.zeros(2 * d))

    def forward(self, ctx: Context, h_in: Tensor, prior: Tensor,
                adjacency_norm: np.ndarray, t_emb: Tensor):
        d = self.channels
        step = ad.linear(t_emb, ctx.p(self.t_proj), ctx.p(self.t_bias))
        step = ad.reshape(step, (step.shape[0], 1, 1, d))
        h = ad.add(h_in, step)
        h = self.temporal.forward(ctx, h, cond=prior)
        h = self.attention.forward(ctx, h)
        h = self.mpnn.forward(ctx, h, adjacency_norm)
        both = ad.linear(h, ctx.p(self.split_proj), ctx.p(self.split_bias))
        h_next = ad.add(h_in, ad.slice_axis(both, -1, 0, d))
        h_out = ad.slice_axis(both, -1, d, 2 * d)
        return h_next, h_out


class NoisePredictor(Module):
    """The learned reverse-process noise estimate eps_hat(x_t, conditioning, t).

    Input channels per (node, time) entry: the noisy sample, the
    interpolated series, and the conditioning-mask indicator. The indicator
    is required for the network to tell real observations apart from
    interpolated stand-ins.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        d = cfg.channels
        self.emb_dim = 2 * d
        # Constant sinusoid table, one row per diffusion step (1-indexed).
        self._emb_table = sinusoidal_step_embedding(
            np.arange(1, cfg.diffusion_steps + 1), self.emb_dim)
        self.emb_mlp = Mlp(self.emb_dim, self.emb_dim, self.emb_dim, rng)
        self.input_proj = Parameter(_init_linear(rng, 3, d))
        self.prior_encoder = PriorEncoder(cfg, rng)
        self.blocks = [NoiseBlock(cfg, self.emb_dim, rng)
                       for _ in range(cfg.nem_layers)]
        self.head = Mlp(d, d, 1, rng, zero_last=True)

    def step_embedding(self, ctx: Context, t: np.ndarray) -> Tensor:
        """Embed per-sample diffusion steps: [B] -> [B, emb_dim]."""
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.cfg.diffusion_steps):
            raise ValueError(f"diffusion step outside [1, {self.cfg.diffusion_steps}]")
        rows = ad.embedding_lookup(ad.constant(self._emb_table), t - 1)
        return self.emb_mlp.forward(ctx, rows)

    def encode_prior(self, ctx: Context, x_interp: np.ndarray,
                     adjacency_norm: np.ndarray) -> Tensor:
        return self.prior_encoder.forward(ctx, x_interp, adjacency_norm)

    def predict_noise(self, ctx: Context, x_noisy: np.ndarray,
                      bundle: ConditioningBundle, cond_mask: np.ndarray,
                      prior: Tensor | None = None) -> Tensor:
        """eps_hat for a batch: arrays are [B, N, L], steps are [B] ints."""
        cfg = self.cfg
        x_noisy = np.asarray(x_noisy, dtype=np.float64)
        if x_noisy.ndim != 3:
            raise ShapeError(f"expected [batch, nodes, time], got {x_noisy.shape}")
        b, n, length = x_noisy.shape
        if n != cfg.nodes:
            raise ShapeError(f"model built for {cfg.nodes} nodes, got {n}")
        t = np.atleast_1d(np.asarray(bundle.t))
        if t.shape == (1,) and b > 1:
            t = np.full(b, t[0])

        stacked = np.stack(
            [x_noisy, np.asarray(bundle.x_interp, dtype=np.float64),
             np.asarray(cond_mask, dtype=np.float64)], axis=-1)
        h = ad.silu(ad.matmul(ad.constant(stacked), ctx.p(self.input_proj)))

        if prior is None:
            prior = self.encode_prior(ctx, bundle.x_interp, bundle.adjacency_norm)
        t_emb = self.step_embedding(ctx, t)

        skips = None
        for block in self.blocks:
            h, out = block.forward(ctx, h, prior, bundle.adjacency_norm, t_emb)
            skips = out if skips is None else ad.add(skips, out)
        skips = ad.mul(skips, 1.0 / np.sqrt(len(self.blocks)))
        eps = self.head.forward(ctx, skips)
        return ad.reshape(eps, (b, n, length))
