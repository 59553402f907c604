"""Spatial mixing across sensor nodes.

Adjacency comes from a thresholded Gaussian kernel on node coordinates and
stays constant over time. Two learned layers consume it: a one-hop
message-passing layer over the symmetrically normalized adjacency, and a
node-axis attention layer that pools the N real nodes into k virtual tokens
before attending, which keeps attention cost independent of N. Both operate
per time step; temporal mixing lives entirely in the Mamba blocks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Context, Module, Parameter, ShapeError, Tensor


class AdjacencyError(ValueError):
    pass


@dataclass(frozen=True)
class GraphSpec:
    """Static sensor graph: coordinates, kernel weights, normalized weights."""

    n_nodes: int
    coords: np.ndarray = field(repr=False)      # [N, 2]
    adjacency: np.ndarray = field(repr=False)   # [N, N], zero diagonal
    adjacency_norm: np.ndarray = field(repr=False)  # D^-1/2 (A + I) D^-1/2


def build_adjacency(coords: np.ndarray, length_scale: float,
                    threshold: float) -> GraphSpec:
    """Gaussian-kernel adjacency on pairwise distances, thresholded.

    w_ij = exp(-dist_ij^2 / length_scale^2) when strictly above
    ``threshold``, else 0. The diagonal is zeroed and the normalized form
    adds self-loops before the symmetric degree normalization.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if n < 2:
        raise AdjacencyError(f"need at least 2 nodes, got {n}")
    if length_scale <= 0:
        raise AdjacencyError(f"length_scale must be positive, got {length_scale}")
    diff = coords[:, None, :] - coords[None, :, :]
    dist_sq = (diff ** 2).sum(axis=-1)
    weights = np.exp(-dist_sq / length_scale ** 2)
    weights[weights <= threshold] = 0.0
    np.fill_diagonal(weights, 0.0)
    if not weights.any():
        raise AdjacencyError(
            "thresholding removed every edge; lower the threshold "
            f"(threshold={threshold}, max kernel weight was below it)")
    with_loops = weights + np.eye(n)
    inv_sqrt_deg = 1.0 / np.sqrt(with_loops.sum(axis=1))
    norm = with_loops * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]
    return GraphSpec(n_nodes=n, coords=coords, adjacency=weights,
                     adjacency_norm=norm)


def _node_mix(h: Tensor, matrix: Tensor) -> Tensor:
    """Left-multiply the node axis of [B, N, L, d] by ``matrix`` [M, N]."""
    ht = ad.transpose(h, (0, 2, 1, 3))           # [B, L, N, d]
    mixed = ad.matmul(matrix, ht)                # [B, L, M, d]
    return ad.transpose(mixed, (0, 2, 1, 3))     # [B, M, L, d]


class MpnnLayer(Module):
    """One-hop gated message passing: silu(A_hat H W1 + H W2) + H.

    Permutation-equivariant by construction: conjugating the adjacency and
    permuting the nodes of H permutes the output identically.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        scale = 1.0 / np.sqrt(channels)
        self.w_neighbor = Parameter(rng.normal(0.0, scale, (channels, channels)))
        self.w_self = Parameter(rng.normal(0.0, scale, (channels, channels)))

    def forward(self, ctx: Context, h: Tensor, adjacency_norm: np.ndarray) -> Tensor:
        adj = ad.constant(adjacency_norm)
        if adj.shape != (h.shape[1], h.shape[1]):
            raise ShapeError(f"mpnn: adjacency {adj.shape} does not match "
                             f"{h.shape[1]} nodes")
        neighbors = ad.matmul(_node_mix(h, adj), ctx.p(self.w_neighbor))
        own = ad.matmul(h, ctx.p(self.w_self))
        return ad.add(ad.silu(ad.add(neighbors, own)), h)


class VirtualNodeAttention(Module):
    """Node-axis multi-head attention through k virtual tokens.

    Real nodes are pooled into k tokens by a row-stochastic matrix (softmax
    over learned per-virtual-node scores), the tokens attend to each other
    with scaled dot-product attention, and a second row-stochastic matrix
    expands the k attended summaries back to the N nodes, added residually.
    """

    def __init__(self, channels: int, n_nodes: int, virtual_nodes: int,
                 heads: int, rng: np.random.Generator):
        if virtual_nodes > n_nodes:
            raise ValueError(f"virtual nodes ({virtual_nodes}) cannot exceed "
                             f"real nodes ({n_nodes})")
        if virtual_nodes < 1:
            raise ValueError("need at least one virtual node")
        if channels % heads != 0:
            raise ValueError(f"channels ({channels}) must divide evenly into "
                             f"{heads} heads")
        self.channels = channels
        self.heads = heads
        self.virtual_nodes = virtual_nodes
        scale = 1.0 / np.sqrt(channels)
        self.compress_scores = Parameter(
            rng.normal(0.0, 1.0, (virtual_nodes, n_nodes)))
        self.expand_scores = Parameter(
            rng.normal(0.0, 1.0, (n_nodes, virtual_nodes)))
        self.w_q = Parameter(rng.normal(0.0, scale, (channels, channels)))
        self.w_k = Parameter(rng.normal(0.0, scale, (channels, channels)))
        self.w_v = Parameter(rng.normal(0.0, scale, (channels, channels)))
        self.w_out = Parameter(rng.normal(0.0, scale, (channels, channels)))

    def _attend(self, ctx: Context, tokens: Tensor) -> Tensor:
        """Scaled dot-product attention among the k tokens: [B, L, k, d]."""
        b, length, k, d = tokens.shape
        nh = self.heads
        hd = d // nh

        def split_heads(t: Tensor) -> Tensor:
            t = ad.reshape(t, (b, length, k, nh, hd))
            return ad.transpose(t, (0, 1, 3, 2, 4))   # [B, L, h, k, hd]

        q = split_heads(ad.matmul(tokens, ctx.p(self.w_q)))
        key = split_heads(ad.matmul(tokens, ctx.p(self.w_k)))
        v = split_heads(ad.matmul(tokens, ctx.p(self.w_v)))
        scores = ad.mul(ad.matmul(q, ad.transpose(key, (0, 1, 2, 4, 3))),
                        1.0 / np.sqrt(hd))
        weights = ad.softmax(scores, axis=-1)         # rows sum to 1
        mixed = ad.matmul(weights, v)                 # [B, L, h, k, hd]
        mixed = ad.transpose(mixed, (0, 1, 3, 2, 4))
        mixed = ad.reshape(mixed, (b, length, k, d))
        return ad.matmul(mixed, ctx.p(self.w_out))

    def apply_with_pooling(self, ctx: Context, h: Tensor, pool_in: Tensor,
                           pool_out: Tensor) -> Tensor:
        """Attention with explicit pooling matrices (rows over real nodes)."""
        ht = ad.transpose(h, (0, 2, 1, 3))            # [B, L, N, d]
        tokens = ad.matmul(pool_in, ht)               # [B, L, k, d]
        attended = self._attend(ctx, tokens)
        up = ad.matmul(pool_out, attended)            # [B, L, N, d]
        return ad.add(h, ad.transpose(up, (0, 2, 1, 3)))

    def forward(self, ctx: Context, h: Tensor) -> Tensor:
        if h.shape[-1] != self.channels:
            raise ShapeError(f"attention: expected {self.channels} channels, "
                             f"got {h.shape[-1]}")
        pool_in = ad.softmax(ctx.p(self.compress_scores), axis=-1)
        pool_out = ad.softmax(ctx.p(self.expand_scores), axis=-1)
        return self.apply_with_pooling(ctx, h, pool_in, pool_out)
