"""Dual-branch context encoder.

The temporal branch self-attends over per-step kinematic features of the ego
history; the social branch runs a stacked, edge-aware graph attention network
over each target's local proximity graph; a sigmoid gate fuses the two into a
single context embedding per agent.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

KINEMATIC_DIM = 6
EDGE_DIM = 6


def sinusoidal_encoding(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Classic fixed sin/cos position table, shape [length, dim]."""
    position = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
    div = torch.exp(
        torch.arange(0, dim, 2, dtype=dtype, device=device) * (-math.log(10000.0) / dim)
    )
    table = torch.zeros(length, dim, dtype=dtype, device=device)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: dim // 2])
    return table


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product self-attention with an output projection."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_attn: bool = False):
        b, t, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        out = self.out(out)
        if return_attn:
            return out, attn
        return out


class TransformerBlock(nn.Module):
    """Pre-norm block: x + SA(LN(x)), then x + FF(LN(x))."""

    def __init__(self, dim: int, heads: int, ff_mult: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_mult * dim), nn.ReLU(), nn.Linear(ff_mult * dim, dim)
        )

    def forward(self, x: torch.Tensor, return_attn: bool = False):
        if return_attn:
            delta, attn = self.attn(self.norm1(x), return_attn=True)
            x = x + delta
            x = x + self.ff(self.norm2(x))
            return x, attn
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))


class TemporalEncoder(nn.Module):
    """Self-attention over the kinematic sequence, mean-pooled over time."""

    def __init__(self, dim: int = 128, heads: int = 8, depth: int = 2, in_dim: int = KINEMATIC_DIM):
        super().__init__()
        self.dim = dim
        self.embed = nn.Linear(in_dim, dim)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads) for _ in range(depth))

    def embed_with_position(self, m: torch.Tensor) -> torch.Tensor:
        pe = sinusoidal_encoding(m.shape[-2], self.dim, dtype=m.dtype, device=m.device)
        return self.embed(m) + pe

    def forward(self, m: torch.Tensor, return_attn: bool = False):
        """m: [B, T, 6] -> pooled embedding [B, dim]."""
        x = self.embed_with_position(m)
        attns = []
        for block in self.blocks:
            if return_attn:
                x, attn = block(x, return_attn=True)
                attns.append(attn)
            else:
                x = block(x)
        pooled = x.mean(dim=-2)
        if return_attn:
            return pooled, attns
        return pooled


class GraphAttentionLayer(nn.Module):
    """Multi-head graph attention with edge features in scoring and messages.

    Per head, the score for node i attending to j is
    LeakyReLU(linear([W h_i, W h_j, e_ij])); messages are W h_j + W_e e_ij.
    Head outputs are concatenated and projected to ``out_dim``.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        heads: int = 8,
        head_dim: int = 16,
        edge_dim: int = EDGE_DIM,
        leaky_slope: float = 0.2,
    ):
        super().__init__()
        self.heads = heads
        self.head_dim = head_dim
        self.leaky_slope = leaky_slope
        self.node_proj = nn.Linear(in_dim, heads * head_dim, bias=False)
        self.edge_proj = nn.Linear(edge_dim, heads * head_dim, bias=False)
        # score = a_src . Wh_i + a_dst . Wh_j + a_edge . e_ij + bias, one per head
        self.a_src = nn.Parameter(torch.empty(heads, head_dim))
        self.a_dst = nn.Parameter(torch.empty(heads, head_dim))
        self.a_edge = nn.Parameter(torch.empty(heads, edge_dim))
        self.score_bias = nn.Parameter(torch.zeros(heads))
        self.out_proj = nn.Linear(heads * head_dim, out_dim)
        for p in (self.a_src, self.a_dst, self.a_edge):
            nn.init.xavier_uniform_(p)

    def forward(
        self,
        x: torch.Tensor,
        edge_feats: torch.Tensor,
        adj: torch.Tensor,
        return_attn: bool = False,
    ):
        """x: [B, N, in], edge_feats: [B, N, N, e], adj: [B, N, N] bool.

        The adjacency diagonal must be True (self-loops); rows attend only to
        their True columns.
        """
        b, n, _ = x.shape
        h = self.node_proj(x).view(b, n, self.heads, self.head_dim)
        scores = (
            torch.einsum("bnhd,hd->bhn", h, self.a_src).unsqueeze(-1)
            + torch.einsum("bnhd,hd->bhn", h, self.a_dst).unsqueeze(-2)
            + torch.einsum("bije,he->bhij", edge_feats, self.a_edge)
            + self.score_bias.view(1, self.heads, 1, 1)
        )
        scores = F.leaky_relu(scores, negative_slope=self.leaky_slope)
        scores = scores.masked_fill(~adj.unsqueeze(1), float("-inf"))
        attn = torch.softmax(scores, dim=-1)  # [B, H, N, N], rows sum to 1
        msg = h.permute(0, 2, 1, 3)  # [B, H, N, hd]
        e_msg = self.edge_proj(edge_feats).view(b, n, n, self.heads, self.head_dim)
        out = torch.einsum("bhij,bhjd->bhid", attn, msg)
        out = out + torch.einsum("bhij,bijhd->bhid", attn, e_msg)
        out = out.permute(0, 2, 1, 3).reshape(b, n, self.heads * self.head_dim)
        out = self.out_proj(out)
        if return_attn:
            return out, attn
        return out


class SocialEncoder(nn.Module):
    """Two stacked graph attention layers; returns the target-node embedding."""

    def __init__(self, in_dim: int = 128, out_dim: int = 64, heads: int = 8):
        super().__init__()
        self.layers = nn.ModuleList(
            [
                GraphAttentionLayer(in_dim, out_dim, heads=heads),
                GraphAttentionLayer(out_dim, out_dim, heads=heads),
            ]
        )

    def node_features(self, x, edge_feats, adj, node_mask=None):
        for k, layer in enumerate(self.layers):
            x = layer(x, edge_feats, adj)
            if k < len(self.layers) - 1:
                x = F.elu(x)
            if node_mask is not None:
                x = x * node_mask.unsqueeze(-1).to(x.dtype)
        return x

    def forward(self, x, edge_feats, adj, node_mask=None) -> torch.Tensor:
        """Target node is row 0 of each graph; output [B, out_dim]."""
        return self.node_features(x, edge_feats, adj, node_mask)[:, 0]


class GatedFusion(nn.Module):
    """h = sigmoid(g) * proj(h_tau) + (1 - sigmoid(g)) * proj(h_soc)."""

    def __init__(self, dim: int = 128, soc_dim: int = 64):
        super().__init__()
        self.gate = nn.Linear(dim + soc_dim, dim)
        self.proj_self = nn.Linear(dim, dim)
        self.proj_soc = nn.Linear(soc_dim, dim)

    def forward(self, h_tau: torch.Tensor, h_soc: torch.Tensor) -> torch.Tensor:
        g = torch.sigmoid(self.gate(torch.cat([h_tau, h_soc], dim=-1)))
        return g * self.proj_self(h_tau) + (1.0 - g) * self.proj_soc(h_soc)


class ContextEncoder(nn.Module):
    """Full encoder: kinematics + local graph -> context embedding per target."""

    def __init__(self, dim: int = 128, soc_dim: int = 64, heads: int = 8):
        super().__init__()
        self.dim = dim
        self.soc_dim = soc_dim
        self.temporal = TemporalEncoder(dim=dim, heads=heads)
        self.social = SocialEncoder(in_dim=dim, out_dim=soc_dim, heads=heads)
        self.fusion = GatedFusion(dim=dim, soc_dim=soc_dim)

    def forward(
        self,
        node_kinematics: torch.Tensor,
        edge_feats: torch.Tensor,
        adj: torch.Tensor,
        node_mask: torch.Tensor,
    ) -> torch.Tensor:
        """node_kinematics: [B, N, T, 6] padded per-graph node histories.

        Row 0 of every graph is the target. Padded nodes (node_mask False)
        must still carry a True adjacency diagonal; they are excluded from all
        real nodes' neighborhoods and zeroed between layers.
        """
        b, n, t, f = node_kinematics.shape
        flat_mask = node_mask.reshape(-1)
        h_tau_nodes = node_kinematics.new_zeros((b * n, self.dim))
        h_tau_nodes[flat_mask] = self.temporal(node_kinematics.reshape(b * n, t, f)[flat_mask])
        h_tau_nodes = h_tau_nodes.view(b, n, self.dim)
        h_soc = self.social(h_tau_nodes, edge_feats, adj, node_mask)
        return self.fusion(h_tau_nodes[:, 0], h_soc)
