"""Semantic-temporal pyramid encoder.

Each block builds a stride-3 convolutional pyramid over the snippet axis,
lets every node attend to its same-level neighbours plus its parent
(temporal pyramid), then to its ``m`` most cosine-similar same-level nodes
(semantic pyramid), followed by a residual connection and a feed-forward
layer. Only the finest level (``T`` nodes) is returned.

All functions take tensors with a leading batch axis, ``(B, n, D)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn


@dataclass
class PyramidConfig:
    dim: int
    levels: int = 3
    m_nodes: int = 6
    n_blocks: int = 2
    ffn_hidden: int | None = None

    def __post_init__(self) -> None:
        if self.levels < 1 or self.m_nodes < 1 or self.n_blocks < 1 or self.dim < 1:
            raise ValueError(f"invalid pyramid config: {self}")
        if self.ffn_hidden is None:
            self.ffn_hidden = 2 * self.dim


@dataclass
class PyramidFeatures:
    """Per-level node features; ``parent_index[k][t]`` is -1 when no parent exists."""

    levels: list[torch.Tensor]
    parent_index: list[torch.Tensor] = field(default_factory=list)

    @property
    def lengths(self) -> list[int]:
        return [lvl.shape[-2] for lvl in self.levels]


def level_lengths(t: int, levels: int) -> list[int]:
    out = [t]
    while len(out) < levels and out[-1] // 3 >= 1:
        out.append(out[-1] // 3)
    return out


def build_pyramid(
    f: torch.Tensor, conv_params: list[tuple[torch.Tensor, torch.Tensor]], levels: int
) -> PyramidFeatures:
    """Stack stride-3, kernel-3 convolutions into a pyramid.

    ``conv_params[k] = (weight (3D, D), bias (D,))`` maps three consecutive
    level-k nodes to one level-(k+1) node; a trailing partial group is dropped.
    """
    out = [f]
    parents = []
    for k in range(levels - 1):
        prev = out[-1]
        n_next = prev.shape[-2] // 3
        if n_next == 0:
            break
        weight, bias = conv_params[k]
        groups = prev[..., : 3 * n_next, :].reshape(*prev.shape[:-2], n_next, 3 * prev.shape[-1])
        out.append(groups @ weight + bias)
    for k in range(len(out)):
        n = out[k].shape[-2]
        idx = torch.arange(n) // 3
        if k + 1 < len(out):
            idx = torch.where(idx < out[k + 1].shape[-2], idx, torch.full_like(idx, -1))
        else:
            idx = torch.full_like(idx, -1)
        parents.append(idx)
    return PyramidFeatures(out, parents)


def temporal_neighbours(n: int, parent_index: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Neighbour table for one level.

    Returns ``(index (n, 4), valid (n, 4))`` where columns are left, self,
    right and parent. Parent indices are offset by ``n`` so they address the
    concatenation ``[this level; next level]``.
    """
    t = torch.arange(n)
    index = torch.stack([t - 1, t, t + 1, n + parent_index], dim=1)
    valid = torch.stack([t >= 1, torch.ones(n, dtype=torch.bool), t + 1 < n, parent_index >= 0], dim=1)
    index = torch.where(valid, index, torch.zeros_like(index))
    return index, valid


def _gathered_attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    index: torch.Tensor,
    valid: torch.Tensor,
) -> torch.Tensor:
    """Attention of each query row over its own gathered key set.

    queries: (B, n, D); keys/values: (B, N, D); index/valid: (n, s).
    """
    d = queries.shape[-1]
    k_sel = keys[:, index]  # (B, n, s, D)
    v_sel = values[:, index]
    logits = torch.einsum("bnd,bnsd->bns", queries, k_sel) / math.sqrt(d)
    logits = logits.masked_fill(~valid, float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    return torch.einsum("bns,bnsd->bnd", weights, v_sel)


def temporal_attention(
    pyr: PyramidFeatures, w_q: torch.Tensor, w_k: torch.Tensor, w_v: torch.Tensor
) -> PyramidFeatures:
    """Attend over {left, self, right} at the same level plus the parent node."""
    out = []
    for k, level in enumerate(pyr.levels):
        n = level.shape[-2]
        context = level
        if k + 1 < len(pyr.levels):
            context = torch.cat([level, pyr.levels[k + 1]], dim=-2)
        index, valid = temporal_neighbours(n, pyr.parent_index[k])
        out.append(_gathered_attention(level @ w_q, context @ w_k, context @ w_v, index, valid))
    return PyramidFeatures(out, pyr.parent_index)


def cosine_matrix(x: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarity of rows; zero-norm rows score 0 against everything."""
    norms = x.norm(dim=-1, keepdim=True)
    unit = torch.where(norms > 0, x / norms.clamp_min(1e-300), torch.zeros_like(x))
    return unit @ unit.transpose(-1, -2)


def semantic_topm(f_level: torch.Tensor, m: int) -> torch.Tensor:
    """Indices of the ``min(m, n-1)`` most cosine-similar other rows.

    ``f_level`` is ``(n, D)`` or ``(B, n, D)``; the result has shape
    ``(..., n, min(m, n-1))``. Self is excluded, ties go to the lower index.
    """
    with torch.no_grad():
        sims = cosine_matrix(f_level.detach())
        n = sims.shape[-1]
        m_eff = min(m, n - 1)
        eye = torch.eye(n, dtype=torch.bool)
        sims = sims.masked_fill(eye, float("-inf"))
        order = torch.sort(sims, dim=-1, descending=True, stable=True).indices
        return order[..., :m_eff]


def semantic_attention(
    f_level: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor, w_v: torch.Tensor, m: int
) -> torch.Tensor:
    """Scaled dot-product attention over each node's top-``m`` similar nodes."""
    squeeze = f_level.dim() == 2
    x = f_level.unsqueeze(0) if squeeze else f_level
    n, d = x.shape[-2], x.shape[-1]
    if n < 2:
        out = torch.zeros_like(x)
    else:
        sel = semantic_topm(x, m)  # (B, n, m')
        q = x @ w_q
        k_all = x @ w_k
        v_all = x @ w_v
        batch = torch.arange(x.shape[0])[:, None, None]
        k_sel = k_all[batch, sel]  # (B, n, m', D)
        v_sel = v_all[batch, sel]
        logits = torch.einsum("bnd,bnsd->bns", q, k_sel) / math.sqrt(d)
        out = torch.einsum("bns,bnsd->bnd", torch.softmax(logits, dim=-1), v_sel)
    return out[0] if squeeze else out


def _uniform(shape: tuple[int, ...], fan_in: int, gen: torch.Generator, dtype) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter((torch.rand(shape, generator=gen, dtype=dtype) * 2 - 1) * bound)


class STPEBlock(nn.Module):
    def __init__(self, cfg: PyramidConfig, gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        d, h = cfg.dim, cfg.ffn_hidden
        self.cfg = cfg
        self.t_q, self.t_k, self.t_v = (_uniform((d, d), d, gen, dtype) for _ in range(3))
        self.s_q, self.s_k, self.s_v = (_uniform((d, d), d, gen, dtype) for _ in range(3))
        self.conv_w = nn.ParameterList(
            [_uniform((3 * d, d), 3 * d, gen, dtype) for _ in range(cfg.levels - 1)]
        )
        self.conv_b = nn.ParameterList(
            [_uniform((d,), 3 * d, gen, dtype) for _ in range(cfg.levels - 1)]
        )
        self.ffn_w1 = _uniform((d, h), d, gen, dtype)
        self.ffn_b1 = _uniform((h,), d, gen, dtype)
        self.ffn_w2 = _uniform((h, d), h, gen, dtype)
        self.ffn_b2 = _uniform((d,), h, gen, dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pyr = build_pyramid(x, list(zip(self.conv_w, self.conv_b)), self.cfg.levels)
        temporal = temporal_attention(pyr, self.t_q, self.t_k, self.t_v)
        # only the finest level is returned, so coarser semantic outputs would be discarded
        semantic = semantic_attention(temporal.levels[0], self.s_q, self.s_k, self.s_v, self.cfg.m_nodes)
        h = x + semantic
        return h + torch.relu(h @ self.ffn_w1 + self.ffn_b1) @ self.ffn_w2 + self.ffn_b2


class STPE(nn.Module):
    """Stack of ``n_blocks`` pyramid blocks; maps ``(B, T, D)`` to ``(B, T, D)``."""

    def __init__(self, cfg: PyramidConfig, gen: torch.Generator | None = None, dtype=torch.float32):
        super().__init__()
        gen = gen or torch.Generator().manual_seed(0)
        self.cfg = cfg
        self.blocks = nn.ModuleList([STPEBlock(cfg, gen, dtype) for _ in range(cfg.n_blocks)])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 2
        h = x.unsqueeze(0) if squeeze else x
        for block in self.blocks:
            h = block(h)
            if not torch.isfinite(h).all():
                raise FloatingPointError("non-finite activation inside the pyramid encoder")
        return h[0] if squeeze else h


def stpe_forward(f: torch.Tensor, cfg: PyramidConfig, params: STPE) -> torch.Tensor:
    if params.cfg != cfg:
        raise ValueError("parameters were built for a different pyramid config")
    return params(f)
