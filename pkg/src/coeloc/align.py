"""Query-support alignment maps and the snippet-level prediction head."""

from __future__ import annotations

import torch
import torch.nn.functional as F

METRICS = ("cosine", "euclidean", "manhattan")


def _unit(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    return torch.where(norms > 0, x / norms.clamp_min(1e-300), torch.zeros_like(x))


def cosine_map(f_q: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
    """``out[k, i, j] = cos(f_q[i], f_s[k, j])``; zero-norm rows give 0."""
    return torch.einsum("id,kjd->kij", _unit(f_q), _unit(f_s))


def similarity_map(f_q: torch.Tensor, f_s: torch.Tensor, metric: str = "cosine") -> torch.Tensor:
    """Alignment map under ``metric``; distances become ``1 / (1 + dist)``."""
    if metric == "cosine":
        return cosine_map(f_q, f_s)
    diff = f_q[None, :, None, :] - f_s[:, None, :, :]
    if metric == "euclidean":
        dist = torch.sqrt((diff**2).sum(-1) + 1e-12)
    elif metric == "manhattan":
        dist = diff.abs().sum(-1)
    else:
        raise ValueError(f"unknown alignment metric {metric!r}")
    return 1.0 / (1.0 + dist)


def fuse_video_text(
    f_s: torch.Tensor,
    f_t: torch.Tensor,
    w1: torch.Tensor,
    b1: torch.Tensor,
    w2: torch.Tensor,
    b2: torch.Tensor,
) -> torch.Tensor:
    """Two pointwise convolutions over ``[text ; video]`` with a ReLU between.

    ``w1`` is ``(2D, D)``, ``w2`` is ``(D, D)``; kernel width 1 over time
    makes each convolution a per-snippet affine map.
    """
    if f_s.shape != f_t.shape:
        raise ValueError(f"support video {tuple(f_s.shape)} and text {tuple(f_t.shape)} shapes differ")
    joined = torch.cat([f_t, f_s], dim=-1)
    return torch.relu(joined @ w1 + b1) @ w2 + b2


def support_background_mask(support_masks: torch.Tensor, t_q: int) -> torch.Tensor:
    """Zero the support-time columns of background support snippets.

    ``support_masks`` is ``(K, T_s)``; the result is ``(K, t_q, T_s)``.
    """
    masks = torch.as_tensor(support_masks)
    return masks[:, None, :].expand(masks.shape[0], t_q, masks.shape[1]).clone()


def combine_maps(m_v: torch.Tensor, m_vt: torch.Tensor, m_mask: torch.Tensor) -> torch.Tensor:
    if not (m_v.shape == m_vt.shape == m_mask.shape):
        raise ValueError(
            f"alignment map shapes differ: {tuple(m_v.shape)}, {tuple(m_vt.shape)}, {tuple(m_mask.shape)}"
        )
    return m_v * m_vt * m_mask.to(m_v.dtype)


def pool_support_time(m: torch.Tensor) -> torch.Tensor:
    """Best support evidence per query snippet: ``(K, T_q, T_s) -> (K, T_q)``."""
    return m.max(dim=-1).values


def predict_foreground(
    m: torch.Tensor,
    w1: torch.Tensor,
    b1: torch.Tensor,
    w2: torch.Tensor,
    b2: torch.Tensor,
) -> torch.Tensor:
    """Snippet foreground probabilities from a combined ``(K, T_q, T_s)`` map.

    Shots become channels of a 1-D signal over query time; two kernel-3
    convolutions (``w1: (h, K, 3)``, ``w2: (1, h, 3)``, zero padding, ReLU
    between) and a sigmoid give ``(T_q,)`` probabilities.
    """
    pooled = pool_support_time(m)[None]  # (1, K, T_q)
    hidden = torch.relu(F.conv1d(pooled, w1, b1, padding=1))
    logits = F.conv1d(hidden, w2, b2, padding=1)[0, 0]
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite logits in the prediction head")
    return torch.sigmoid(logits)
