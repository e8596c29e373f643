"""End-to-end few-shot localizer: encoder, text fusion, alignment and head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import align
from .datapack import Episode
from .stpe import STPE, PyramidConfig
from .textfuse import EmbeddingProvider, cross_attend, embed_unique


@dataclass
class ModelConfig:
    dim: int
    text_dim: int
    shots: int
    levels: int = 3
    m_nodes: int = 6
    n_blocks: int = 2
    ffn_hidden: int | None = None
    head_hidden: int = 16
    metric: str = "cosine"
    # replaces the video-text map with ones (text ablation)
    text_ablation: bool = False
    use_stpe: bool = True

    def pyramid(self) -> PyramidConfig:
        return PyramidConfig(self.dim, self.levels, self.m_nodes, self.n_blocks, self.ffn_hidden)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpisodeTensors:
    """Everything the forward pass needs, already rescaled and embedded."""

    episode_id: str
    class_id: int
    query: torch.Tensor  # (T, D)
    supports: torch.Tensor  # (K, T, D)
    support_masks: torch.Tensor  # (K, T)
    query_mask: torch.Tensor  # (T,)
    captions: torch.Tensor  # (K, T, D') raw embeddings
    coe: list[torch.Tensor]  # K x (T'_k, D') raw embeddings
    duration_s: float
    gts: list[tuple[float, float]] = field(default_factory=list)

    def to(self, dtype: torch.dtype) -> "EpisodeTensors":
        return EpisodeTensors(
            self.episode_id,
            self.class_id,
            self.query.to(dtype),
            self.supports.to(dtype),
            self.support_masks.to(dtype),
            self.query_mask.to(dtype),
            self.captions.to(dtype),
            [c.to(dtype) for c in self.coe],
            self.duration_s,
            self.gts,
        )


def prepare_episode(
    ep: Episode, provider: EmbeddingProvider, dtype: torch.dtype = torch.float32
) -> EpisodeTensors:
    caps, coes = [], []
    for s in ep.supports:
        if s.texts is None:
            raise ValueError(f"support video {s.video_id} has no texts")
        caps.append(embed_unique(provider, s.texts.captions_for(ep.t)))
        coes.append(torch.as_tensor(embed_unique(provider, s.texts.coe_sentences), dtype=dtype))
    return EpisodeTensors(
        episode_id=ep.episode_id,
        class_id=ep.class_id,
        query=torch.as_tensor(ep.query.features.values, dtype=dtype),
        supports=torch.as_tensor(np.stack([s.features.values for s in ep.supports]), dtype=dtype),
        support_masks=torch.as_tensor(np.stack(ep.support_masks), dtype=dtype),
        query_mask=torch.as_tensor(ep.query_mask, dtype=dtype),
        captions=torch.as_tensor(np.stack(caps), dtype=dtype),
        coe=coes,
        duration_s=ep.query.features.duration_s,
        gts=list(ep.query.annotations.intervals),
    )


def _uniform(shape, fan_in, gen, dtype) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter((torch.rand(shape, generator=gen, dtype=dtype) * 2 - 1) * bound)


class FewShotLocalizer(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        d, dt, k, h = cfg.dim, cfg.text_dim, cfg.shots, cfg.head_hidden
        self.stpe = STPE(cfg.pyramid(), gen, dtype)
        # text fusion
        self.text_proj = _uniform((dt, d), dt, gen, dtype)
        self.x_q, self.x_k, self.x_v = (_uniform((d, d), d, gen, dtype) for _ in range(3))
        # video-text fusion (two pointwise convolutions)
        self.fuse_w1 = _uniform((2 * d, d), 2 * d, gen, dtype)
        self.fuse_b1 = _uniform((d,), 2 * d, gen, dtype)
        self.fuse_w2 = _uniform((d, d), d, gen, dtype)
        self.fuse_b2 = _uniform((d,), d, gen, dtype)
        # prediction head
        self.head_w1 = _uniform((h, k, 3), 3 * k, gen, dtype)
        self.head_b1 = _uniform((h,), 3 * k, gen, dtype)
        self.head_w2 = _uniform((1, h, 3), 3 * h, gen, dtype)
        self.head_b2 = _uniform((1,), 3 * h, gen, dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.text_proj.dtype

    def encode_videos(self, query: torch.Tensor, supports: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        both = torch.cat([query[None], supports], dim=0)
        if self.cfg.use_stpe:
            both = self.stpe(both)
        return both[0], both[1:]

    def text_features(self, captions: torch.Tensor, coe: list[torch.Tensor]) -> torch.Tensor:
        f_cap = captions @ self.text_proj
        f_coe = [c @ self.text_proj for c in coe]
        return cross_attend(f_cap, f_coe, self.x_q, self.x_k, self.x_v)

    def forward(self, ep: EpisodeTensors, return_maps: bool = False):
        if ep.supports.shape[0] != self.cfg.shots:
            raise ValueError(f"model was built for {self.cfg.shots} shots, episode has {ep.supports.shape[0]}")
        f_q, f_s = self.encode_videos(ep.query, ep.supports)
        m_v = align.similarity_map(f_q, f_s, self.cfg.metric)
        if self.cfg.text_ablation:
            m_vt = torch.ones_like(m_v)
        else:
            f_t = self.text_features(ep.captions, ep.coe)
            f_hat = align.fuse_video_text(f_s, f_t, self.fuse_w1, self.fuse_b1, self.fuse_w2, self.fuse_b2)
            m_vt = align.similarity_map(f_q, f_hat, self.cfg.metric)
        m_mask = align.support_background_mask(ep.support_masks, f_q.shape[0]).to(m_v.dtype)
        m = align.combine_maps(m_v, m_vt, m_mask)
        p_hat = align.predict_foreground(m, self.head_w1, self.head_b1, self.head_w2, self.head_b2)
        if return_maps:
            return p_hat, {"video": m_v, "video_text": m_vt, "mask": m_mask, "combined": m}
        return p_hat

    def predict(self, ep: EpisodeTensors) -> np.ndarray:
        with torch.no_grad():
            return self(ep).double().numpy()
