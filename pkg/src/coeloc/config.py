"""Run configuration: one YAML document with a section per module."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .coegen import VerificationConfig
from .learn import LossConfig, TrainConfig
from .locate import EvalConfig
from .model import ModelConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthSection(_Section):
    classes: int = Field(3, ge=1)
    videos_per_class: int = Field(10, ge=1)
    d: int = Field(8, ge=1)
    margin: float = Field(4.0, ge=0)
    noise: float = Field(1.0, ge=0)
    background_norm: float = Field(4.0, ge=0)
    idle_margin: float = Field(4.0, ge=0)
    lead_in: int = Field(2, ge=0)
    idle_len: int = Field(3, ge=0)
    duration_s: float = Field(20.0, gt=0)
    min_action_frac: float = Field(0.2, gt=0, le=1)
    max_action_frac: float = Field(0.5, gt=0, le=1)
    texts: bool = True


class DataSection(_Section):
    manifest: Optional[str] = None
    t_snippets: int = Field(20, ge=1)
    synth: SynthSection = SynthSection()


class StpeSection(_Section):
    levels: int = Field(3, ge=1)
    m_nodes: int = Field(6, ge=1)
    n_blocks: int = Field(2, ge=1)
    ffn_hidden: Optional[int] = None
    enabled: bool = True


class ModelSection(_Section):
    text_dim: int = Field(16, ge=1)
    head_hidden: int = Field(16, ge=1)
    metric: Literal["cosine", "euclidean", "manhattan"] = "cosine"
    text_ablation: bool = False


class LearnSection(_Section):
    shots: int = Field(2, ge=1)
    learning_rate: float = Field(3e-3, gt=0)
    epochs: int = Field(30, ge=1)
    episodes_per_epoch: int = Field(50, ge=1)
    batch_size: int = Field(5, ge=1)
    val_split: str = "val"
    val_episodes: int = Field(50, ge=1)
    eval_every: int = Field(1, ge=1)
    betas: tuple[float, float] = (0.9, 0.999)
    augment: Literal["none", "rotate", "rotate_full"] = "rotate"
    epsilon: float = Field(1e-10, gt=0)
    clamp_delta: float = Field(1e-7, gt=0, lt=0.5)


class LocateSection(_Section):
    thresholds: list[float] = Field(default_factory=lambda: EvalConfig().thresholds)
    min_len: int = Field(2, ge=1)
    snms_iou: float = Field(0.7, gt=0, le=1)
    snms_min_score: float = Field(1e-3, ge=0)
    iou_grid: list[float] = Field(default_factory=lambda: EvalConfig().iou_grid)
    split: str = "test"
    episodes: int = Field(50, ge=1)


class ClientSection(_Section):
    kind: Literal["scripted", "echo", "http"]
    script: Optional[str] = None
    url: Optional[str] = None
    api_key_env: Optional[str] = None
    timeout_s: float = Field(60.0, gt=0)
    retries: int = Field(2, ge=0)


class EmbeddingSection(_Section):
    kind: Literal["hash", "http"] = "hash"
    mode: Literal["tokens", "string"] = "tokens"
    url: Optional[str] = None
    frames_url: Optional[str] = None
    timeout_s: float = Field(30.0, gt=0)
    retries: int = Field(2, ge=0)


class CoegenSection(_Section):
    alpha: float = Field(0.2, gt=0, lt=1)
    top_k: int = Field(3, ge=1)
    fps: float = Field(1.0, gt=0)
    n_retry: int = Field(5, ge=1)
    min_words: int = Field(5, ge=0)
    max_repeat_ratio: float = Field(0.5, gt=0, le=1)
    parallelism: int = Field(1, ge=1)
    prompts: dict[int, str] = Field(default_factory=dict)
    vlm: Optional[ClientSection] = None
    llm: Optional[ClientSection] = None
    alpha_grid: Optional[list[float]] = None

    @field_validator("prompts")
    @classmethod
    def _stage_ids(cls, v: dict[int, str]) -> dict[int, str]:
        bad = sorted(set(v) - {1, 2, 3})
        if bad:
            raise ValueError(f"prompt stage ids must be 1, 2 or 3, got {bad}")
        return v


class RunConfig(_Section):
    seed: int = 0
    data: DataSection = DataSection()
    stpe: StpeSection = StpeSection()
    model: ModelSection = ModelSection()
    learn: LearnSection = LearnSection()
    locate: LocateSection = LocateSection()
    embedding: EmbeddingSection = EmbeddingSection()
    coegen: CoegenSection = CoegenSection()

    def hash(self) -> str:
        doc = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]

    def synth_config(self) -> SynthConfig:
        return SynthConfig(t=self.data.t_snippets, **self.data.synth.model_dump())

    def localizer_config(self, dim: int) -> ModelConfig:
        return ModelConfig(
            dim=dim,
            text_dim=self.model.text_dim,
            shots=self.learn.shots,
            levels=self.stpe.levels,
            m_nodes=self.stpe.m_nodes,
            n_blocks=self.stpe.n_blocks,
            ffn_hidden=self.stpe.ffn_hidden,
            head_hidden=self.model.head_hidden,
            metric=self.model.metric,
            text_ablation=self.model.text_ablation,
            use_stpe=self.stpe.enabled,
        )

    def train_config(self) -> TrainConfig:
        lc = self.learn
        return TrainConfig(
            learning_rate=lc.learning_rate,
            epochs=lc.epochs,
            episodes_per_epoch=lc.episodes_per_epoch,
            batch_size=lc.batch_size,
            seed=self.seed,
            t=self.data.t_snippets,
            shots=lc.shots,
            val_split=lc.val_split,
            val_episodes=lc.val_episodes,
            eval_every=lc.eval_every,
            betas=tuple(lc.betas),
            augment=lc.augment,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(self.learn.epsilon, self.learn.clamp_delta)

    def eval_config(self) -> EvalConfig:
        lc = self.locate
        return EvalConfig(list(lc.thresholds), lc.min_len, lc.snms_iou, lc.snms_min_score, list(lc.iou_grid))

    def verification_config(self) -> VerificationConfig:
        c = self.coegen
        return VerificationConfig(c.alpha, c.top_k, c.fps, c.n_retry, c.min_words, c.max_repeat_ratio)


def _format_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        key = ".".join(str(p) for p in err["loc"])
        parts.append(f"{key}: {err['msg']}")
    return "; ".join(parts)


def parse_config(doc: dict | None) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(doc or {})
        cfg.synth_config().validate()
        cfg.eval_config()
        cfg.train_config()
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    """Read and validate a config file; ``None`` gives the defaults."""
    if path is None:
        return parse_config({})
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(doc)
