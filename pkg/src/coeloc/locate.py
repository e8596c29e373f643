"""Proposal extraction, soft-NMS and temporal mAP evaluation."""

from __future__ import annotations

import json
import logging
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


def _grid(lo: float, hi: float, step: float) -> list[float]:
    n = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(n + 1)]


@dataclass(frozen=True)
class Proposal:
    start: int
    end: int
    confidence: float
    start_s: float
    end_s: float

    @classmethod
    def from_snippets(cls, start: int, end: int, confidence: float, duration_s: float, t: int) -> "Proposal":
        if not start < end:
            raise ValueError(f"empty proposal [{start}, {end})")
        return cls(start, end, float(confidence), start * duration_s / t, end * duration_s / t)

    def rescored(self, confidence: float) -> "Proposal":
        return Proposal(self.start, self.end, float(confidence), self.start_s, self.end_s)


@dataclass
class EvalConfig:
    thresholds: list[float] = field(default_factory=lambda: _grid(0.30, 0.70, 0.05))
    min_len: int = 2
    snms_iou: float = 0.7
    snms_min_score: float = 1e-3
    iou_grid: list[float] = field(default_factory=lambda: _grid(0.50, 0.95, 0.05))

    def __post_init__(self) -> None:
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly increasing")
        if any(not 0 < th < 1 for th in self.thresholds):
            raise ValueError("thresholds must lie in (0, 1)")
        if self.min_len < 1:
            raise ValueError("min_len must be >= 1")


def runs_above(p_hat: Sequence[float], theta: float) -> list[tuple[int, int]]:
    """Maximal ``[start, end)`` runs with ``p_hat > theta``."""
    above = np.asarray(p_hat) > theta
    runs = []
    start = None
    for i, flag in enumerate(above):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(above)))
    return runs


def extract_proposals(p_hat: Sequence[float], cfg: EvalConfig, duration_s: float) -> list[Proposal]:
    """Multi-threshold run extraction; confidence is the mean probability of the run."""
    p = np.asarray(p_hat, dtype=np.float64)
    t = len(p)
    seen: dict[tuple[int, int], Proposal] = {}
    for theta in cfg.thresholds:
        for start, end in runs_above(p, theta):
            if end - start < cfg.min_len or (start, end) in seen:
                continue
            seen[(start, end)] = Proposal.from_snippets(start, end, p[start:end].mean(), duration_s, t)
    return list(seen.values())


def temporal_iou(a: Proposal | tuple[float, float], b: Proposal | tuple[float, float]) -> float:
    """Intersection over union of two segments in seconds."""
    a0, a1 = (a.start_s, a.end_s) if isinstance(a, Proposal) else a
    b0, b1 = (b.start_s, b.end_s) if isinstance(b, Proposal) else b
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union if union > 0 else 0.0


def _rank_key(p: Proposal) -> tuple:
    return (-p.confidence, p.start_s, p.end_s - p.start_s)


def soft_nms(props: Iterable[Proposal], cfg: EvalConfig) -> list[Proposal]:
    """Linear soft-NMS: overlaps above ``snms_iou`` decay by ``(1 - IoU)``.

    Returns proposals in selection order; those decayed below
    ``snms_min_score`` are dropped.
    """
    remaining = list(props)
    kept = []
    while remaining:
        best = min(remaining, key=_rank_key)
        remaining.remove(best)
        kept.append(best)
        survivors = []
        for p in remaining:
            iou = temporal_iou(best, p)
            if iou > cfg.snms_iou:
                p = p.rescored(p.confidence * (1.0 - iou))
            if p.confidence >= cfg.snms_min_score:
                survivors.append(p)
        remaining = survivors
    return kept


def average_precision(
    props: Sequence[Proposal], gts: Sequence[tuple[float, float]], iou_thr: float
) -> float:
    """Uninterpolated all-point AP with greedy confidence-ordered matching."""
    if not gts:
        if props:
            log.warning("average_precision: proposals given but no ground truth; AP = 0")
        return 0.0
    ranked = sorted(props, key=lambda p: (-p.confidence, p.start_s))
    matched = [False] * len(gts)
    tp = 0
    total = 0.0
    for rank, p in enumerate(ranked, start=1):
        best, best_iou = -1, iou_thr
        for g, gt in enumerate(gts):
            if matched[g]:
                continue
            iou = temporal_iou(p, gt)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = g, iou
        if best >= 0:
            matched[best] = True
            tp += 1
            total += tp / rank
    return total / len(gts)


@dataclass
class EpisodeResult:
    episode_id: str
    class_id: int
    proposals: list[Proposal]
    gts: list[tuple[float, float]]


def score_results(results: Sequence[EpisodeResult], cfg: EvalConfig) -> dict:
    """Per-IoU mAP (mean over episodes within a class, then over classes) and mean mAP."""
    map_at = {}
    for thr in cfg.iou_grid:
        per_class: dict[int, list[float]] = defaultdict(list)
        for r in results:
            per_class[r.class_id].append(average_precision(r.proposals, r.gts, thr))
        class_means = [float(np.mean(v)) for _, v in sorted(per_class.items())]
        map_at[f"{thr:.2f}"] = float(np.mean(class_means)) if class_means else 0.0
    mean_map = float(np.mean(list(map_at.values()))) if map_at else 0.0
    return {"map_at": map_at, "mean_map": mean_map}


def localize(p_hat: Sequence[float], cfg: EvalConfig, duration_s: float) -> list[Proposal]:
    return soft_nms(extract_proposals(p_hat, cfg, duration_s), cfg)


def write_proposal_dump(
    path: str | os.PathLike, results: Sequence[EpisodeResult], extra: dict | None = None
) -> None:
    """Line-delimited JSON ``{episode_id, start_s, end_s, confidence}`` per proposal."""
    extra = extra or {}
    with open(path, "w") as fh:
        for r in results:
            for p in r.proposals:
                rec = {
                    "episode_id": r.episode_id,
                    "start_s": p.start_s,
                    "end_s": p.end_s,
                    "confidence": p.confidence,
                    **extra,
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_proposal_dump(path: str | os.PathLike) -> dict[str, list[dict]]:
    out: dict[str, list[dict]] = defaultdict(list)
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec["episode_id"]].append(rec)
    return dict(out)


def config_dict(cfg: EvalConfig) -> dict:
    return asdict(cfg)
