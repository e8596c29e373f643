"""Staged chain-of-evidence text generation with automatic verification.

Stage 1 asks the vision-language client for a detailed description of the
video, stage 2 asks it to keep only the key events, and stage 3 asks the
language client to connect those events into a causal chain. Every stage
output is filtered, split into sub-sentences, scored against sampled
frames, and regenerated with a refinement prompt while any sub-sentence
scores below ``alpha``. Items that never pass go to a human-review queue.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .clients import ChatClient
from .datapack import TextBundle, VideoRecord
from .textfuse import EmbeddingProvider, FramePayload

log = logging.getLogger(__name__)

CONNECTORS = (
    "which causes", "causing", "leads to", "leading to", "because", "therefore", "as a result",
)
_CONNECTOR_RE = re.compile(
    r"\b(" + "|".join(re.escape(c) for c in sorted(CONNECTORS, key=len, reverse=True)) + r")\b",
    re.IGNORECASE,
)
_SENTENCE_RE = re.compile(r"[.!?]+")

DEFAULT_PROMPTS = {
    1: "Describe the video in detail: the scene, the people in it, and everything "
       "that happens, in the order it happens.",
    2: "From the description below, keep only the key actions or unusual events "
       "and list them in the order they happen. Drop everything else.",
    3: "Using the detailed description and the key events below, write a chain of "
       "evidence: state each event and link cause and effect with explicit "
       "connectors such as 'which causes' or 'leads to'. Keep the entities, scenes "
       "and temporal order consistent with the earlier descriptions.",
}
CAPTION_PROMPT = "Describe in one short sentence what is happening in this frame."


class StageError(RuntimeError):
    def __init__(self, message: str, stage_id: int, attempts: int = 0):
        super().__init__(f"stage {stage_id}: {message} (attempts: {attempts})")
        self.stage_id = stage_id
        self.attempts = attempts


@dataclass
class VerificationConfig:
    alpha: float = 0.2
    top_k: int = 3
    fps: float = 1.0
    n_retry: int = 5
    min_words: int = 5
    max_repeat_ratio: float = 0.5

    def __post_init__(self) -> None:
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.top_k < 1 or self.n_retry < 1 or self.fps <= 0:
            raise ValueError("top_k, n_retry and fps must be positive")


@dataclass
class Stage:
    stage_id: int
    prompt: str
    inputs: dict[int, str] = field(default_factory=dict)
    output: str | None = None

    def context(self) -> str:
        if self.stage_id == 1:
            return ""
        if self.stage_id == 2:
            return self.inputs[1]
        return f"Detailed description:\n{self.inputs[1]}\n\nKey events:\n{self.inputs[2]}"


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def run_stage(stage: Stage, client: ChatClient, frames: Sequence[FramePayload] | None = None) -> str:
    """Call the stage's client once and return its completion verbatim."""
    required = {1: [], 2: [1], 3: [1, 2]}[stage.stage_id]
    missing = [i for i in required if not stage.inputs.get(i)]
    if missing:
        raise StageError(f"missing prior outputs {missing}", stage.stage_id)
    expected_role = "llm" if stage.stage_id == 3 else "vlm"
    if getattr(client, "role", expected_role) != expected_role:
        raise StageError(f"needs a {expected_role} client, got {client.role}", stage.stage_id)
    try:
        out = client.complete(stage.prompt, stage.context(), frames if expected_role == "vlm" else None)
    except Exception as exc:
        raise StageError(f"client failed: {exc}", stage.stage_id, 1) from exc
    log.info("stage %d prompt %s output %s", stage.stage_id, _digest(stage.prompt), _digest(out))
    stage.output = out
    return out


@dataclass
class FilterResult:
    passed: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.passed


def _sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_RE.split(text) if s.strip()]


def auto_filter(text: str, cfg: VerificationConfig) -> FilterResult:
    """Reject outputs that are too short or dominated by one repeated sentence."""
    if len(text.split()) < cfg.min_words:
        return FilterResult(False, "too short")
    sentences = [" ".join(s.lower().split()) for s in _sentences(text)]
    if len(sentences) >= 2:
        top = Counter(sentences).most_common(1)[0][1]
        if top / len(sentences) > cfg.max_repeat_ratio:
            return FilterResult(False, "repeat")
    return FilterResult(True)


def parse_sub_sentences(text: str) -> list[str]:
    """Split on ``.!?`` and, inside sentences, right before each logical connector."""
    fragments = []
    for sentence in _sentences(text):
        cuts = [m.start() for m in _CONNECTOR_RE.finditer(sentence)]
        bounds = [0] + cuts + [len(sentence)]
        for a, b in zip(bounds, bounds[1:]):
            piece = sentence[a:b].strip()
            if piece:
                fragments.append(piece)
    if not fragments:
        raise ValueError("text has no sub-sentences")
    return fragments


def topk_mean(row: np.ndarray, k: int) -> float:
    k = min(k, row.shape[-1])
    return float(np.partition(row, row.shape[-1] - k)[-k:].mean())


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def similarity_scores(text_emb: np.ndarray, frame_emb: np.ndarray, k: int) -> np.ndarray:
    """Mean of the top-``min(k, N_frame)`` cosine similarities of each text row."""
    sims = _unit_rows(text_emb) @ _unit_rows(frame_emb).T
    return np.array([topk_mean(row, k) for row in sims])


def consistency_scores(
    sub_sentences: Sequence[str],
    frames: Sequence[FramePayload],
    provider: EmbeddingProvider,
    cfg: VerificationConfig,
) -> list[tuple[str, float]]:
    if not frames:
        raise ValueError("consistency scoring needs at least one frame")
    text_emb = np.asarray(provider.encode_texts(list(sub_sentences)), dtype=np.float64)
    frame_emb = np.asarray(provider.encode_frames(list(frames)), dtype=np.float64)
    scores = similarity_scores(text_emb, frame_emb, cfg.top_k)
    return list(zip(sub_sentences, scores.tolist()))


def create_refinement_prompt(prompt: str, issues: Sequence[str]) -> str:
    if not issues:
        raise ValueError("a refinement prompt needs at least one issue")
    listed = "\n".join(f"- {issue}" for issue in issues)
    return (
        f"{prompt}\n\n"
        "Your previous answer contained parts that the video does not support:\n"
        f"{listed}\n"
        "Revise only those parts and leave the rest unchanged. Keep the entities, "
        "scenes and temporal order consistent with the earlier descriptions."
    )


@dataclass
class Event:
    text: str


@dataclass
class CausalLink:
    cause_index: int
    effect_index: int
    text: str


@dataclass
class CoEDocument:
    """Parsed stage-3 output: ``events`` plus ``elements`` in textual order.

    Elements are ``Event``s, or ``CausalLink``s whose indices point into
    ``events`` (a fragment opening with a connector links the previous event
    to the one it introduces).
    """

    raw_text: str
    events: list[Event]
    elements: list[Event | CausalLink]
    scores: list[tuple[str, float]] = field(default_factory=list)

    def sentences(self) -> list[str]:
        return _sentences(self.raw_text)


def parse_coe(text: str, scores: Sequence[tuple[str, float]] = ()) -> CoEDocument:
    events: list[Event] = []
    elements: list[Event | CausalLink] = []
    for fragment in parse_sub_sentences(text):
        m = _CONNECTOR_RE.match(fragment)
        body = (fragment[m.end():] if m else fragment).strip(" ,;")
        events.append(Event(body or fragment))
        if m and len(events) > 1:
            elements.append(CausalLink(len(events) - 2, len(events) - 1, fragment))
        else:
            elements.append(events[-1])
    return CoEDocument(text, events, elements, list(scores))


@dataclass
class StageReport:
    stage_id: int
    passed: bool
    attempts: int
    refinements: int
    output: str
    sub_sentences: list[tuple[str, float, bool]] = field(default_factory=list)
    filter_reason: str = ""


@dataclass
class VerificationReport:
    passed: bool
    disposition: str  # accepted | refined | human_review
    stages: list[StageReport]

    @property
    def attempts(self) -> int:
        """Generation calls spent on the last stage that ran."""
        return self.stages[-1].attempts if self.stages else 0

    @property
    def total_attempts(self) -> int:
        return sum(s.attempts for s in self.stages)

    @property
    def sub_sentences(self) -> list[tuple[str, float, bool]]:
        return self.stages[-1].sub_sentences if self.stages else []


class HumanReviewQueue:
    """Append-only review queue; optionally mirrored to a JSONL file."""

    def __init__(self, path: str | os.PathLike | None = None, meta: dict | None = None):
        self.path = Path(path) if path else None
        self.meta = meta
        self.items: list[dict] = []
        self._lock = threading.Lock()

    def add(self, video_id: str, stage_id: int, text: str, flagged: Sequence[str], attempts: int) -> dict:
        item = {
            "video_id": video_id,
            "stage_id": stage_id,
            "text": text,
            "flagged": list(flagged),
            "attempts": attempts,
        }
        if self.meta:
            item["meta"] = dict(self.meta)
        with self._lock:
            self.items.append(item)
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a") as fh:
                    fh.write(json.dumps(item, sort_keys=True) + "\n")
        return item

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class VideoInput:
    video_id: str
    frames: list[FramePayload]
    duration_s: float = 0.0


@dataclass
class Clients:
    vlm: ChatClient
    llm: ChatClient


def sample_frames(record: VideoRecord, fps: float = 1.0) -> list[FramePayload]:
    """Frame payloads at ``fps`` (sampled at the centre of each interval).

    Records carrying captions yield the caption of the snippet under each
    frame time; otherwise the float32 bytes of that snippet's feature row.
    """
    duration = record.features.duration_s
    n = max(1, int(np.floor(duration * fps)))
    t = record.features.num_snippets
    frames: list[FramePayload] = []
    for i in range(n):
        snippet = min(t - 1, int((i + 0.5) / fps / duration * t))
        if record.texts is not None:
            frames.append(record.texts.captions_for(t)[snippet])
        else:
            frames.append(record.features.values[snippet].astype("<f4").tobytes())
    return frames


def verify(
    text: str, frames: Sequence[FramePayload], provider: EmbeddingProvider, cfg: VerificationConfig
) -> tuple[bool, list[str], list[tuple[str, float, bool]], str]:
    """Returns ``(passed, issues, scored_sub_sentences, filter_reason)``."""
    verdict = auto_filter(text, cfg)
    if not verdict:
        return False, [verdict.reason], [], verdict.reason
    scored = [
        (s, score, score < cfg.alpha)
        for s, score in consistency_scores(parse_sub_sentences(text), frames, provider, cfg)
    ]
    issues = [s for s, _, flagged in scored if flagged]
    return not issues, issues, scored, ""


def _generate_verified_stage(
    stage: Stage,
    client: ChatClient,
    video: VideoInput,
    provider: EmbeddingProvider,
    cfg: VerificationConfig,
) -> StageReport:
    base_prompt = stage.prompt
    refinements = 0
    report = None
    for attempt in range(1, cfg.n_retry + 1):
        output = run_stage(stage, client, video.frames)
        passed, issues, scored, reason = verify(output, video.frames, provider, cfg)
        report = StageReport(stage.stage_id, passed, attempt, refinements, output, scored, reason)
        if passed:
            break
        if attempt < cfg.n_retry:
            # rebuilt from the base prompt so refinements do not nest
            stage.prompt = create_refinement_prompt(base_prompt, issues)
            refinements += 1
    stage.prompt = base_prompt
    return report


def generate_and_verify(
    video: VideoInput,
    clients: Clients,
    provider: EmbeddingProvider,
    cfg: VerificationConfig | None = None,
    prompts: dict[int, str] | None = None,
    queue: HumanReviewQueue | None = None,
) -> tuple[CoEDocument | None, VerificationReport]:
    """Run the three verified stages; returns ``(document or None, report)``."""
    cfg = cfg or VerificationConfig()
    prompts = {**DEFAULT_PROMPTS, **(prompts or {})}
    queue = queue if queue is not None else HumanReviewQueue()
    outputs: dict[int, str] = {}
    reports: list[StageReport] = []
    for stage_id in (1, 2, 3):
        client = clients.llm if stage_id == 3 else clients.vlm
        stage = Stage(stage_id, prompts[stage_id], dict(outputs))
        report = _generate_verified_stage(stage, client, video, provider, cfg)
        reports.append(report)
        if not report.passed:
            flagged = [s for s, _, f in report.sub_sentences if f] or [report.filter_reason]
            queue.add(video.video_id, stage_id, report.output, flagged, report.attempts)
            return None, VerificationReport(False, "human_review", reports)
        outputs[stage_id] = report.output
    disposition = "accepted" if all(r.attempts == 1 for r in reports) else "refined"
    doc = parse_coe(outputs[3], [(s, score) for s, score, _ in reports[-1].sub_sentences])
    return doc, VerificationReport(True, disposition, reports)


def generate_captions(client: ChatClient, frames: Sequence[FramePayload]) -> list[str]:
    """Per-frame captions from the vision-language client."""
    return [client.complete(CAPTION_PROMPT, "", [f]).strip() for f in frames]


def join_sentences(sentences: Sequence[str]) -> str:
    """Inverse of sentence splitting: terminate each sentence, join with spaces."""
    return " ".join(s if s.rstrip()[-1:] in ".!?" else s + "." for s in sentences if s.strip())


def texts_from_document(captions: Sequence[str], doc: CoEDocument) -> TextBundle:
    return TextBundle(list(captions), doc.sentences())


def process_videos(
    videos: Sequence[VideoInput],
    clients: Clients,
    provider: EmbeddingProvider,
    cfg: VerificationConfig,
    queue: HumanReviewQueue,
    prompts: dict[int, str] | None = None,
    parallelism: int = 1,
) -> list[tuple[CoEDocument | None, VerificationReport]]:
    """Independent videos in parallel (bounded); stages stay sequential per video."""
    def one(v: VideoInput):
        return generate_and_verify(v, clients, provider, cfg, prompts, queue)

    if parallelism <= 1:
        return [one(v) for v in videos]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, videos))


def calibrate_alpha(
    scores: Sequence[float], labels: Sequence[bool], grid: Sequence[float] | None = None
) -> tuple[float, list[dict]]:
    """Pick the threshold that best separates consistent from inconsistent items.

    ``labels[i]`` is True when a human judged item ``i`` consistent. The
    criterion is balanced accuracy; ties go to the smaller threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    grid = list(grid) if grid is not None else [round(0.05 * i, 2) for i in range(1, 20)]
    table = []
    for alpha in grid:
        pred = scores >= alpha
        tpr = (pred & labels).sum() / max(labels.sum(), 1)
        tnr = (~pred & ~labels).sum() / max((~labels).sum(), 1)
        table.append({"alpha": alpha, "balanced_accuracy": float((tpr + tnr) / 2)})
    best = max(table, key=lambda r: (r["balanced_accuracy"], -r["alpha"]))
    return best["alpha"], table


def report_to_dict(report: VerificationReport) -> dict:
    return {
        "pass": report.passed,
        "disposition": report.disposition,
        "attempts": report.attempts,
        "stages": [asdict(s) for s in report.stages],
    }
