"""Data model, on-disk formats, snippet labels and episodic sampling.

On-disk conventions
-------------------
* Feature file: raw little-endian float32, row-major ``T x D``, extension
  ``.f32``, with a JSON sidecar ``<name>.json`` holding
  ``{"t": int, "d": int, "duration_s": float}``.
* Manifest: JSON ``{"videos": [...], "splits": {"<class_id>": split}}``.
* Texts file: JSON ``{"captions": [T strings], "coe": [T' strings]}``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Raised when a manifest, feature file or texts file is invalid."""


@dataclass
class FeatureSequence:
    values: np.ndarray
    duration_s: float

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise DataError(f"feature matrix must be T x D with T, D >= 1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("feature matrix contains non-finite entries")
        if not self.duration_s > 0:
            raise DataError(f"duration_s must be positive, got {self.duration_s}")

    @property
    def num_snippets(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class AnnotationTrack:
    intervals: list[tuple[float, float]]
    class_id: int

    def validate(self, duration_s: float) -> None:
        spans = sorted(self.intervals)
        for t_s, t_e in spans:
            if not (0 <= t_s < t_e <= duration_s):
                raise DataError(
                    f"interval ({t_s}, {t_e}) outside [0, {duration_s}] or empty"
                )
        for (_, prev_end), (start, _) in zip(spans, spans[1:]):
            if start < prev_end:
                raise DataError(f"overlapping intervals in class {self.class_id}")


@dataclass
class TextBundle:
    captions: list[str]
    coe_sentences: list[str]

    def __post_init__(self) -> None:
        if not self.captions:
            raise DataError("texts need at least one caption")
        if not self.coe_sentences:
            raise DataError("texts need at least one CoE sentence")
        if any(not s.strip() for s in self.captions + self.coe_sentences):
            raise DataError("texts contain an empty string")

    def captions_for(self, t: int) -> list[str]:
        """Captions aligned to ``t`` snippets (nearest-index resample)."""
        n = len(self.captions)
        if n == t:
            return list(self.captions)
        if t == 1:
            return [self.captions[0]]
        pos = np.rint(np.arange(t) * (n - 1) / (t - 1)).astype(int)
        return [self.captions[i] for i in pos]


@dataclass
class VideoRecord:
    video_id: str
    features: FeatureSequence
    annotations: AnnotationTrack
    texts: TextBundle | None = None
    # paths as written in the manifest, kept for round-tripping
    features_path: str | None = None
    texts_path: str | None = None

    @property
    def class_id(self) -> int:
        return self.annotations.class_id


@dataclass
class DatasetManifest:
    records: list[VideoRecord]
    splits: dict[int, str]
    root: Path | None = None

    def __post_init__(self) -> None:
        ids = [r.video_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate video ids in manifest")
        for cid, split in self.splits.items():
            if split not in SPLITS:
                raise DataError(f"class {cid}: unknown split {split!r}")

    def classes(self, split: str) -> list[int]:
        return sorted(c for c, s in self.splits.items() if s == split)

    def records_of(self, class_id: int) -> list[VideoRecord]:
        return [r for r in self.records if r.class_id == class_id]

    def split_of(self, record: VideoRecord) -> str | None:
        return self.splits.get(record.class_id)


@dataclass
class Episode:
    query: VideoRecord
    supports: list[VideoRecord]
    class_id: int
    query_mask: np.ndarray
    support_masks: list[np.ndarray]
    t: int
    episode_id: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.supports)


# ---------------------------------------------------------------------------
# feature and texts files


def write_features(path: str | os.PathLike, f: FeatureSequence) -> Path:
    """Write ``f`` to ``path`` (``.f32``) plus its JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(f.values, dtype="<f4").tobytes())
    sidecar = {"t": f.num_snippets, "d": f.dim, "duration_s": float(f.duration_s)}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")
    return path


def read_features(path: str | os.PathLike) -> FeatureSequence:
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not path.exists():
        raise FileNotFoundError(f"feature file not found: {path}")
    if not sidecar_path.exists():
        raise FileNotFoundError(f"feature sidecar not found: {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    t, d = int(meta["t"]), int(meta["d"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != t * d:
        raise DataError(
            f"shape mismatch in {path.name}: sidecar declares {t}x{d}, payload has {raw.size} floats"
        )
    return FeatureSequence(raw.reshape(t, d).astype(np.float64), float(meta["duration_s"]))


def write_texts(path: str | os.PathLike, texts: TextBundle, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"captions": texts.captions, "coe": texts.coe_sentences}
    if meta:
        payload["meta"] = meta
    path.write_text(json.dumps(payload, indent=1) + "\n")
    return path


def read_texts(path: str | os.PathLike) -> TextBundle:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"texts file not found: {path}")
    payload = json.loads(path.read_text())
    return TextBundle(list(payload["captions"]), list(payload["coe"]))


# ---------------------------------------------------------------------------
# manifest


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Load and validate a manifest; relative paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    doc = _read_manifest_doc(path)

    splits: dict[int, str] = {}
    for cid, split in doc.get("splits", {}).items():
        if isinstance(split, list):
            # duplicate key in the JSON object
            if len(set(split)) > 1:
                raise DataError(f"overlapping splits: class {cid} in {sorted(set(split))}")
            split = split[0]
        splits[int(cid)] = split

    records = []
    for v in doc["videos"]:
        feat_path = v["features"]
        features = read_features(root / feat_path)
        ann = AnnotationTrack(
            [(float(a["t_s"]), float(a["t_e"])) for a in v.get("annotations", [])],
            int(v["class_id"]),
        )
        ann.validate(features.duration_s)
        texts = None
        texts_path = v.get("texts")
        if texts_path:
            texts = read_texts(root / texts_path)
        records.append(VideoRecord(str(v["id"]), features, ann, texts, feat_path, texts_path))
    return DatasetManifest(records, splits, root)


def _keep_duplicates(pairs):
    """``object_pairs_hook`` keeping duplicate keys as lists, so overlaps are detectable."""
    out: dict = {}
    for k, v in pairs:
        if k in out:
            prev = out[k]
            out[k] = (prev if isinstance(prev, list) else [prev]) + [v]
        else:
            out[k] = v
    return out


def _read_manifest_doc(path: Path) -> dict:
    return json.loads(path.read_text(), object_pairs_hook=_keep_duplicates)


def manifest_to_doc(manifest: DatasetManifest) -> dict:
    videos = []
    for r in manifest.records:
        entry = {
            "id": r.video_id,
            "features": r.features_path or f"features/{r.video_id}.f32",
            "annotations": [{"t_s": s, "t_e": e} for s, e in r.annotations.intervals],
            "class_id": r.class_id,
        }
        if r.texts is not None:
            entry["texts"] = r.texts_path or f"texts/{r.video_id}.json"
        videos.append(entry)
    return {"videos": videos, "splits": {str(c): s for c, s in sorted(manifest.splits.items())}}


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike, meta: dict | None = None) -> Path:
    """Write the manifest plus every feature and texts file it references."""
    path = Path(path)
    root = path.parent
    root.mkdir(parents=True, exist_ok=True)
    doc = manifest_to_doc(manifest)
    if meta:
        doc["meta"] = meta
    for r, entry in zip(manifest.records, doc["videos"]):
        write_features(root / entry["features"], r.features)
        if r.texts is not None:
            write_texts(root / entry["texts"], r.texts, meta)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


# ---------------------------------------------------------------------------
# snippet-level operations


def rescale_features(f: FeatureSequence, t_out: int) -> FeatureSequence:
    """Linearly resample ``f`` to ``t_out`` rows.

    Sample positions are ``j * (T - 1) / (t_out - 1)`` so the first and last
    snippets are preserved exactly; ``t_out == 1`` returns the first row.
    """
    if t_out < 1:
        raise ValueError(f"t_out must be >= 1, got {t_out}")
    t_in = f.num_snippets
    if t_out == t_in:
        return FeatureSequence(f.values.copy(), f.duration_s)
    if t_out == 1 or t_in == 1:
        values = np.repeat(f.values[:1], t_out, axis=0)
        return FeatureSequence(values, f.duration_s)
    pos = np.arange(t_out) * (t_in - 1) / (t_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), t_in - 2)
    frac = (pos - lo)[:, None]
    values = (1.0 - frac) * f.values[lo] + frac * f.values[lo + 1]
    values[0] = f.values[0]
    values[-1] = f.values[-1]
    return FeatureSequence(values, f.duration_s)


def snippet_labels(ann: AnnotationTrack, duration_s: float, t: int) -> np.ndarray:
    """Binary foreground mask: 1 iff the snippet center lies in some ``[t_s, t_e)``."""
    if duration_s <= 0:
        raise ValueError(f"duration_s must be positive, got {duration_s}")
    centers = (np.arange(t) + 0.5) * duration_s / t
    y = np.zeros(t, dtype=np.int64)
    for t_s, t_e in ann.intervals:
        y |= ((centers >= t_s) & (centers < t_e)).astype(np.int64)
    return y


def sample_episode(
    manifest: DatasetManifest,
    split: str,
    k: int,
    rng: np.random.Generator,
    t: int | None = None,
    episode_id: str = "",
) -> Episode:
    """Draw one K-shot episode from ``split``.

    A class is drawn uniformly among eligible ones, then ``k`` supports
    uniformly among its videos that carry texts, and the query uniformly
    among the remaining videos of the class.
    """
    eligible = []
    for cid in manifest.classes(split):
        recs = manifest.records_of(cid)
        texted = [r for r in recs if r.texts is not None]
        if len(recs) >= k + 1 and len(texted) >= k:
            eligible.append(cid)
    if not eligible:
        raise DataError(f"no eligible class in split {split!r} for k={k}")
    cid = eligible[int(rng.integers(len(eligible)))]
    recs = manifest.records_of(cid)
    texted = [i for i, r in enumerate(recs) if r.texts is not None]
    picks = rng.permutation(len(texted))[:k]
    support_idx = [texted[i] for i in picks]
    rest = [i for i in range(len(recs)) if i not in support_idx]
    query_idx = rest[int(rng.integers(len(rest)))]

    query = recs[query_idx]
    supports = [recs[i] for i in support_idx]
    t = t or query.features.num_snippets

    def prepare(r: VideoRecord) -> tuple[VideoRecord, np.ndarray]:
        feats = rescale_features(r.features, t)
        rec = VideoRecord(r.video_id, feats, r.annotations, r.texts, r.features_path, r.texts_path)
        return rec, snippet_labels(r.annotations, r.features.duration_s, t)

    q, q_mask = prepare(query)
    prepared = [prepare(s) for s in supports]
    return Episode(
        query=q,
        supports=[p[0] for p in prepared],
        class_id=cid,
        query_mask=q_mask,
        support_masks=[p[1] for p in prepared],
        t=t,
        episode_id=episode_id or f"{split}-{q.video_id}-" + "-".join(s.video_id for s in supports),
    )


def sample_episodes(
    manifest: DatasetManifest, split: str, k: int, n: int, seed: int, t: int | None = None
) -> list[Episode]:
    rng = np.random.default_rng(seed)
    return [
        sample_episode(manifest, split, k, rng, t=t, episode_id=f"{split}-{i:05d}")
        for i in range(n)
    ]
