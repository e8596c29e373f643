"""Synthetic separable few-shot localization data.

Every video has ``t`` snippets of dimension ``d`` and one planted action
interval aligned to the snippet grid. Background snippets are drawn around
a mean shared by all classes; action snippets around that mean shifted by
``margin`` along a class-specific unit direction.

Hard negatives: each class also has an "idle" direction (the actor standing
still). The annotated interval opens with ``lead_in`` idle snippets, and the
background carries an idle segment of ``idle_len`` snippets. Visually those
idle snippets match across videos of a class, so video-only matching of a
query's idle background against a support's annotated interval gives false
positives; the per-snippet captions tell idle and action apart. Set
``lead_in = idle_len = 0`` for the plain two-mean generator.

Captions and CoE sentences come from fixed templates naming the class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datapack import (
    AnnotationTrack,
    DatasetManifest,
    FeatureSequence,
    TextBundle,
    VideoRecord,
    write_manifest,
)

ACTION_NAMES = (
    "jumping", "swimming", "climbing", "juggling", "rowing", "skating",
    "boxing", "dancing", "throwing", "cycling", "fencing", "diving",
)


@dataclass
class SynthConfig:
    classes: int = 3
    videos_per_class: int = 4
    t: int = 20
    d: int = 8
    margin: float = 4.0
    noise: float = 1.0
    background_norm: float = 4.0
    idle_margin: float = 4.0
    lead_in: int = 0
    idle_len: int = 0
    duration_s: float = 20.0
    min_action_frac: float = 0.2
    max_action_frac: float = 0.5
    # class_id -> split; default spreads classes over train/val/test
    splits: dict[int, str] | None = None
    texts: bool = True

    def validate(self) -> None:
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.t < 1 or self.d < 1:
            raise ValueError("t and d must be positive")
        if self.classes < 1 or self.videos_per_class < 1:
            raise ValueError("classes and videos_per_class must be positive")
        if not 0 < self.min_action_frac <= self.max_action_frac <= 1:
            raise ValueError("need 0 < min_action_frac <= max_action_frac <= 1")
        if self.noise < 0 or self.background_norm < 0 or self.duration_s <= 0:
            raise ValueError("noise and background_norm must be >= 0, duration_s > 0")


def action_name(class_id: int) -> str:
    if class_id < len(ACTION_NAMES):
        return ACTION_NAMES[class_id]
    return f"action{class_id}"


def default_splits(classes: int) -> dict[int, str]:
    if classes == 1:
        return {0: "train"}
    if classes == 2:
        return {0: "train", 1: "val"}
    n_val = max(1, round(0.1 * classes))
    n_test = max(1, round(0.1 * classes))
    n_train = classes - n_val - n_test
    names = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    return dict(enumerate(names))


def class_directions(classes: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal directions when ``classes <= d``, random unit vectors otherwise."""
    if classes <= d:
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        return q.T[:classes].copy()
    dirs = rng.standard_normal((classes, d))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


ACTION, IDLE, SCENE = 2, 1, 0


def caption_texts(name: str, kinds: np.ndarray) -> list[str]:
    templates = {
        ACTION: "a person is moving quickly in the scene",
        IDLE: "a person stands still and waits",
        SCENE: "the scene is quiet with nobody moving",
    }
    return [templates[int(k)] for k in kinds]


def coe_texts(name: str) -> list[str]:
    return [
        "A person stands still and waits in the quiet scene.",
        f"The waiting ends, which causes the person to start {name} in the scene.",
        f"The {name} goes on, leading to the person leaving and the scene turning quiet.",
    ]


def _place_idle_segment(kinds: np.ndarray, start: int, length: int, idle_len: int, rng) -> None:
    """Put an idle run in the background, one snippet clear of the interval."""
    if idle_len <= 0:
        return
    t = len(kinds)
    slots = [
        s for s in range(t - idle_len + 1)
        if s + idle_len < start or s > start + length
    ]
    if slots:
        s = slots[int(rng.integers(len(slots)))]
        kinds[s : s + idle_len] = IDLE


def make_synthetic_dataset(cfg: SynthConfig, rng: np.random.Generator) -> DatasetManifest:
    cfg.validate()
    n_dirs = 2 * cfg.classes if (cfg.lead_in or cfg.idle_len) else cfg.classes
    all_dirs = class_directions(n_dirs, cfg.d, rng)
    dirs = all_dirs[: cfg.classes]
    idle_dirs = all_dirs[cfg.classes :] if n_dirs > cfg.classes else np.zeros_like(dirs)
    bg_mean = rng.standard_normal(cfg.d)
    bg_mean *= cfg.background_norm / max(np.linalg.norm(bg_mean), 1e-12)
    fg_means = bg_mean[None] + cfg.margin * dirs
    idle_means = bg_mean[None] + cfg.idle_margin * idle_dirs

    lo = max(1, int(round(cfg.min_action_frac * cfg.t)))
    hi = max(lo, int(round(cfg.max_action_frac * cfg.t)))
    step = cfg.duration_s / cfg.t
    records = []
    for c in range(cfg.classes):
        name = action_name(c)
        for v in range(cfg.videos_per_class):
            length = int(rng.integers(lo, hi + 1))
            start = int(rng.integers(0, cfg.t - length + 1))
            kinds = np.full(cfg.t, SCENE)
            kinds[start : start + length] = ACTION
            lead = min(cfg.lead_in, length - 1)
            kinds[start : start + lead] = IDLE
            _place_idle_segment(kinds, start, length, cfg.idle_len, rng)
            means = np.stack([bg_mean, idle_means[c], fg_means[c]])
            values = means[kinds]
            values = values + cfg.noise * rng.standard_normal((cfg.t, cfg.d))
            # round through float32 so in-memory and on-disk datasets agree
            values = values.astype(np.float32).astype(np.float64)
            vid = f"c{c:02d}_v{v:03d}"
            texts = TextBundle(caption_texts(name, kinds), coe_texts(name)) if cfg.texts else None
            records.append(
                VideoRecord(
                    vid,
                    FeatureSequence(values, cfg.duration_s),
                    AnnotationTrack([(start * step, (start + length) * step)], c),
                    texts,
                    f"features/{vid}.f32",
                    f"texts/{vid}.json" if texts else None,
                )
            )
    splits = dict(cfg.splits) if cfg.splits else default_splits(cfg.classes)
    return DatasetManifest(records, splits)


def write_synthetic_dataset(cfg: SynthConfig, seed: int, out_dir: str | Path, meta: dict | None = None) -> Path:
    manifest = make_synthetic_dataset(cfg, np.random.default_rng(seed))
    out = Path(out_dir)
    path = write_manifest(manifest, out / "manifest.json", meta)
    manifest.root = out
    return path
