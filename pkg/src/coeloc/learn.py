"""Balanced snippet loss, episodic training and gradient checking."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import locate
from .datapack import DatasetManifest, sample_episode, sample_episodes
from .model import EpisodeTensors, FewShotLocalizer, ModelConfig, prepare_episode
from .textfuse import EmbeddingProvider

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class LossConfig:
    # 1e-6 would bias k by ~5e-7 relative; the 8 ln 2 hand-check needs < 1e-9
    epsilon: float = 1e-10
    clamp_delta: float = 1e-7

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.clamp_delta < 0.5:
            raise ValueError("clamp_delta must lie in (0, 0.5)")


def balance_coeffs(y, epsilon: float = 1e-10) -> tuple[float, float]:
    """Class-balance weights ``(k_fg, k_bg)``, each capped at the snippet count."""
    y = np.asarray(y, dtype=np.float64)
    t = float(y.size)
    t_fg = float(y.sum())
    t_bg = t - t_fg
    return min(t, t / (t_fg + epsilon)), min(t, t / (t_bg + epsilon))


def balanced_loss(p_hat: torch.Tensor, y: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    """Weighted foreground + background cross-entropy, summed over snippets."""
    cfg = cfg or LossConfig()
    p_hat = torch.as_tensor(p_hat)
    y = torch.as_tensor(y, dtype=p_hat.dtype)
    if p_hat.shape != y.shape:
        raise ValueError(f"prediction {tuple(p_hat.shape)} and mask {tuple(y.shape)} lengths differ")
    k_fg, k_bg = balance_coeffs(y.detach().cpu().numpy(), cfg.epsilon)
    p = p_hat.clamp(cfg.clamp_delta, 1 - cfg.clamp_delta)
    l_fg = -k_fg * (y * torch.log(p)).sum()
    l_bg = -k_bg * ((1 - y) * torch.log(1 - p)).sum()
    return l_fg + l_bg


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 30
    episodes_per_epoch: int = 20
    batch_size: int = 4
    seed: int = 0
    t: int = 20
    shots: int = 2
    val_split: str = "val"
    val_episodes: int = 20
    eval_every: int = 1
    betas: tuple[float, float] = (0.9, 0.999)
    # "rotate": per-episode rotation about the mean feature axis; "rotate_full": any rotation
    augment: str = "none"

    def __post_init__(self) -> None:
        if self.augment not in ("none", "rotate", "rotate_full"):
            raise ValueError(f"unknown augmentation {self.augment!r}")
        for name in ("learning_rate", "epochs", "episodes_per_epoch", "batch_size", "t", "shots", "val_episodes"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class ModelState:
    model: FewShotLocalizer
    seed: int
    step: int = 0
    config_hash: str = ""
    rng_state: dict = field(default_factory=dict)


def config_hash(*parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def mean_axis(manifest: DatasetManifest, split: str = "train") -> np.ndarray:
    """Unit direction of the mean snippet feature over ``split``."""
    rows = [r.features.values for r in manifest.records if manifest.split_of(r) == split]
    mean = np.concatenate(rows).mean(axis=0)
    return mean / np.linalg.norm(mean)


def axis_preserving_rotation(axis: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Haar-random orthogonal matrix ``R`` with ``axis @ R == axis``.

    Acts as a random rotation on the complement of ``axis``; applied to all
    videos of an episode it turns one training class into a fresh virtual
    class while keeping the shared mean component in place.
    """
    d = axis.shape[0]
    basis, _ = np.linalg.qr(np.column_stack([axis, rng.standard_normal((d, d - 1))]))
    comp = basis[:, 1:]  # orthonormal basis of the complement
    q, r = np.linalg.qr(rng.standard_normal((d - 1, d - 1)))
    q = q * np.sign(np.diag(r))
    return np.outer(axis, axis) + comp @ q @ comp.T


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random orthogonal ``d x d`` matrix."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def rotate_episode(ep: EpisodeTensors, rot: np.ndarray) -> EpisodeTensors:
    r = torch.as_tensor(rot, dtype=ep.query.dtype)
    return EpisodeTensors(
        ep.episode_id, ep.class_id, ep.query @ r, ep.supports @ r, ep.support_masks,
        ep.query_mask, ep.captions, ep.coe, ep.duration_s, ep.gts,
    )


def evaluate_model(
    model: FewShotLocalizer | Callable[[EpisodeTensors], np.ndarray],
    episodes: Sequence[EpisodeTensors],
    cfg: locate.EvalConfig,
    oracle: bool = False,
) -> tuple[dict, list[locate.EpisodeResult]]:
    """Run inference + post-processing on prepared episodes and score them.

    ``oracle=True`` feeds the ground-truth query mask as the probability
    vector (debug path; should score a perfect mAP).
    """
    predict = getattr(model, "predict", model)
    results = []
    for ep in episodes:
        p_hat = ep.query_mask.double().numpy() if oracle else predict(ep)
        props = locate.localize(p_hat, cfg, ep.duration_s)
        results.append(locate.EpisodeResult(ep.episode_id, ep.class_id, props, ep.gts))
    return locate.score_results(results, cfg), results


def train(
    manifest: DatasetManifest,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    provider: EmbeddingProvider,
    eval_cfg: locate.EvalConfig | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[ModelState, list[dict]]:
    """Episodic training with Adam; one update per batch of episodes (mean loss)."""
    eval_cfg = eval_cfg or locate.EvalConfig()
    torch.set_num_threads(1)
    rng = np.random.default_rng(train_cfg.seed)
    model = FewShotLocalizer(model_cfg, seed=train_cfg.seed)
    state = ModelState(model, train_cfg.seed, config_hash=config_hash(model_cfg.to_dict(), asdict(train_cfg), asdict(loss_cfg)))
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate, betas=train_cfg.betas)

    val = []
    if manifest.classes(train_cfg.val_split):
        val = [
            prepare_episode(ep, provider, model.dtype)
            for ep in sample_episodes(
                manifest, train_cfg.val_split, train_cfg.shots, train_cfg.val_episodes,
                seed=train_cfg.seed + 1, t=train_cfg.t,
            )
        ]

    axis = mean_axis(manifest) if train_cfg.augment == "rotate" else None
    metrics = []
    ep_counter = 0
    for epoch in range(1, train_cfg.epochs + 1):
        model.train()
        losses = []
        remaining = train_cfg.episodes_per_epoch
        while remaining > 0:
            n = min(train_cfg.batch_size, remaining)
            remaining -= n
            opt.zero_grad()
            batch_loss = 0.0
            for _ in range(n):
                ep = sample_episode(
                    manifest, "train", train_cfg.shots, rng, t=train_cfg.t,
                    episode_id=f"train-{ep_counter:06d}",
                )
                ep_counter += 1
                tensors = prepare_episode(ep, provider, model.dtype)
                if axis is not None:
                    tensors = rotate_episode(tensors, axis_preserving_rotation(axis, rng))
                elif train_cfg.augment == "rotate_full":
                    tensors = rotate_episode(tensors, random_rotation(tensors.query.shape[-1], rng))
                loss = balanced_loss(model(tensors), tensors.query_mask, loss_cfg)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss in episode {ep.episode_id}")
                (loss / n).backward()
                batch_loss += loss.item()
                losses.append(loss.item())
            opt.step()
            state.step += 1
            for p in model.parameters():
                if not torch.isfinite(p).all():
                    raise TrainingError(f"non-finite parameters after step {state.step}")
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "val_map": None}
        if val and (epoch % train_cfg.eval_every == 0 or epoch == train_cfg.epochs):
            model.eval()
            report, _ = evaluate_model(model, val, eval_cfg)
            record["val_map"] = report["map_at"]["0.50"]
        metrics.append(record)
        log.info("epoch %d loss %.4f val_map %s", epoch, record["loss"], record["val_map"])
        if on_epoch:
            on_epoch(record)
    state.rng_state = rng.bit_generator.state
    return state, metrics


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: ModelState, directory: str | os.PathLike, extra: dict | None = None) -> Path:
    """Each parameter as ``params/<name>.f32`` + sidecar, plus ``header.json``."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    names = []
    for name, param in state.model.named_parameters():
        arr = param.detach().cpu().double().numpy()
        rows = int(np.prod(arr.shape[:-1])) if arr.ndim > 1 else 1
        # names contain dots ("stpe.conv_w.0"), so append suffixes rather than replace
        base = directory / "params"
        (base / f"{name}.f32").write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        sidecar = {"t": rows, "d": int(arr.shape[-1]), "shape": list(arr.shape)}
        (base / f"{name}.json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")
        names.append(name)
    header = {
        "step": state.step,
        "seed": state.seed,
        "config_hash": state.config_hash,
        "model_config": state.model.cfg.to_dict(),
        "parameters": names,
        **(extra or {}),
    }
    path = directory / "header.json"
    path.write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(directory: str | os.PathLike) -> ModelState:
    directory = Path(directory)
    header_path = directory / "header.json"
    if not header_path.exists():
        raise FileNotFoundError(f"checkpoint header not found: {header_path}")
    header = json.loads(header_path.read_text())
    model = FewShotLocalizer(ModelConfig(**header["model_config"]), seed=header["seed"])
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name in header["parameters"]:
            base = directory / "params"
            meta = json.loads((base / f"{name}.json").read_text())
            raw = np.frombuffer((base / f"{name}.f32").read_bytes(), dtype="<f4")
            shape = tuple(meta["shape"])
            if raw.size != int(np.prod(shape)):
                raise ValueError(f"parameter {name}: payload does not match shape {shape}")
            params[name].copy_(torch.from_numpy(raw.reshape(shape).copy()))
    return ModelState(model, header["seed"], header["step"], header["config_hash"])


def write_metrics(path: str | os.PathLike, metrics: Sequence[dict], extra: dict | None = None) -> None:
    with open(path, "w") as fh:
        for rec in metrics:
            fh.write(json.dumps({**rec, **(extra or {})}, sort_keys=True) + "\n")


def read_metrics(path: str | os.PathLike) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def flagged(self) -> list[str]:
        return [name for name, err in self.errors.items() if err > self.tolerance]

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def ok(self) -> bool:
        return not self.flagged


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``max |a - n| / max(max|a|, max|n|, floor)`` over one parameter group."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def finite_difference_check(
    model: FewShotLocalizer,
    episode: EpisodeTensors,
    loss_cfg: LossConfig | None = None,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    corrupt: dict[str, float] | None = None,
    objective: Callable[[FewShotLocalizer, EpisodeTensors], torch.Tensor] | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of the loss with central differences (float64).

    ``corrupt`` maps parameter names to a constant added to their analytic
    gradient (negative control).
    """
    loss_cfg = loss_cfg or LossConfig()
    model = copy.deepcopy(model).double()
    episode = episode.to(torch.float64)
    if objective is None:
        def objective(m, ep):
            return balanced_loss(m(ep), ep.query_mask, loss_cfg)

    model.zero_grad()
    objective(model, episode).backward()
    errors = {}
    for name, param in model.named_parameters():
        analytic = param.grad.detach().clone().numpy() if param.grad is not None else np.zeros(param.shape)
        if corrupt and name in corrupt:
            analytic = analytic + corrupt[name]
        numeric = np.zeros(param.shape)
        flat = param.data.view(-1)
        num_flat = numeric.reshape(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                plus = objective(model, episode).item()
                flat[i] = orig - step
                minus = objective(model, episode).item()
                flat[i] = orig
                num_flat[i] = (plus - minus) / (2 * step)
        errors[name] = relative_error(analytic, numeric)
    return GradCheckReport(errors, tolerance)
