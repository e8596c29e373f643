"""Command-line entry point.

Exit codes: 0 success, 1 file or data error, 2 configuration error,
3 outputs already exist (pass ``--overwrite`` to replace them).
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import coegen, learn
from .clients import ClientError, EchoChatClient, HttpChatClient, ScriptedChatClient
from .config import ClientSection, ConfigError, RunConfig, load_config, parse_config
from .datapack import (
    DataError,
    DatasetManifest,
    load_manifest,
    read_texts,
    sample_episodes,
    write_texts,
)
from .locate import write_proposal_dump
from .model import prepare_episode
from .synth import make_synthetic_dataset, write_synthetic_dataset
from .textfuse import HashEmbeddingProvider, HttpEmbeddingProvider

log = logging.getLogger("coeloc")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_EXISTS = 0, 1, 2, 3


class OutputExists(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    doc = cfg.model_dump(mode="json")
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "shots", None) is not None:
        doc["learn"]["shots"] = args.shots
    if getattr(args, "t_snippets", None) is not None:
        doc["data"]["t_snippets"] = args.t_snippets
    return parse_config(doc)


def _meta(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed}


def _claim(paths: list[Path], overwrite: bool) -> None:
    existing = [p for p in paths if p.exists()]
    if existing and not overwrite:
        raise OutputExists(f"output exists: {existing[0]} (use --overwrite)")
    for p in existing:
        shutil.rmtree(p) if p.is_dir() else p.unlink()


def _base_dir(args) -> Path:
    return Path(args.config).parent if args.config else Path.cwd()


def _manifest(args, cfg: RunConfig) -> DatasetManifest:
    path = getattr(args, "manifest", None) or cfg.data.manifest
    if path:
        return load_manifest(path)
    return make_synthetic_dataset(cfg.synth_config(), np.random.default_rng(cfg.seed))


def _provider(cfg: RunConfig):
    emb = cfg.embedding
    if emb.kind == "hash":
        return HashEmbeddingProvider(cfg.model.text_dim, emb.mode)
    if not emb.url:
        raise ConfigError("embedding.url: required when embedding.kind is http")
    return HttpEmbeddingProvider(emb.url, cfg.model.text_dim, emb.frames_url, emb.timeout_s, emb.retries)


def _client(section: ClientSection | None, role: str, base: Path):
    if section is None:
        raise ConfigError(f"coegen.{role}: client configuration is missing")
    if section.kind == "echo":
        return EchoChatClient(role)
    if section.kind == "scripted":
        if not section.script:
            raise ConfigError(f"coegen.{role}.script: required for scripted clients")
        path = Path(section.script)
        return ScriptedChatClient.from_file(path if path.is_absolute() else base / path, role=role)
    if not section.url:
        raise ConfigError(f"coegen.{role}.url: required for http clients")
    return HttpChatClient(section.url, role, section.api_key_env, section.timeout_s, section.retries)


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    _claim([out / "manifest.json", out / "features", out / "texts"], args.overwrite)
    path = write_synthetic_dataset(cfg.synth_config(), cfg.seed, out, _meta(cfg))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    _claim([out / "checkpoint", out / "metrics.jsonl"], args.overwrite)
    manifest = _manifest(args, cfg)
    dim = manifest.records[0].features.dim
    state, metrics = learn.train(
        manifest,
        cfg.localizer_config(dim),
        cfg.train_config(),
        cfg.loss_config(),
        _provider(cfg),
        cfg.eval_config(),
    )
    state.config_hash = cfg.hash()
    out.mkdir(parents=True, exist_ok=True)
    learn.save_checkpoint(state, out / "checkpoint", {"meta": _meta(cfg)})
    learn.write_metrics(out / "metrics.jsonl", metrics, {"meta": _meta(cfg)})
    last = metrics[-1]
    print(f"epochs {len(metrics)} final loss {last['loss']:.4f} val_map@0.5 {last['val_map']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = None
    shots = cfg.learn.shots
    if not args.oracle_probs:
        if not args.checkpoint:
            raise ConfigError("--checkpoint: required unless --oracle-probs is given")
        try:
            state = learn.load_checkpoint(args.checkpoint)
        except FileNotFoundError as exc:
            raise ConfigError(f"--checkpoint: {exc}") from exc
        model = state.model
        if args.shots is not None and args.shots != model.cfg.shots:
            raise ConfigError(f"--shots {args.shots} does not match the checkpoint ({model.cfg.shots})")
        shots = model.cfg.shots
    out = Path(args.out)
    _claim([out / "report.json", out / "proposals.jsonl"], args.overwrite)
    manifest = _manifest(args, cfg)
    provider = _provider(cfg)
    episodes = sample_episodes(
        manifest, cfg.locate.split, shots, cfg.locate.episodes, seed=cfg.seed + 2, t=cfg.data.t_snippets
    )
    tensors = [prepare_episode(ep, provider) for ep in episodes]
    report, results = learn.evaluate_model(model, tensors, cfg.eval_config(), oracle=args.oracle_probs)
    doc = {
        **report,
        **_meta(cfg),
        "shots": shots,
        "t_snippets": cfg.data.t_snippets,
        "episodes": len(tensors),
        "split": cfg.locate.split,
        "oracle_probs": bool(args.oracle_probs),
        "checkpoint": str(args.checkpoint) if args.checkpoint else None,
    }
    _write_json(out / "report.json", doc)
    write_proposal_dump(out / "proposals.jsonl", results, {"meta": _meta(cfg)})
    print(f"mAP@0.5 {report['map_at']['0.50']:.4f} mean mAP {report['mean_map']:.4f}")
    return EXIT_OK


def cmd_gentext(args) -> int:
    cfg = _config(args)
    base = _base_dir(args)
    clients = coegen.Clients(_client(cfg.coegen.vlm, "vlm", base), _client(cfg.coegen.llm, "llm", base))
    out = Path(args.out)
    _claim([out / "texts", out / "review_queue.jsonl", out / "gentext_report.json"], args.overwrite)
    manifest = load_manifest(args.manifest)
    provider = _provider(cfg)
    vcfg = cfg.verification_config()
    queue = coegen.HumanReviewQueue(out / "review_queue.jsonl", _meta(cfg))
    videos = [coegen.VideoInput(r.video_id, coegen.sample_frames(r, vcfg.fps), r.features.duration_s) for r in manifest.records]
    outcomes = coegen.process_videos(
        videos, clients, provider, vcfg, queue, cfg.coegen.prompts, cfg.coegen.parallelism
    )
    summary = []
    for video, (doc, report) in zip(videos, outcomes):
        entry = {"video_id": video.video_id, **coegen.report_to_dict(report)}
        if doc is not None:
            captions = coegen.generate_captions(clients.vlm, video.frames)
            path = write_texts(out / "texts" / f"{video.video_id}.json", coegen.texts_from_document(captions, doc), _meta(cfg))
            entry["texts"] = str(path.relative_to(out))
        summary.append(entry)
    queue_path = out / "review_queue.jsonl"
    if not queue_path.exists():
        queue_path.parent.mkdir(parents=True, exist_ok=True)
        queue_path.touch()
    written = sum("texts" in e for e in summary)
    _write_json(out / "gentext_report.json", {**_meta(cfg), "videos": summary, "texts_written": written, "queued": len(queue)})
    print(f"texts written {written}/{len(videos)}, queued for review {len(queue)}")
    return EXIT_OK


def _texts_files(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(path.glob("*.json"))
    if not path.exists():
        raise FileNotFoundError(f"texts not found: {path}")
    return [path]


def cmd_verify(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    _claim([out / "verify_report.json"], args.overwrite)
    manifest = load_manifest(args.manifest)
    by_id = {r.video_id: r for r in manifest.records}
    provider = _provider(cfg)
    vcfg = cfg.verification_config()
    items = []
    for path in _texts_files(Path(args.texts)):
        record = by_id.get(path.stem)
        if record is None:
            raise DataError(f"{path}: no video {path.stem!r} in the manifest")
        texts = read_texts(path)
        frames = coegen.sample_frames(record, vcfg.fps)
        passed, issues, scored, reason = coegen.verify(coegen.join_sentences(texts.coe_sentences), frames, provider, vcfg)
        items.append({
            "video_id": record.video_id,
            "pass": passed,
            "filter_reason": reason,
            "flagged": issues,
            "sub_sentences": [{"text": s, "score": sc, "flagged": f} for s, sc, f in scored],
        })
    n_pass = sum(i["pass"] for i in items)
    _write_json(out / "verify_report.json", {**_meta(cfg), "alpha": vcfg.alpha, "items": items, "passed": n_pass})
    print(f"verified {len(items)} texts, {n_pass} pass at alpha={vcfg.alpha}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    """Labels file: JSONL ``{"video_id", "text", "consistent": bool}`` per line."""
    cfg = _config(args)
    out = Path(args.out)
    _claim([out / "calibration.json"], args.overwrite)
    manifest = load_manifest(args.manifest)
    by_id = {r.video_id: r for r in manifest.records}
    provider = _provider(cfg)
    vcfg = cfg.verification_config()
    scores, labels = [], []
    for line in Path(args.labels).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["video_id"] not in by_id:
            raise DataError(f"labels: unknown video {rec['video_id']!r}")
        frames = coegen.sample_frames(by_id[rec["video_id"]], vcfg.fps)
        scores.append(coegen.consistency_scores([rec["text"]], frames, provider, vcfg)[0][1])
        labels.append(bool(rec["consistent"]))
    if not scores:
        raise DataError("labels file is empty")
    alpha, table = coegen.calibrate_alpha(scores, labels, cfg.coegen.alpha_grid)
    _write_json(out / "calibration.json", {**_meta(cfg), "alpha": alpha, "sweep": table, "n_items": len(scores)})
    print(f"calibrated alpha {alpha}")
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg = _config(args)
    # PNG text chunks carry the provenance
    png_meta = {"Description": json.dumps(_meta(cfg), sort_keys=True)}
    out = Path(args.out)
    targets = [out / "loss.png", out / "val_map.png"] + ([out / "map_vs_shot.png"] if args.reports else [])
    _claim(targets, args.overwrite)
    out.mkdir(parents=True, exist_ok=True)
    runs = [(Path(p), learn.read_metrics(p)) for p in args.metrics]
    for key, ylabel in (("loss", "training loss"), ("val_map", "validation mAP@0.5")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for path, recs in runs:
            pts = [(r["epoch"], r[key]) for r in recs if r.get(key) is not None]
            if pts:
                ax.plot(*zip(*pts), marker="o", ms=3, label=path.parent.name or path.stem)
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize="small")
        fig.tight_layout()
        fig.savefig(out / f"{key}.png", dpi=100, metadata=png_meta)
        plt.close(fig)
    if args.reports:
        reports = [json.loads(Path(p).read_text()) for p in args.reports]
        reports.sort(key=lambda r: r["shots"])
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar([str(r["shots"]) for r in reports], [r["map_at"]["0.50"] for r in reports])
        ax.set_xlabel("shots")
        ax.set_ylabel("mAP@0.5")
        ax.set_ylim(0, 1)
        fig.tight_layout()
        fig.savefig(out / "map_vs_shot.png", dpi=100, metadata=png_meta)
        plt.close(fig)
    print("wrote " + ", ".join(p.name for p in targets))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coeloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, out_default):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
        p.add_argument("--seed", type=int)
        p.add_argument("--shots", type=int)
        p.add_argument("--t-snippets", dest="t_snippets", type=int)
        p.add_argument("--out", default=out_default)
        p.add_argument("--overwrite", action="store_true")
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "write a synthetic dataset", "data")
    p = add("train", cmd_train, "episodic training", "run")
    p.add_argument("--manifest", help="dataset manifest (synthesized in memory when absent)")
    p = add("eval", cmd_eval, "evaluate a checkpoint on sampled episodes", "eval")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--oracle-probs", action="store_true", help="debug: score the ground-truth masks")
    p = add("gentext", cmd_gentext, "generate and verify CoE texts", "gentext")
    p.add_argument("--manifest", required=True)
    p = add("verify", cmd_verify, "re-score existing texts files", "verify")
    p.add_argument("--manifest", required=True)
    p.add_argument("--texts", required=True, help="texts file or directory of them")
    p = add("calibrate", cmd_calibrate, "sweep the consistency threshold on labeled texts", "calibrate")
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True)
    p = add("plot", cmd_plot, "plot metric files and eval reports", "plots")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--reports", nargs="*", default=[])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OutputExists as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_EXISTS
    except (OSError, DataError, json.JSONDecodeError, KeyError, ClientError, coegen.StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
