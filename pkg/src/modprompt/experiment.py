"""generate-data -> pretrain -> adapt -> evaluate -> report, each phase skipped when its
artifacts already exist."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import torch

from .config import ExperimentConfig, load_config
from .data import DEFAULT_VOCAB, GenerationConfig, load_dataset, read_manifest, write_dataset
from .evaluation import evaluate_detections, match_detections, retention
from .pipeline import load_pipeline, save_checkpoint
from .plots import overlay_detections, plot_pr
from .report import ExperimentRecord, code_version, write_report
from .train import PretrainConfig, StrategySpec, adapt, pretrain, prepare

log = logging.getLogger(__name__)

SOURCE_MODALITY = "rgb"
N_OVERLAYS = 2


class ExperimentError(RuntimeError):
    pass


def dataset_roots(cfg: ExperimentConfig) -> tuple[Path, Path]:
    root = cfg.data_root
    target = cfg.data["modality"]
    return root / SOURCE_MODALITY, root / (target if target != SOURCE_MODALITY else "rgb-target")


def _ensure_dataset(root: Path, modality: str, splits: dict, seed: int, vocab) -> None:
    if (root / "manifest.json").exists():
        m = read_manifest(root)
        if m.modality != modality or m.split_sizes != splits or m.seed != seed or m.vocab != list(vocab):
            raise ExperimentError(
                f"{root} already holds a different dataset ({m.modality}, {m.split_sizes}, seed {m.seed}); "
                "point data.root somewhere else"
            )
        return
    log.info("writing %s dataset to %s", modality, root)
    write_dataset(GenerationConfig(str(root), modality, splits, tuple(vocab), seed))


def generate_data(cfg: ExperimentConfig) -> tuple[Path, Path]:
    d = cfg.data
    src, tgt = dataset_roots(cfg)
    vocab = list(DEFAULT_VOCAB)
    _ensure_dataset(src, SOURCE_MODALITY, {"train": d["source_train_size"], "test": d["source_test_size"]},
                    d["seed"], vocab)
    _ensure_dataset(tgt, d["modality"], {"train": d["train_size"], "test": d["test_size"]}, d["seed"], vocab)
    return src, tgt


def zeroshot_path(out: Path) -> Path:
    return Path(out) / "zeroshot" / "checkpoint.npz"


def pretrain_phase(cfg: ExperimentConfig, out) -> Path:
    path = zeroshot_path(out)
    if path.exists():
        return path
    src, _ = generate_data(cfg)
    p = cfg.pretrain
    pcfg = PretrainConfig(p["epochs"], p["lr"], p["weight_decay"], p["batch_size"], p["seed"])
    t0 = time.perf_counter()
    pipe, state = pretrain(load_dataset(src, "train"), list(DEFAULT_VOCAB), pcfg)
    wall = time.perf_counter() - t0
    test = load_dataset(src, "test")
    data = prepare(test, pipe.vocab)
    rep = evaluate_detections(_predict(pipe, data.images, cfg), [g for _, g in test], pipe.vocab)
    save_checkpoint(path, pipe, grid=tuple(data.labels.shape[1:]))
    (path.parent / "source_ap_report.json").write_text(
        json.dumps({"ap_report": rep.to_flat(), "wall_clock": wall, "final_loss": state.losses[-1]}, indent=2)
    )
    return path


def _predict(pipe, images, cfg: ExperimentConfig, **kw):
    e = cfg.eval
    return pipe.predict_batch(images, score_threshold=e["score_threshold"], nms_iou=e["nms_iou"],
                              max_detections=e["max_detections"], **kw)


def strategy_spec(cfg: ExperimentConfig, kind: str, residuals: bool) -> StrategySpec:
    o = cfg.optim
    return StrategySpec(kind, residuals, lr=o["lr"], weight_decay=o["weight_decay"], epochs=o["epochs"],
                        batch_size=o["batch_size"], patch_size=cfg.strategy["patch_size"])


def run_dirs(cfg: ExperimentConfig, out) -> list[tuple[StrategySpec, int, Path]]:
    runs = []
    for kind, residuals in cfg.strategy_grid():
        spec = strategy_spec(cfg, kind, residuals)
        for seed in cfg.seeds:
            runs.append((spec, seed, Path(out) / spec.label / str(seed)))
    return runs


def adapt_phase(cfg: ExperimentConfig, out) -> list[Path]:
    zs_path = pretrain_phase(cfg, out)
    _, tgt = generate_data(cfg)
    zeroshot, meta = load_pipeline(zs_path, list(DEFAULT_VOCAB))
    train = None
    done = []
    for spec, seed, run_dir in run_dirs(cfg, out):
        ckpt = run_dir / "checkpoint.npz"
        if not ckpt.exists():
            train = train if train is not None else load_dataset(tgt, "train")
            t0 = time.perf_counter()
            result = adapt(zeroshot, train, spec, seed)
            wall = time.perf_counter() - t0
            save_checkpoint(ckpt, result.pipeline, grid=meta["grid"],
                            extra={"strategy": spec.label, "seed": seed})
            (run_dir / "train_log.json").write_text(json.dumps({
                "losses": result.state.losses, "wall_clock": wall, "trainable": list(result.trainable),
                "frozen_hash": result.frozen_hash_after,
            }))
        done.append(ckpt)
    return done


def evaluate_phase(cfg: ExperimentConfig, out) -> list[ExperimentRecord]:
    adapt_phase(cfg, out)
    src, tgt = generate_data(cfg)
    vocab = list(DEFAULT_VOCAB)
    zeroshot, _ = load_pipeline(zeroshot_path(out), vocab)
    cache = {}
    records = []
    for spec, seed, run_dir in run_dirs(cfg, out):
        rec_path = run_dir / "record.json"
        if rec_path.exists():
            records.append(ExperimentRecord.load(rec_path))
            continue
        if not cache:
            for name, root in (("target", tgt), ("source", src)):
                samples = load_dataset(root, "test")
                cache[name] = (samples, prepare(samples, vocab).images)
        t0 = time.perf_counter()
        pipe, _ = load_pipeline(run_dir / "checkpoint.npz", vocab)
        samples, images = cache["target"]
        gts = [g for _, g in samples]
        dets = _predict(pipe, images, cfg)
        rep = evaluate_detections(dets, gts, vocab)
        (run_dir / "ap_report.json").write_text(json.dumps(rep.to_flat(), indent=2, sort_keys=True))
        src_samples, src_images = cache["source"]
        ret = retention(pipe, src_samples, zeroshot, images=src_images)
        (run_dir / "retention.json").write_text(json.dumps(ret, indent=2, sort_keys=True))
        m = match_detections(dets, gts, 0.5, vocab)
        for k, name in enumerate(vocab):
            n_gt = sum(c == name for g in gts for c in g.categories)
            if n_gt:
                plot_pr(m.flags[m.category == k], n_gt, run_dir / f"pr_{name}.png",
                        title=f"{spec.label} seed {seed}: {name} @ IoU 0.5")
        for i in range(min(N_OVERLAYS, len(samples))):
            shown = [d for d in dets[i] if d.score >= 0.3]
            overlay_detections(samples[i][0], shown, gts[i], run_dir / f"overlay_{i}.png", vocab)
        log_path = run_dir / "train_log.json"
        train_wall = json.loads(log_path.read_text())["wall_clock"] if log_path.exists() else 0.0
        record = ExperimentRecord(
            config=cfg.snapshot(), code_version=code_version(), strategy=spec.label, seed=seed,
            modality=cfg.data["modality"], ap_report=rep.to_flat(), retention=ret,
            wall_clock=train_wall + time.perf_counter() - t0,
        )
        record.save(rec_path)
        records.append(record)
    return records


def run_experiment(config_path, out, cfg: ExperimentConfig | None = None) -> Path:
    cfg = cfg or load_config(config_path)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    records = evaluate_phase(cfg, out)
    write_report(out, records)
    return out
