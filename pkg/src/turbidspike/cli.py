"""Command-line pipeline: simulate -> preprocess -> train -> evaluate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, PipelineConfig, RunManifest, finish_manifest, load_config, start_manifest
from .events import EventFormatError, SegmentationError, read_events, write_events
from .idx import IdxFormatError, load_labeled_images, read_idx, write_idx
from .pipeline import prepare_mask, preprocess_stream, simulate_sample, target_image, tensor_batch
from .preprocess import apply_filters, read_tensor_archive, write_tensor_archive

log = logging.getLogger("turbidspike")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- simulate

def _sample_name(index: int, kind: str) -> str:
    return f"{index:05d}_{kind}.evt"


def _simulate_one(args):
    cfg, mask, index, out_dir = args
    paths = []
    for kind, clear in (("scattered", False), ("clear", True)):
        path = Path(out_dir) / _sample_name(index, kind)
        write_events(simulate_sample(cfg, mask, index, clear=clear), path)
        paths.append(path)
    return paths


def cmd_simulate(cfg: PipelineConfig, out_dir, images=None, labels=None) -> Path:
    """One scattered and one clear-path event file per dataset image, plus masks and labels."""
    images = images or cfg.run.dataset_images
    labels = labels or cfg.run.dataset_labels or None
    if not images:
        raise ConfigError("no dataset given (run.dataset_images or --images)")
    if not Path(images).exists():
        raise DataError(f"dataset {images} not found")
    data = load_labeled_images(images, labels)
    if cfg.run.limit:
        data = data.subset(np.arange(min(cfg.run.limit, len(data))))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs = [images] + ([labels] if labels else [])
    manifest = start_manifest("simulate", cfg, {"run": cfg.run.seed}, inputs)

    shape = tuple(cfg.scene.detector_shape)
    masks = np.stack([prepare_mask(img, shape, cfg.scene.binarize) for img in data.images]).astype(np.uint8)
    work = [(cfg, masks[i].astype(bool), i, out) for i in range(len(masks))]
    if cfg.run.jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=cfg.run.jobs) as pool:
            written = list(pool.map(_simulate_one, work))
    else:
        written = [_simulate_one(w) for w in work]
    write_idx(masks, out / "masks.idx")
    write_idx(data.labels.astype(np.uint8), out / "labels.idx")
    outputs = [p for pair in written for p in pair] + [out / "masks.idx", out / "labels.idx"]
    log.info("simulated %d samples into %s", len(masks), out)
    return finish_manifest(manifest, out, outputs)


# -------------------------------------------------------------- preprocess

def _preprocess_one(args):
    cfg, path = args
    return preprocess_stream(cfg, read_events(path))


def cmd_preprocess(cfg: PipelineConfig, in_dir, out_dir) -> Path:
    """Tensor archives for the scattered and clear recordings plus binned target images."""
    src = Path(in_dir)
    if not (src / "masks.idx").exists():
        raise DataError(f"{src} holds no simulated samples (masks.idx missing)")
    masks = read_idx(src / "masks.idx") > 0
    labels = read_idx(src / "labels.idx") if (src / "labels.idx").exists() else np.zeros(len(masks), np.int64)
    if tuple(masks.shape[1:]) != tuple(cfg.scene.detector_shape):
        raise DataError("simulated detector grid differs from the configured one")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    event_files = [src / _sample_name(i, k) for k in ("scattered", "clear") for i in range(len(masks))]
    manifest = start_manifest("preprocess", cfg, {"run": cfg.run.seed}, [src / "masks.idx", *event_files])
    manifest.seeds["data_digest"] = cfg.data_digest()

    outputs = []
    for kind in ("scattered", "clear"):
        work = [(cfg, src / _sample_name(i, kind)) for i in range(len(masks))]
        if cfg.run.jobs > 1 and len(work) > 1:
            with ProcessPoolExecutor(max_workers=cfg.run.jobs) as pool:
                tensors = list(pool.map(_preprocess_one, work))
        else:
            tensors = [_preprocess_one(w) for w in work]
        path = out / f"{kind}.spt"
        write_tensor_archive(path, tensors, labels)
        outputs.append(path)
    targets = np.stack([target_image(m, cfg.preprocess.bins) for m in masks]).astype(np.float32)
    write_idx(targets, out / "targets.idx")
    outputs.append(out / "targets.idx")
    return finish_manifest(manifest, out, outputs)


def cmd_filter(cfg: PipelineConfig, in_file, out_file) -> Path:
    """Apply the configured filter chain to a single event file."""
    stream = read_events(in_file)
    pre = cfg.preprocess
    filtered = apply_filters(stream, pre.filters, pre.filter_params())
    write_events(filtered, out_file)
    log.info("kept %d of %d events", len(filtered), len(stream))
    return Path(out_file)


# ------------------------------------------------------------------ train

def _split(n: int, cfg: PipelineConfig):
    test, val = cfg.run.test_count, cfg.run.val_count
    n_train = n - test - val
    if n_train < 1:
        raise ConfigError(f"{n} samples leave nothing to train on (test {test}, val {val})")
    return np.arange(n_train), np.arange(n_train, n_train + val), np.arange(n - test, n)


def _load_tensors(cfg: PipelineConfig, tensor_dir):
    src = Path(tensor_dir)
    if not (src / "scattered.spt").exists():
        raise DataError(f"{src} holds no tensor archive")
    scattered, labels = read_tensor_archive(src / "scattered.spt")
    if not scattered:
        raise DataError("empty tensor archive")
    x = tensor_batch(scattered)
    if x.shape[1] != cfg.train.time_steps or tuple(x.shape[3:]) != tuple(cfg.preprocess.bins):
        raise DataError(f"tensor geometry {x.shape[1:]} does not match the configuration")
    if cfg.train.loss == "van_rossum":
        clear, _ = read_tensor_archive(src / "clear.spt")
        y = tensor_batch(clear)
    else:
        y = read_idx(src / "targets.idx").astype(np.float32)
    manifest_path = src / "manifest.json"
    digest = RunManifest.read(manifest_path).seeds.get("data_digest", "") if manifest_path.exists() else ""
    return x, y, labels, digest


def cmd_train(cfg: PipelineConfig, tensor_dir, out_dir, resume=None) -> Path:
    """Train the SAE, writing a checkpoint per epoch, the final checkpoint and the loss CSV."""
    from .training import bptt_train, load_checkpoint, save_checkpoint, write_loss_history

    x, y, _, data_digest = _load_tensors(cfg, tensor_dir)
    train_idx, val_idx, _ = _split(len(x), cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs = [Path(tensor_dir) / "scattered.spt"]
    manifest = start_manifest("train", cfg, {"run": cfg.run.seed, "train": cfg.train.seed}, inputs)
    extra = {"data_digest": data_digest, "config_digest": cfg.digest()}
    val = (x[val_idx], y[val_idx]) if len(val_idx) else None

    state = None
    history = []
    if resume is not None:
        ckpt = load_checkpoint(resume, cfg.sae_config())
        state = ckpt.to_result()
        history = list(ckpt.extra.get("history", []))
        state.history = [tuple(h) for h in history]

    written = []

    def on_epoch(result):
        extra["history"] = [list(h) for h in result.history]
        path = out / f"epoch_{result.epoch:03d}.nci"
        save_checkpoint(path, result, cfg.train, extra)
        written.append(path)

    result = bptt_train(x[train_idx], y[train_idx], cfg.train, sae_cfg=cfg.sae_config(), val=val,
                        resume=state, on_epoch=on_epoch)
    extra["history"] = [list(h) for h in result.history]
    final = out / "checkpoint.nci"
    save_checkpoint(final, result, cfg.train, extra)
    write_loss_history(result.history, out / "loss.csv")
    return finish_manifest(manifest, out, [*written, final, out / "loss.csv"])


# --------------------------------------------------------------- evaluate

def cmd_evaluate(cfg: PipelineConfig, checkpoint, tensor_dir, out_dir) -> Path:
    """Score held-out samples and write the report, image grid and spike rasters."""
    from .metrics import evaluate_batch, raster_export, reconstruct_spikes
    from .training import load_checkpoint

    ckpt = load_checkpoint(checkpoint, cfg.sae_config())
    x, _, labels, data_digest = _load_tensors(cfg, tensor_dir)
    targets = read_idx(Path(tensor_dir) / "targets.idx").astype(np.float32)
    _, _, test_idx = _split(len(x), cfg)
    if not len(test_idx):
        test_idx = np.arange(len(x))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = start_manifest("evaluate", cfg, {"run": cfg.run.seed}, [checkpoint, Path(tensor_dir) / "scattered.spt"])
    model = ckpt.build_model()
    model.eval()
    report = evaluate_batch(model, x[test_idx], targets[test_idx], test_idx.tolist(), out,
                            config_digest=data_digest, expected_digest=ckpt.extra.get("data_digest", ""))
    first = int(test_idx[0])
    spikes = reconstruct_spikes(model, x[first : first + 1])[0]
    raster_export({"input": x[first].transpose(1, 0, 2, 3), "output": spikes}, out / "raster.csv")
    (out / "summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    timing = {"per_sample_ms": report.inference_ms, "mean_ms": float(np.mean(report.inference_ms))}
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    log.info("inference %.2f ms per sample", timing["mean_ms"])
    log.info("SSIM input %.4f recon %.4f | MSE input %.4f recon %.4f",
             report.mean("ssim_input"), report.mean("ssim_recon"),
             report.mean("mse_input"), report.mean("mse_recon"))
    outputs = [out / n for n in ("report.csv", "grid.pgm", "raster.csv", "summary.json")]
    return finish_manifest(manifest, out, outputs)


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("--jobs", type=int, help="worker processes (overrides run.jobs)")
    common.add_argument("--seed", type=int, help="master seed (overrides run.seed and train.seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="turbidspike", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="scatter + DVS simulation of a dataset")
    p.add_argument("out", type=Path)
    p.add_argument("--images", help="IDX image file (overrides run.dataset_images)")
    p.add_argument("--labels", help="IDX label file")

    p = sub.add_parser("preprocess", parents=[common], help="ROI, filters and binning into tensor archives")
    p.add_argument("input", type=Path, help="simulate output directory, or one event file with --filter-only")
    p.add_argument("out", type=Path)
    p.add_argument("--filter-only", action="store_true", help="filter a single event file into OUT")

    p = sub.add_parser("train", parents=[common], help="train the spiking autoencoder")
    p.add_argument("tensors", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on held-out tensors")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("tensors", type=Path)
    p.add_argument("out", type=Path)

    p = sub.add_parser("config", parents=[common], help="configuration utilities")
    p.add_argument("action", choices=["dump", "digest"])
    return parser


def _resolve_config(args) -> PipelineConfig:
    overrides = list(args.overrides)
    if args.jobs is not None:
        overrides.append(f"run.jobs={args.jobs}")
    if args.seed is not None:
        overrides += [f"run.seed={args.seed}", f"train.seed={args.seed}"]
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    from .metrics import DigestMismatch
    from .training import CheckpointError, NumericFailure

    try:
        cfg = _resolve_config(args)
        if args.command == "config":
            print(cfg.dumps() if args.action == "dump" else cfg.digest(), end="" if args.action == "dump" else "\n")
        elif args.command == "simulate":
            cmd_simulate(cfg, args.out, args.images, args.labels)
        elif args.command == "preprocess":
            if args.filter_only:
                cmd_filter(cfg, args.input, args.out)
            else:
                cmd_preprocess(cfg, args.input, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.tensors, args.out, args.resume)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint, args.tensors, args.out)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NumericFailure, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, DigestMismatch, CheckpointError, EventFormatError, SegmentationError,
            IdxFormatError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
