"""Command-line entry point: anchors, train, eval, detect, bench, selfcheck.

Exit codes: 0 success, 1 operational failure, 2 invalid input.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .anchors import kmeans_anchors, mean_best_iou
from .config import ConfigError, RunConfig, scaled_default_anchors
from .data import AnnotationError, PPMError, letterbox_sample, load_dataset, load_ppm, save_ppm
from .metrics import evaluate
from .model import Detector
from .pipeline import bench, detect, render
from .train import TrainingError, train
from .weights import WeightsError, load_weights, save_weights

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
log = logging.getLogger("shufflecanet")


class InputError(Exception):
    """Bad or missing user input; maps to exit code 2."""


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _config(args) -> RunConfig:
    if not args.config:
        raise InputError("--config is required for this command")
    path = Path(args.config)
    if not path.is_file():
        raise InputError(f"{path}: config file not found")
    try:
        cfg = RunConfig.load(path)
    except ConfigError as exc:
        raise InputError(f"{path}: {exc}") from None
    return replace(cfg, seed=args.seed) if args.seed is not None else cfg


def _manifest(args, cfg: RunConfig, field: str = "train_manifest") -> str:
    m = args.manifest or getattr(cfg.data, field)
    if not m:
        raise InputError("no dataset: pass --manifest or set data." + field + " in the config")
    if not Path(m).is_file():
        raise InputError(f"{m}: manifest not found")
    return m


def _dataset(path, cfg):
    try:
        return load_dataset(path, cfg.class_names)
    except FileNotFoundError as exc:
        raise InputError(f"{exc.filename}: file not found (listed in {path})") from None
    except (PPMError, AnnotationError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _model(args, cfg: RunConfig, required: bool = True) -> Detector:
    model = Detector(cfg.model, seed=cfg.seed)
    if not args.weights:
        if required:
            raise InputError("--weights is required for this command")
        return model
    if not Path(args.weights).is_file():
        raise InputError(f"{args.weights}: weights file not found")
    try:
        load_weights(args.weights, model, ignore_hash=args.ignore_hash, verify=args.verify)
    except WeightsError as exc:
        raise InputError(f"{args.weights}: {type(exc).__name__}: {exc}") from None
    return model


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_anchors(args) -> int:
    cfg = _config(args)
    samples = _dataset(_manifest(args, cfg), cfg)
    size = cfg.model.input_size
    wh = []
    for s in samples:
        ann = letterbox_sample(s, size)[0].annotations
        wh.extend(zip(ann[:, 3] - ann[:, 1], ann[:, 4] - ann[:, 2]))
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    if len(np.unique(wh, axis=0)) < args.k:
        raise InputError(f"need at least {args.k} distinct boxes, the manifest has {len(np.unique(wh, axis=0))}")
    result = kmeans_anchors(wh, k=args.k, seed=cfg.seed)
    anchors = [[round(float(w), 4), round(float(h), 4)] for w, h in result.anchors]
    clustered = mean_best_iou(wh, result.anchors)
    default = mean_best_iou(wh, scaled_default_anchors(size))
    for level, group in enumerate(result.levels()):
        print(f"level {level}: " + "  ".join(f"{w:.2f}x{h:.2f}" for w, h in group))
    print(f"mean best-anchor IoU: clustered {clustered:.4f}, default {default:.4f} ({len(wh)} boxes)")
    out = _out(args)
    (out / "anchors.json").write_text(_dump({"model": {"head": {"anchors": anchors}}}))
    (out / "anchors_report.json").write_text(_dump({
        "boxes": len(wh), "iterations": result.iterations, "mean_best_iou": clustered,
        "mean_best_iou_default": default}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    samples = _dataset(_manifest(args, cfg), cfg)
    val = _dataset(cfg.data.val_manifest, cfg) if cfg.data.val_manifest else None
    model = _model(args, cfg, required=False)
    out = _out(args)
    with open(out / "train.log", "w", encoding="utf-8") as log_file:
        try:
            hist = train(model, samples, cfg, val_dataset=val, log_file=log_file, max_steps=args.max_steps)
        except TrainingError as exc:
            print(f"training failed: {exc}", file=sys.stderr)
            return EXIT_FAIL
    save_weights(model, out / "last.weights")
    if hist.best_state is not None:
        best = Detector(cfg.model, seed=cfg.seed)
        best.load_state_dict(hist.best_state)
        save_weights(best, out / "best.weights")
    (out / "config.json").write_text(cfg.to_json())
    (out / "history.json").write_text(_dump({"evals": hist.evals, "best_map": hist.best_map,
                                             "best_epoch": hist.best_epoch, "steps": len(hist.steps)}))
    print(f"trained {len(hist.steps)} steps; best mAP@0.5 {hist.best_map:.4f} at epoch {hist.best_epoch}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    samples = _dataset(_manifest(args, cfg, "val_manifest"), cfg)
    gts = [s.annotations for s in samples]
    if args.identity_oracle:
        preds = [np.column_stack([g[:, 1:], np.ones(len(g)), g[:, 0]]) for g in gts]
    else:
        model = _model(args, cfg)
        preds = detect(model, [s.image for s in samples], cfg.detect.eval_conf_threshold,
                       args.iou if args.iou is not None else cfg.detect.iou_threshold)
    conf = args.conf if args.conf is not None else cfg.detect.conf_threshold
    report = evaluate(preds, gts, cfg.num_classes, cfg.class_names, conf_threshold=conf)
    out = _out(args)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_table())
    sys.stdout.write(report.to_table())
    return EXIT_OK


def _detect_inputs(args, cfg):
    if args.images:
        items = []
        for p in args.images:
            try:
                items.append((p, load_ppm(p)))
            except FileNotFoundError:
                raise InputError(f"{p}: image not found") from None
            except PPMError as exc:
                raise InputError(f"{p}: {exc}") from None
        return items
    return [(s.source, s.image) for s in _dataset(_manifest(args, cfg, "val_manifest"), cfg)]


def cmd_detect(args) -> int:
    cfg = _config(args)
    model = _model(args, cfg)
    items = _detect_inputs(args, cfg)
    conf = args.conf if args.conf is not None else cfg.detect.conf_threshold
    iou = args.iou if args.iou is not None else cfg.detect.iou_threshold
    results = detect(model, [im for _, im in items], conf, iou)
    out = _out(args)
    lines = []
    for (path, image), rows in zip(items, results):
        for x1, y1, x2, y2, score, cls in rows:
            lines.append(json.dumps({"image": str(path), "class": cfg.class_names[int(cls)],
                                     "score": round(float(score), 6), "x1": round(float(x1), 3),
                                     "y1": round(float(y1), 3), "x2": round(float(x2), 3),
                                     "y2": round(float(y2), 3)}, sort_keys=True))
        if args.render:
            (out / "rendered").mkdir(exist_ok=True)
            save_ppm(out / "rendered" / (Path(path).stem + ".ppm"), render(image, rows))
    (out / "detections.jsonl").write_text("".join(line + "\n" for line in lines))
    print(f"{len(lines)} detections in {len(items)} images")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    model = _model(args, cfg, required=False)
    report = bench(model, trials=args.trials, warmup=args.warmup, seed=cfg.seed)
    d = report.to_dict()
    print(f"latency per image: mean {d['mean_ms']:.3f} ms, median {d['median_ms']:.3f} ms, "
          f"std {d['std_ms']:.3f} ms over {d['trials']} runs; parameters {d['parameters']}")
    if args.out:
        (_out(args) / "bench.json").write_text(_dump(d))
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    checks = run_all(seed=args.seed or 0)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.ok]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


COMMANDS = {"anchors": cmd_anchors, "train": cmd_train, "eval": cmd_eval, "detect": cmd_detect,
            "bench": cmd_bench, "selfcheck": cmd_selfcheck}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shufflecanet", description="Face-mask detector toolkit.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--weights", help="weights file (SHCANET1 format)")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--manifest", help="image<TAB>annotation list; overrides the config")
    p.add_argument("--conf", type=float, help="confidence threshold")
    p.add_argument("--iou", type=float, help="NMS IoU threshold")
    p.add_argument("--verify", action="store_true", help="check per-tensor checksums when loading weights")
    p.add_argument("--ignore-hash", action="store_true", help="load weights saved under a different config")
    p.add_argument("--k", type=int, default=9, help="anchors: number of clusters")
    p.add_argument("--images", nargs="+", help="detect: PPM files instead of a manifest")
    p.add_argument("--render", action="store_true", help="detect: also write annotated PPM copies")
    p.add_argument("--identity-oracle", action="store_true", help="eval: score the ground truth against itself")
    p.add_argument("--max-steps", type=int, help="train: stop after this many optimizer steps")
    p.add_argument("--trials", type=int, default=100, help="bench: timed runs")
    p.add_argument("--warmup", type=int, default=10, help="bench: untimed warmup runs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
