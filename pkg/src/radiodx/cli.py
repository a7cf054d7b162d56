"""Command-line entry point: analyze, split, train, evaluate, explain, predict."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from . import dataset, evaluation, gradcam, imaging, network, training
from .dataset import NORMAL, PNEUMONIA

log = logging.getLogger("radiodx")


def _write(path, text: str | bytes) -> None:
    mode = "wb" if isinstance(text, bytes) else "w"
    kwargs = {} if isinstance(text, bytes) else {"encoding": "utf-8", "newline": ""}
    with open(path, mode, **kwargs) as fh:
        fh.write(text)


def _write_run(out: str, command: str, resolved: dict) -> None:
    os.makedirs(out, exist_ok=True)
    _write(os.path.join(out, "run.json"),
           json.dumps({"command": command, **resolved}, indent=2, sort_keys=True) + "\n")


def _load_model(weights: str, config_path: str | None):
    with open(weights, "rb") as fh:
        model = network.model_from_weights(fh.read())
    cfg = cfgmod.load(config_path) if config_path else cfgmod.resolve({})
    return model, cfg["normalization"]


def _model_input(model, path, normalization):
    size = model.input_shape[1]
    raster = imaging.load_raster(path)
    return raster, imaging.normalize(imaging.to_model_input(raster, size), normalization)


def cmd_analyze(args) -> int:
    entries = dataset.read_manifest(args.manifest)
    means = {}
    for cls in dataset.CLASSES:
        imgs = [dataset.load_sample(e, args.size).mean(axis=0, keepdims=True) for e in entries if e.label == cls]
        if not imgs:
            raise ValueError(f"manifest has no {cls} images")
        means[cls] = imaging.mean_image(imgs)
    os.makedirs(args.out, exist_ok=True)
    for cls, m in means.items():
        imaging.save_raster(imaging.float_to_raster(m), os.path.join(args.out, f"mean_{cls.lower()}.pgm"))
    imaging.save_raster(imaging.diff_image(means[NORMAL], means[PNEUMONIA]), os.path.join(args.out, "diff.ppm"))
    _write_run(args.out, "analyze", {"manifest": os.path.abspath(args.manifest), "size": args.size, "seed": None})
    return 0


def cmd_split(args) -> int:
    entries = dataset.read_manifest(args.manifest)
    with open(args.manifest, "rb") as fh:
        raw = dataset.load_manifest(fh.read())
    # emit paths exactly as written in the input manifest
    by_abs = dict(zip((e.path for e in entries), raw))
    result = dataset.split_dataset(entries, args.seed, args.per_class_test, stratified=args.stratified)
    for name in ("test", "train", "val"):
        setattr(result, name, [by_abs[e.path] for e in getattr(result, name)])
    summary = dataset.write_split(result, args.out)
    c = summary["counts"]
    print(f"test {c['test']['total']}  train {c['train']['total']}  val {c['val']['total']}")
    _write_run(args.out, "split", {"manifest": os.path.abspath(args.manifest), "seed": args.seed,
                                   "per_class_test": args.per_class_test, "stratified": args.stratified,
                                   "train_frac": "4/5"})
    return 0


def cmd_train(args) -> int:
    cfg = cfgmod.load(args.config)
    tc = cfgmod.train_config(cfg)
    model = network.build_model(cfg["backbone"], cfgmod.head_spec(cfg), cfg["init_seed"], cfg["input_size"],
                                cfg["freeze_backbone"])
    if cfg["paths"]["init_weights"]:
        with open(cfg["paths"]["init_weights"], "rb") as fh:
            network.load_weights(model, fh.read())
    for key in ("train_manifest", "val_manifest"):
        if not cfg["paths"][key]:
            raise cfgmod.ConfigError(f"paths.{key} is required for train")
    train = dataset.read_manifest(cfg["paths"]["train_manifest"])
    val = dataset.read_manifest(cfg["paths"]["val_manifest"])
    os.makedirs(args.out, exist_ok=True)
    _write_run(args.out, "train", {"config": cfg, "seed": cfg["seed"]})
    best, history = training.fit(model, train, val, tc)
    _write(os.path.join(args.out, "history.csv"), training.history_csv(history))
    _write(os.path.join(args.out, "history.svg"), training.history_svg(history))
    _write(os.path.join(args.out, "best.rxw"), network.save_weights(best))
    if history:
        stats = training.history_stats(history)
        print(f"val acc min {stats.min:.4f} mean {stats.mean:.4f} max {stats.max:.4f} std {stats.std:.4f}")
    return 0


def _read_predictions(path: str) -> dict[str, float]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["path", "probability"]:
        raise ValueError(f"{path}: header must be `path,probability`")
    return {p: float(v) for p, v in rows[1:]}


def cmd_evaluate(args) -> int:
    with open(args.manifest, "rb") as fh:
        raw = dataset.load_manifest(fh.read())
    entries = dataset.read_manifest(args.manifest)
    if args.predictions:
        table = _read_predictions(args.predictions)
        missing = [e.path for e in raw if e.path not in table]
        if missing:
            raise ValueError(f"no prediction for {missing[0]}")
        probs = np.array([table[e.path] for e in raw])
    else:
        model, norm = _load_model(args.weights, args.config)
        tc = training.TrainConfig(batch_size=32, input_size=model.input_shape[1], normalization=norm)
        probs = training.predict_entries(model, entries, tc)
    cm = evaluation.confusion_matrix(probs, [e.target for e in entries], args.threshold)
    report = evaluation.compute_metrics(cm)
    evaluation.emit_report(cm, report, args.out)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["path", "probability"])
    for e, p in zip(raw, probs):
        writer.writerow([e.path, repr(float(p))])
    _write(os.path.join(args.out, "predictions.csv"), buf.getvalue())
    for name, v in report.as_floats().items():
        print(f"{name:17s} {'ABSENT' if v is None else f'{v:.4f}'}")
    _write_run(args.out, "evaluate", {"manifest": os.path.abspath(args.manifest), "threshold": args.threshold,
                                      "weights": args.weights and os.path.abspath(args.weights),
                                      "predictions": args.predictions and os.path.abspath(args.predictions),
                                      "seed": None})
    return 0


def cmd_explain(args) -> int:
    model, norm = _load_model(args.weights, args.config)
    raster, x = _model_input(model, args.image, norm)
    heat = gradcam.compute_gradcam(model, x, args.layer)
    if heat.all_zero:
        print("warning: Grad-CAM map is all zero (no positively weighted activation)", file=sys.stderr)
    os.makedirs(args.out, exist_ok=True)
    overlay = gradcam.colorize_overlay(heat, raster, gradcam.OverlayParams(alpha=args.alpha))
    imaging.save_raster(overlay, os.path.join(args.out, "overlay.ppm"))
    imaging.save_raster(gradcam.heatmap_raster(heat), os.path.join(args.out, "heatmap.pgm"))
    layer = model.layers[gradcam.resolve_target(model, args.layer)].name
    _write_run(args.out, "explain", {"weights": os.path.abspath(args.weights), "image": os.path.abspath(args.image),
                                     "layer": layer, "alpha": args.alpha, "normalization": norm, "seed": None})
    return 0


def cmd_predict(args) -> int:
    model, norm = _load_model(args.weights, args.config)
    _, x = _model_input(model, args.image, norm)
    p = float(model.forward(x)[0])
    label = PNEUMONIA if p >= 0.5 else NORMAL
    print(f"{label} {p:.6f}")
    if args.out:
        _write_run(args.out, "predict", {"weights": os.path.abspath(args.weights),
                                         "image": os.path.abspath(args.image), "label": label,
                                         "probability": p, "normalization": norm, "seed": None})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radiodx", description="Chest X-ray pneumonia classifier pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="per-class mean images and their difference")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=imaging.MODEL_SIZE)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("split", help="test/train/val split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-class-test", type=int, default=150)
    p.add_argument("--stratified", action="store_true")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train and keep the best validation checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="confusion matrix and metrics on a manifest")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights")
    src.add_argument("--predictions", help="CSV `path,probability` instead of running a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--config")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="Grad-CAM overlay for one image")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layer")
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--config")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("predict", help="label and probability for one image")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
