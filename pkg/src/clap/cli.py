"""Command line entry point: ``clap {train,eval,gradcam,inspect,bench}``.

Exit codes: 0 ok, 2 configuration or input error, 3 training diverged,
4 corrupt checkpoint, 5 unknown layer name.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import layers as L
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (MANIFEST_NAME, SplitSpec, fit_to_input, load_directory, make_synthetic, split,
                   write_manifest)
from .errors import (ClapError, CorruptCheckpoint, DivergenceDetected, EmptyDataset,
                     InsufficientData, InvalidConfig, InvalidLayer)
from .gradcam import grad_cam, heatmap_argmax, overlay
from .imaging import encode_ppm
from .metrics import render_confusion_csv, render_report
from .model import DEFAULT_WIDTHS, ModelConfig, build, count_flops, count_params, forward
from .trainer import TrainConfig, evaluate, history_line, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CORRUPT, EXIT_LAYER = 0, 2, 3, 4, 5

REFERENCE_PARAMS = 4_991_554
REFERENCE_GFLOPS = 0.2
DESK_WIDTHS = (4, 8, 16, 32)
CONFIG_NAME = "config.json"


class UsageError(ClapError):
    """Bad flag value; reported with exit code 2."""


@dataclass
class RunConfig:
    command: str
    model: ModelConfig
    train: TrainConfig
    data: Optional[str] = None
    synthetic: bool = False
    per_class: int = 250
    split: tuple = (0.6, 0.2, 0.2)
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    layer: Optional[str] = None
    format: str = "text"
    iterations: int = 20
    limit: int = 100
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["train"] = self.train.to_dict()
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        d["train"] = TrainConfig(**d["train"])
        d["split"] = tuple(d["split"])
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="run directory (default: $CLAP_OUT_DIR/<command>-<time>)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--format", choices=("text", "csv"), default="text")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset root: one subdirectory of .ppm/.tensor images per class")
    data.add_argument("--synthetic", action="store_true", help="use the synthetic blob dataset")
    data.add_argument("--classes", type=int, default=4, help="synthetic class count")
    data.add_argument("--per-class", type=int, default=250, help="synthetic images per class")
    data.add_argument("--split", type=_float_list, default=(0.6, 0.2, 0.2),
                      help="train,val,test fractions")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--image-size", type=int, help="square input size (default 224, 64 with --synthetic)")
    model.add_argument("--widths", type=_int_list,
                       help="encoder widths (default 32..1024; 4,8,16,32 with --synthetic)")
    model.add_argument("--num-classes", type=int, help="classes for inspect/bench without data (default 22)")
    model.add_argument("--variant", choices=("encoder_only", "decoder_i", "full"), default="full")
    model.add_argument("--dropout", type=float, default=0.2)
    model.add_argument("--bn-order", choices=("literal", "conventional"), default="literal")

    p = sub.add_parser("train", parents=[common, data, model], help="train a model")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.008)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--augment", action="store_true", help="rotation/zoom/crop augmentation")
    p.add_argument("--checkpoint-every", type=int, default=0)

    p = sub.add_parser("eval", parents=[common, data], help="evaluate a checkpoint")
    p.add_argument("--image-size", type=int, help="synthetic image size (default: checkpoint input)")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("gradcam", parents=[common, data], help="write Grad-CAM overlays")
    p.add_argument("--image-size", type=int, help="synthetic image size (default: checkpoint input)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", help="target sepconv layer (default: last encoder layer)")
    p.add_argument("--limit", type=int, default=100, help="maximum images")

    p = sub.add_parser("inspect", parents=[common, model], help="parameter and FLOP tables")
    p.add_argument("--checkpoint")

    p = sub.add_parser("bench", parents=[common, model], help="time single-image inference")
    p.add_argument("--checkpoint")
    p.add_argument("--iterations", type=int, default=20)
    return parser


def _model_config(args, num_classes: Optional[int] = None) -> ModelConfig:
    synthetic = getattr(args, "synthetic", False)
    size = args.image_size or (64 if synthetic else 224)
    widths = args.widths or (DESK_WIDTHS if synthetic else DEFAULT_WIDTHS)
    k = num_classes or args.num_classes or 22
    return ModelConfig(input_size=(size, size, 3), encoder_widths=widths, num_classes=k,
                       variant=args.variant, dropout_rate=args.dropout, bn_order=args.bn_order,
                       seed=args.seed)


def _check_flags(args) -> None:
    if getattr(args, "lr", 0) < 0:
        raise UsageError(f"--lr must be >= 0, got {args.lr}")
    for flag in ("epochs", "batch", "workers", "iterations", "limit", "classes", "per_class"):
        value = getattr(args, flag, None)
        if value is not None and value < 1:
            raise UsageError(f"--{flag.replace('_', '-')} must be >= 1, got {value}")
    if getattr(args, "image_size", None) is not None and args.image_size < 1:
        raise UsageError(f"--image-size must be >= 1, got {args.image_size}")
    if hasattr(args, "data") and args.command in ("train", "eval", "gradcam"):
        if bool(args.data) == bool(args.synthetic):
            raise UsageError("give exactly one of --data or --synthetic")


def _run_dir(args) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        root = Path(os.environ.get("CLAP_OUT_DIR", "runs"))
        path = root / f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_data(args, split_seed: int):
    """Returns ``(splits, class_names, boxes)``; ``boxes`` maps source_id to Box for synthetic data."""
    if args.synthetic:
        records, boxes = make_synthetic(args.classes, args.per_class, args.image_size or 64, args.seed)
        names = [f"class{c}" for c in range(args.classes)]
        box_of = {r.source_id: b for r, b in zip(records, boxes)}
    else:
        records, names = load_directory(args.data)
        box_of = {}
    try:
        parts = split(records, SplitSpec(args.split, split_seed))
    except ValueError as exc:
        raise UsageError(f"--split: {exc}") from exc
    return dict(zip(("train", "val", "test"), parts)), names, box_of


def _write_reports(out: Path, model, splits: dict, names, workers: int, fmt: str) -> str:
    shown = ""
    for name, records in splits.items():
        if not records:
            continue
        report = evaluate(model, records, workers)
        (out / f"report_{name}.txt").write_bytes(render_report(report, names, "text"))
        (out / f"report_{name}.csv").write_bytes(render_report(report, names, "csv"))
        (out / f"confusion_{name}.csv").write_bytes(render_confusion_csv(report.confusion, names))
        shown = f"[{name}]\n" + render_report(report, names, fmt).decode()
    return shown


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    splits, names, _ = _load_data(args, args.seed)
    mcfg = _model_config(args, num_classes=len(names))
    tcfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch,
                       momentum=args.momentum, seed=args.seed, augment=args.augment,
                       checkpoint_every=args.checkpoint_every, workers=args.workers)
    run = RunConfig("train", mcfg, tcfg, data=args.data, synthetic=args.synthetic,
                    per_class=args.per_class, split=args.split, out=args.out,
                    extra={"classes": args.classes})
    out = _run_dir(args)
    (out / CONFIG_NAME).write_text(run.dumps())
    write_manifest(out / MANIFEST_NAME, names)
    model = build(mcfg)
    log = (out / "history.jsonl").open("w")

    def sink(record):
        log.write(history_line(record))
        log.flush()
        print(f"epoch {record['epoch']:4d}  loss {record['train_loss']:.4f}  "
              f"acc {record['train_acc']:.4f}  val_acc {record['val_acc']}", file=sys.stderr)

    try:
        result = train(model, splits["train"], splits["val"], tcfg, sink, checkpoint_dir=out)
    except DivergenceDetected as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, out / "last_good.ckpt")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        log.close()
    save_checkpoint(result.state, out / "final.ckpt")
    print(_write_reports(out, model, splits, names, args.workers, args.format), end="")
    print(f"run directory: {out}", file=sys.stderr)
    return EXIT_OK


def _eval_records(args, model):
    if args.synthetic:
        splits, names, box_of = _load_data(args, args.seed)
        records = splits["test"] or splits["val"] or splits["train"]
    else:
        records, names = load_directory(args.data)
        box_of = {}
    if len(names) != model.config.num_classes:
        raise UsageError(f"dataset has {len(names)} classes, checkpoint expects {model.config.num_classes}")
    return records, names, box_of


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    if args.synthetic and args.image_size is None:
        args.image_size = state.model.config.input_size[0]
    records, names, _ = _eval_records(args, state.model)
    out = _run_dir(args)
    run = RunConfig("eval", state.model.config, TrainConfig(seed=args.seed, workers=args.workers),
                    data=args.data, synthetic=args.synthetic, per_class=args.per_class,
                    split=args.split, out=args.out, checkpoint=args.checkpoint, format=args.format)
    (out / CONFIG_NAME).write_text(run.dumps())
    print(_write_reports(out, state.model, {"eval": records}, names, args.workers, args.format), end="")
    return EXIT_OK


def cmd_gradcam(args) -> int:
    state = load_checkpoint(args.checkpoint)
    model = state.model
    if args.layer is not None and (args.layer not in model.layers or args.layer == "head"):
        raise InvalidLayer(f"no convolutional layer named {args.layer!r}; "
                           f"choose from {', '.join(model.conv_layer_names)}")
    if args.synthetic and args.image_size is None:
        args.image_size = model.config.input_size[0]
    records, names, box_of = _eval_records(args, model)
    records = records[:args.limit]
    out = _run_dir(args)
    run = RunConfig("gradcam", model.config, TrainConfig(seed=args.seed, workers=args.workers),
                    data=args.data, synthetic=args.synthetic, per_class=args.per_class,
                    split=args.split, out=args.out, checkpoint=args.checkpoint, layer=args.layer,
                    limit=args.limit)
    (out / CONFIG_NAME).write_text(run.dumps())
    heat_dir = out / "gradcam"
    heat_dir.mkdir(exist_ok=True)
    size = model.config.input_size[:2]
    rows, hits = [], 0
    for rec in records:
        image = fit_to_input(rec.image, size)
        heat = grad_cam(model, image, rec.label, args.layer)
        stem = rec.source_id.replace("/", "_")
        (heat_dir / f"{stem}.ppm").write_bytes(encode_ppm(overlay(image, heat)))
        y, x = (int(v) for v in heatmap_argmax(heat))
        row = {"source_id": rec.source_id, "label": rec.label, "argmax": [y, x]}
        box = box_of.get(rec.source_id)
        if box is not None:
            row["inside_box"] = bool(box.contains(y, x))
            hits += row["inside_box"]
        rows.append(row)
    summary = {"layer": args.layer or model.encoder_names[-1], "images": len(rows), "heatmaps": rows}
    if box_of:
        summary["localization_rate"] = hits / len(rows)
        print(f"localization: {hits}/{len(rows)} argmax inside the blob box")
    (out / "gradcam.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"wrote {len(rows)} heatmaps to {heat_dir}")
    return EXIT_OK


def _inspect_model(args):
    if args.checkpoint:
        return load_checkpoint(args.checkpoint).model
    return build(_model_config(args))


def cmd_inspect(args) -> int:
    model = _inspect_model(args)
    params = count_params(model)
    flops = {name: (macs, fl) for name, macs, fl in count_flops(model)}
    total_t = sum(r[1] for r in params)
    total_n = sum(r[2] for r in params)
    total_f = sum(v[1] for v in flops.values())
    if args.format == "csv":
        lines = ["layer,trainable,non_trainable,multiply_adds,flops"]
        lines += [f"{n},{t},{nt},{flops[n][0]},{flops[n][1]}" for n, t, nt in params]
        lines.append(f"total,{total_t},{total_n},{total_f // 2},{total_f}")
    else:
        cfg = model.config
        lines = [f"variant={cfg.variant} input={cfg.input_size} widths={list(cfg.encoder_widths)} "
                 f"classes={cfg.num_classes}",
                 f"{'layer':<6} {'trainable':>12} {'non-train':>10} {'MACs':>14} {'FLOPs':>14}"]
        lines += [f"{n:<6} {t:>12,} {nt:>10,} {flops[n][0]:>14,} {flops[n][1]:>14,}" for n, t, nt in params]
        lines.append(f"{'total':<6} {total_t:>12,} {total_n:>10,} {total_f // 2:>14,} {total_f:>14,}")
        lines.append(f"parameters: {total_t:,} trainable, {total_t + total_n:,} total "
                     f"(paper: {REFERENCE_PARAMS:,})")
        lines.append(f"GFLOPs: {total_f / 1e9:.3f} (paper: {REFERENCE_GFLOPS})")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        (_run_dir(args) / "inspect.txt").write_text(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    model = _inspect_model(args)
    h, w, c = model.config.input_size
    x = np.random.default_rng(args.seed).random((1, c, h, w)).astype(model.dtype)
    for _ in range(3):
        forward(model, x, L.INFER)
    times = []
    for _ in range(args.iterations):
        t0 = time.perf_counter()
        forward(model, x, L.INFER)
        times.append((time.perf_counter() - t0) * 1000)
    text = (f"forward latency over {args.iterations} runs (batch 1, {h}x{w}): "
            f"mean {statistics.mean(times):.2f} ms, median {statistics.median(times):.2f} ms\n")
    print(text, end="")
    if args.out:
        (_run_dir(args) / "bench.txt").write_text(text)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcam": cmd_gradcam,
            "inspect": cmd_inspect, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _check_flags(args)
        return COMMANDS[args.command](args)
    except CorruptCheckpoint as exc:
        print(f"error: corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except InvalidLayer as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LAYER
    except EmptyDataset as exc:
        print(f"error: EmptyDataset: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UsageError, InvalidConfig, InsufficientData) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
