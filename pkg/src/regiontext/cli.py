"""Command-line surface.

Subcommands: gen-data, train, infer, eval, render, grad-check.  Exit codes:
0 success, 1 contract violation (bad arguments, configs, or shapes),
2 I/O or integrity failure.
"""

from __future__ import annotations

import os

# deterministic numerics: pin BLAS thread pools before numpy loads
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ContractError, IntegrityError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regiontext",
        description="Desk-scale region-to-text pipeline: detect foreground regions "
        "and generate a task-styled description per region.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", default="train")
    p.add_argument("--inline", action="store_true", help="embed pixels in the JSON")

    p = sub.add_parser("train", help="train a pipeline on a dataset")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--data", required=True, help="dataset JSON")
    p.add_argument("--out", required=True, help="output directory for checkpoint/vocab")

    p = sub.add_parser("infer", help="run inference and write prediction records")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", type=int, default=1, help="1-based task id")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--out", required=True, help="output predictions file (JSONL)")

    p = sub.add_parser("eval", help="score predictions against a dataset")
    p.add_argument("--preds", required=True)
    p.add_argument("--gts", required=True, help="dataset JSON with ground truth")
    p.add_argument("--metric", choices=("det", "densecap"), required=True)

    p = sub.add_parser("render", help="render predictions as SVG files")
    p.add_argument("--preds", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-score", type=float, default=0.5)

    p = sub.add_parser("grad-check", help="finite-difference check of all primitives")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _cmd_gen_data(args) -> int:
    from .data import generate_dataset, save_dataset

    ds = generate_dataset(seed=args.seed, n_images=args.n, split=args.split)
    out = Path(args.out)
    save_dataset(ds, out / "dataset.json", inline=args.inline)
    print(f"wrote {len(ds.images)} images to {out / 'dataset.json'}")
    return 0


def _cmd_train(args) -> int:
    from .data import load_dataset
    from .model import PipelineConfig
    from .train import TrainConfig, train

    with open(args.config, encoding="utf-8") as fh:
        doc = json.load(fh)
    train_doc = dict(doc.get("train", {}))
    if "task_mixture" in train_doc:
        train_doc["task_mixture"] = tuple(train_doc["task_mixture"])
    if "incremental_schedule" in train_doc:
        train_doc["incremental_schedule"] = tuple(
            (int(it), tuple(classes)) for it, classes in train_doc["incremental_schedule"]
        )
    cfg = TrainConfig(**train_doc)
    pcfg = PipelineConfig.from_dict(doc)
    dataset = load_dataset(args.data)
    result = train(cfg, pcfg, dataset, args.out)
    print(
        f"trained {cfg.iterations} steps: total loss {result.initial_total:.4f} -> "
        f"{result.final_total:.4f}; checkpoint at {result.checkpoint_path}"
    )
    return 0


def _cmd_infer(args) -> int:
    from .data import load_dataset
    from .infer import run_inference, write_predictions
    from .train import load_pipeline

    pipeline = load_pipeline(args.ckpt)
    if not 1 <= args.task <= len(pipeline.vocab.task_tokens):
        raise ContractError(
            f"unknown task id {args.task}; valid ids are 1..{len(pipeline.vocab.task_tokens)}"
        )
    dataset = load_dataset(args.data)
    records = run_inference(pipeline, dataset, task_id=args.task, beam=args.beam)
    write_predictions(records, args.out)
    print(f"wrote {len(records)} records for {len(dataset.images)} images to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .data import load_dataset
    from .infer import dataset_ground_truth, load_predictions
    from .metrics import densecap_map, detection_ap
    from .tokenizer import normalize_text

    preds = load_predictions(args.preds)
    dataset = load_dataset(args.gts)
    if args.metric == "det":
        gts = dataset_ground_truth(dataset, task_id=1)
        classes = sorted({normalize_text(g.text) for g in gts})
        result = detection_ap(preds, gts, classes)
    else:
        gts = dataset_ground_truth(dataset, task_id=2)
        result = densecap_map(preds, gts)
        result = {
            "map": result["map"],
            "cells": {f"iou={k[0]:.2f},meteor={k[1]:.2f}": v for k, v in result["cells"].items()},
        }
    print(json.dumps(result, indent=1, sort_keys=True))
    return 0


def _cmd_render(args) -> int:
    from .data import load_dataset
    from .infer import load_predictions
    from .render import render_predictions

    records = load_predictions(args.preds)
    dataset = load_dataset(args.data)
    report = render_predictions(records, dataset, args.out, min_score=args.min_score)
    print(f"wrote {len(report['written'])} SVG files to {args.out}")
    if report["skipped_image_ids"]:
        print(f"skipped unknown image ids: {report['skipped_image_ids']}")
    return 0


def _cmd_grad_check(args) -> int:
    from .gradcheck import primitive_battery

    worst = primitive_battery(seeds=args.seeds, tol=args.tolerance)
    for kind in sorted(worst):
        print(f"{kind:>16s}: max relative error {worst[kind]:.3e}")
    print(f"all {len(worst)} primitives within {args.tolerance:g}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "render": _cmd_render,
    "grad-check": _cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except IntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
