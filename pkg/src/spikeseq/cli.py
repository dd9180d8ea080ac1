"""Command-line entry points: train, eval, infer."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import training
from .training import DATA_ROOT_ENV


def _parse_overrides(pairs):
    out = {}
    for item in pairs:
        if "=" not in item:
            raise SystemExit(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key] = value
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="spikeseq",
        description="Train and evaluate spiking state-space sequence classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True, help="key=value config file")
    p_train.add_argument("--task", choices=["sMNIST", "sCIFAR", "synth"])
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--out", help="output directory")
    p_train.add_argument("--data-root",
                         help=f"dataset directory (default: ${DATA_ROOT_ENV})")
    p_train.add_argument("overrides", nargs="*", metavar="key=value",
                         help="additional config overrides")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", help="dataset directory override")

    p_infer = sub.add_parser("infer", help="iterative inference on one sequence")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--input", required=True,
                         help="CSV file with one scalar per line (or comma separated)")

    args = parser.parse_args(argv)

    if args.command == "train":
        overrides = _parse_overrides(args.overrides)
        for key, flag in (("task", args.task), ("seed", args.seed),
                          ("out_dir", args.out), ("data_root", args.data_root)):
            if flag is not None:
                overrides[key] = str(flag)
        cfg = training.parse_config(args.config, overrides)
        best, metrics = training.train(cfg)
        print(f"best checkpoint: {best}")
        print(f"metrics: {metrics}")
        return 0

    if args.command == "eval":
        model, cfg = training.load_model(args.checkpoint)
        if args.data:
            cfg.data_root = args.data
        _, test = training.load_task_datasets(cfg)
        report = training.evaluate(args.checkpoint, test)
        print(f"accuracy: {report['accuracy']:.4f}")
        print(f"loss: {report['loss']:.4f}")
        print(f"spike_rate: {report['spike_rate']:.4f}")
        op = report["op_report"]
        print(f"op_report[{op['label']}]: multiplies={op['multiplies']} adds={op['adds']}")
        return 0

    # infer
    raw = open(args.input).read().replace(",", "\n").split()
    sequence = np.array([float(v) for v in raw])
    logits = training.infer_iterative(args.checkpoint, sequence)
    print("logits: " + " ".join(f"{v:.6f}" for v in logits))
    print(f"prediction: {int(np.argmax(logits))}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
