"""Command-line entry point: gen-data | train | eval | explain."""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import data as dat
from . import head as hd
from . import metrics as mt
from . import trainer as tr
from .autodiff import Tensor
from .errors import ConceptHeadError
from .losses import LossWeights

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="concepthead",
        description="Train and inspect a concept-attention classifier head.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic planted-concept EMB1 file")
    gen.add_argument("--out", required=True, help="output EMB1 path")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--prototype-seed", type=int, default=None,
                     help="seed the concept prototypes separately from the samples")
    gen.add_argument("--classes", type=int, default=4)
    gen.add_argument("--concepts", type=int, default=12)
    gen.add_argument("--features", type=int, default=8, help="feature rows per sample (L)")
    gen.add_argument("--feature-dim", type=int, default=32, help="feature dimension (D)")
    gen.add_argument("--noise-std", type=float, default=0.3)
    gen.add_argument("--samples-per-class", type=int, default=500)
    gen.add_argument("--carrier-fraction", type=float, default=1.0)

    def add_head_flags(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--concepts", type=int, default=None,
                       help="concept count; defaults to the dataset's")
        p.add_argument("--slot-dim", type=int, default=64)
        p.add_argument("--iters", type=int, default=None,
                       help="refinement iterations; defaults per variant")
        p.add_argument("--variant", choices=hd.VARIANTS, default="boqsa")
        p.add_argument("--heads", type=int, default=1)
        p.add_argument("--pathway", choices=hd.PATHWAYS, default="spatial")

    train = sub.add_parser("train", help="fit the head on an EMB1 dataset")
    train.add_argument("--data", required=True, help="EMB1 training set")
    train.add_argument("--out", default=".", help="directory for metrics.csv and checkpoint")
    train.add_argument("--checkpoint", default=None, help="checkpoint path override")
    train.add_argument("--epochs", type=int, default=20)
    train.add_argument("--batch-size", type=int, default=64)
    train.add_argument("--lr", type=float, default=5e-5)
    train.add_argument("--warmup", type=int, default=10)
    train.add_argument("--weight-decay", type=float, default=1e-3)
    train.add_argument("--lambda-expl", type=float, default=1.0)
    train.add_argument("--lambda-sparse", type=float, default=0.5)
    add_head_flags(train)

    ev = sub.add_parser("eval", help="print metrics for a checkpoint on a dataset")
    ev.add_argument("--data", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--seed", type=int, default=0)

    ex = sub.add_parser("explain", help="export per-sample heatmaps and top-k concepts")
    ex.add_argument("--data", required=True)
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--out", default=".", help="directory for heatmaps and topk.csv")
    ex.add_argument("--topk", type=int, default=3)
    ex.add_argument("--seed", type=int, default=0)
    ex.add_argument("--limit", type=int, default=None, help="explain only the first N samples")
    return parser


def _load_dataset(path: str) -> dat.Dataset:
    if not os.path.exists(path):
        raise ConceptHeadError(f"dataset file not found: {path}")
    return dat.read_emb(path)


def _head_config(args, dataset: dat.Dataset) -> hd.HeadConfig:
    concepts = args.concepts
    if concepts is None:
        if dataset.n_concepts == 0:
            raise ConceptHeadError("dataset carries no explanations; pass --concepts")
        concepts = dataset.n_concepts
    return hd.HeadConfig(
        concepts=concepts, slot_dim=args.slot_dim, input_dim=dataset.input_dim,
        n_inputs=dataset.n_inputs, n_classes=dataset.n_classes, iters=args.iters,
        variant=args.variant, heads=args.heads, pathway=args.pathway)


def _cmd_gen_data(args) -> int:
    cfg = dat.SynthConfig(
        n_classes=args.classes, n_concepts=args.concepts,
        concepts_per_class=dat.block_concept_map(args.classes, args.concepts),
        n_inputs=args.features, input_dim=args.feature_dim, noise_std=args.noise_std,
        samples_per_class=args.samples_per_class, carrier_fraction=args.carrier_fraction)
    dataset = dat.gen_synthetic(cfg, args.seed, prototype_seed=args.prototype_seed)
    dat.write_emb(dataset, args.out)
    print(f"wrote {len(dataset)} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    dataset = _load_dataset(args.data)
    if len(dataset) == 0:
        print("error: training dataset is empty", file=sys.stderr)
        return 2
    cfg = tr.TrainConfig(
        head=_head_config(args, dataset), epochs=args.epochs, batch_size=args.batch_size,
        lr=args.lr, warmup_iters=args.warmup, weight_decay=args.weight_decay,
        seed=args.seed,
        weights=LossWeights(lambda_expl=args.lambda_expl, lambda_sparse=args.lambda_sparse))
    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.csv")
    ckpt_path = args.checkpoint or os.path.join(args.out, "model.cctk")

    started = time.perf_counter()
    with open(metrics_path, "w", encoding="ascii") as fh:
        fh.write(mt.METRICS_HEADER + "\n")

        def on_epoch(record):
            fh.write(mt.format_metrics_row(record) + "\n")
            fh.flush()
            print(f"epoch {record.epoch}: total={record.loss_total:.6f} "
                  f"acc={record.class_acc:.4f}", file=sys.stderr)

        state, _ = tr.fit(dataset, cfg, on_epoch=on_epoch)
    tr.save_checkpoint(state, cfg, ckpt_path)
    print(f"training took {time.perf_counter() - started:.1f}s", file=sys.stderr)
    print(f"wrote {metrics_path} and {ckpt_path}")
    return 0


def _cmd_eval(args) -> int:
    dataset = _load_dataset(args.data)
    if len(dataset) == 0:
        print("error: cannot evaluate an empty dataset", file=sys.stderr)
        return 2
    state, cfg = tr.load_checkpoint(args.checkpoint)
    record = tr.evaluate(dataset, state.params, cfg, seed=args.seed)
    for name in ("loss_cls", "loss_expl", "loss_sparse", "loss_total",
                 "class_acc", "concept_top1_acc", "mean_entropy"):
        print(f"{name}={getattr(record, name):.6f}")
    return 0


def _cmd_explain(args) -> int:
    dataset = _load_dataset(args.data)
    if len(dataset) == 0:
        print("error: cannot explain an empty dataset", file=sys.stderr)
        return 2
    state, cfg = tr.load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    rows = []
    count = len(dataset) if args.limit is None else min(args.limit, len(dataset))
    for i in range(count):
        sample = dataset.samples[i]
        out = hd.head_forward(Tensor(sample.features), state.params, cfg.head, rng)
        attn = out.attn_spatial if out.attn_spatial is not None else out.attn_global
        mt.export_heatmap(attn.data, os.path.join(args.out, f"sample_{i:04d}.pgm"))
        rel = attn.data.mean(axis=0)
        top = np.argsort(-rel, kind="stable")[:args.topk]
        rows.extend((i, rank + 1, int(c), float(rel[c])) for rank, c in enumerate(top))
    mt.write_topk_csv(rows, os.path.join(args.out, "topk.csv"))
    print(f"wrote {count} heatmaps and topk.csv to {args.out}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "explain": _cmd_explain,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return exit_.code if isinstance(exit_.code, int) else 2
    try:
        return _COMMANDS[args.command](args)
    except ConceptHeadError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
