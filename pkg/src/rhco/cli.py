"""Command-line entry point: ``rhco <command> [flags]``.

Stages talk to each other only through files: a dataset directory, an
attention TSV, a positive-graph TSV, a checkpoint and a metrics log.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .hetgraph import DatasetError, load_dataset
from .numcore import ContractError, DimensionError, TrainingError
from .pipeline import (
    MODES,
    CheckpointError,
    EvaluationError,
    TrainingConfig,
    bench_scaling,
    evaluate,
    export_embeddings,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .positive import (
    AttentionTableError,
    build_positive_graphs,
    load_attention,
    load_positive_graphs,
    save_attention,
    save_positive_graphs,
)
from .pretrain import pretrain_attention
from .propagation import write_predictions
from .synthetic import generate_synthetic, regular_dataset

USAGE, DATA, NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


_HELP = {
    "d": "embedding width", "d_rel": "relation vector width", "heads": "attention heads",
    "layers": "schema encoder layers", "t_pos": "positive samples per target",
    "dropout": "dropout probability", "tau": "contrastive temperature", "lam": "view balance",
    "alpha": "weight of the contrastive loss", "steps": "smoothing iterations",
    "gamma": "smoothing weight", "batch_size": "seeds per batch", "fanout": "neighbours per relation",
    "epochs": "training epochs", "lr": "Adam learning rate", "seed": "random seed",
    "mode": "which views feed training", "normalize_lv": "average rather than sum the supervised loss",
    "semantic_scope": "targets over which metapath weights are averaged",
    "propagation": "smooth at inference only, or inside each batch as well",
    "eval_fanout": "cap neighbours at inference; None keeps all",
}


def _config_flags(p):
    for f in dataclasses.fields(TrainingConfig):
        flag = "--" + f.name.replace("_", "-")
        kw = {"dest": f.name, "default": f.default, "help": _HELP[f.name]}
        if f.type in ("bool",) or isinstance(f.default, bool):
            p.add_argument(flag, action="store_true", **{**kw, "default": False})
        elif f.name == "mode":
            p.add_argument(flag, choices=MODES, **kw)
        elif f.name == "semantic_scope":
            p.add_argument(flag, choices=("batch", "full"), **kw)
        elif f.name == "propagation":
            p.add_argument(flag, choices=("inference", "batch"), **kw)
        elif f.name == "eval_fanout":
            p.add_argument(flag, type=int, **kw)
        else:
            p.add_argument(flag, type=type(f.default), **kw)


def _config(args) -> TrainingConfig:
    return TrainingConfig(**{f.name: getattr(args, f.name) for f in dataclasses.fields(TrainingConfig)})


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    root = _Parser(prog="rhco", description="Relation-aware heterogeneous graph training with "
                   "cross-view contrastive learning.", formatter_class=fmt)
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--targets", type=int, default=2000, help="target (paper) nodes")
    p.add_argument("--aux", type=int, default=400, help="nodes per intermediate type")
    p.add_argument("--classes", type=int, default=3, help="number of classes")
    p.add_argument("--homophily", type=float, default=0.9, help="same-class neighbour probability")
    p.add_argument("--dim", type=int, default=16, help="feature width")
    p.add_argument("--noise", type=float, default=2.5, help="feature noise scale")
    p.add_argument("--cites", type=int, default=0, help="citations per target")
    p.add_argument("--seed", type=int, default=7, help="random seed")

    p = sub.add_parser("pretrain", help="fit the attention classifier and write its attention TSV",
                       formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="attention TSV to write")
    p.add_argument("--epochs", type=int, default=100, help="training epochs")
    p.add_argument("--seed", type=int, default=0, help="random seed")

    p = sub.add_parser("build-pos", help="select positive samples and write the positive-graph TSV",
                       formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--attention", required=True, help="attention TSV")
    p.add_argument("--out", required=True, help="positive-graph TSV to write")
    p.add_argument("--tpos", type=int, default=5, help="positive samples per target")
    p.add_argument("--renormalize", action="store_true", help="rescale attention rows to sum to one")

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--positives", required=True, help="positive-graph TSV")
    p.add_argument("--out", required=True, help="checkpoint to write (best validation epoch)")
    p.add_argument("--log", default=None, help="metrics log, one JSON object per epoch")
    _config_flags(p)

    for name, text in (("eval", "evaluate a checkpoint"), ("export-emb", "write schema-view embeddings")):
        p = sub.add_parser(name, help=text, formatter_class=fmt)
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--positives", required=True, help="positive-graph TSV")
        p.add_argument("--checkpoint", required=True, help="checkpoint file")
        p.add_argument("--fanout", type=int, default=None, help="cap neighbours at inference; None keeps all")
        if name == "eval":
            p.add_argument("--split", choices=("train", "valid", "test"), default="test", help="split to score")
            p.add_argument("--predictions", default=None, help="optional prediction TSV to write")
        else:
            p.add_argument("--out", required=True, help="embedding TSV to write")

    p = sub.add_parser("bench", help="time positive selection across doubling graph sizes",
                       formatter_class=fmt)
    p.add_argument("--start", type=int, default=20000, help="targets in the smallest graph")
    p.add_argument("--doublings", type=int, default=4, help="number of size doublings")
    p.add_argument("--degree", type=int, default=5, help="neighbours per node")
    p.add_argument("--repeats", type=int, default=3, help="timings per size (minimum is kept)")
    p.add_argument("--epoch", action="store_true", help="also time one training epoch per size")
    p.add_argument("--csv", default=None, help="CSV file to write")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    return root


def _positives(args, ds):
    return load_positive_graphs(args.positives, ds.graph.num_nodes(ds.target_type))


def _run(args) -> int:
    cmd = args.command
    if cmd == "synth":
        ds = generate_synthetic(args.targets, args.aux, args.classes, args.homophily, args.dim, args.seed,
                                cites_per_target=args.cites, noise=args.noise, out_dir=args.out)
        print(json.dumps({"dataset": args.out, "nodes": ds.graph.node_types, "edges": ds.graph.num_edges()}))
    elif cmd == "pretrain":
        ds = load_dataset(args.data)
        save_attention(pretrain_attention(ds, args.epochs, args.seed), args.out)
    elif cmd == "build-pos":
        ds = load_dataset(args.data)
        table = load_attention(args.attention, ds.graph, renormalize=args.renormalize)
        pg = build_positive_graphs(ds.graph, table, args.tpos, ds.target_type)
        save_positive_graphs(pg, args.out)
        print(json.dumps({"graphs": list(pg), "fingerprint": pg.fingerprint()}))
    elif cmd == "train":
        cfg = _config(args)
        ds = load_dataset(args.data)
        pos = _positives(args, ds)
        ckpt, log = train(ds, pos, cfg, log_path=args.log, checkpoint_path=args.out)
        save_checkpoint(ckpt, args.out)
        print(json.dumps({"checkpoint": args.out, "best_epoch": ckpt.epoch,
                          "val_accuracy": max([r["val_accuracy"] for r in log], default=None)}))
    elif cmd == "eval":
        ds = load_dataset(args.data)
        ckpt = load_checkpoint(args.checkpoint)
        metrics, Y = evaluate(ckpt, ds, _positives(args, ds), args.split, args.fanout, return_predictions=True)
        if args.predictions:
            write_predictions(Y, args.predictions)
        print(json.dumps({"split": args.split, **metrics}))
    elif cmd == "export-emb":
        ds = load_dataset(args.data)
        z = export_embeddings(load_checkpoint(args.checkpoint), ds, _positives(args, ds), args.out, args.fanout)
        print(json.dumps({"rows": int(z.shape[0]), "dim": int(z.shape[1])}))
    elif cmd == "bench":
        sizes = [args.start * 2 ** k for k in range(args.doublings + 1)]
        rows, slope = bench_scaling(lambda n: regular_dataset(n, args.degree, rng_seed=args.seed), sizes,
                                    repeats=args.repeats, measure_epoch=args.epoch, csv_path=args.csv)
        print(json.dumps({"rows": rows, "selection_slope": slope}))
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE
    try:
        return _run(args)
    except (ContractError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE
    except TrainingError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return NUMERIC
    except (DatasetError, AttentionTableError, CheckpointError, EvaluationError, OSError, ValueError,
            KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return DATA


if __name__ == "__main__":
    sys.exit(main())
