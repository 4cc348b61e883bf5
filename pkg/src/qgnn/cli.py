"""Command line entry point: train, derive-bits, gen-synthetic, bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .bench import bench_primitives
from .data import PRESET, gen_synthetic, load_dataset, write_dataset
from .graph import DataError
from .train import ConfigError, TrainConfig, derive_bits, run_train

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def _bits(text: str):
    if text == "auto":
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bits must be an integer or 'auto', got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=["gcn", "gat"], default="gcn")
    p.add_argument("--precision", choices=["fp32", "quant"], default="fp32")
    p.add_argument("--bits", type=_bits, default=8, help="2..8 or 'auto'")
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--leaky-slope", type=float, default=0.2)
    p.add_argument("--kmax", type=int, default=6, help="max per-head kernel launches before fusing")


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--graph", required=True, help="edge list: header 'V E', then 'src dst' lines")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--split", help="one of train/val/test per node; default 60/20/20 random by seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qgnn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a two-layer GCN/GAT, JSON lines per epoch")
    _add_model_args(t)
    _add_data_args(t)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
    t.add_argument("--quantize-last", action="store_true",
                   help="ablation: quantize the layer feeding the softmax too")
    t.add_argument("--rounding", choices=["stochastic", "nearest"], default="stochastic")
    t.add_argument("--quantize-scores", action="store_true",
                   help="ablation: quantize attention scores before the softmax")
    t.add_argument("--no-reuse", action="store_true", help="re-quantize every consumer of a tensor")
    t.add_argument("--report", help="write JSON lines here instead of stdout")

    d = sub.add_parser("derive-bits", help="Error_X sweep on the first layer's output")
    _add_model_args(d)
    _add_data_args(d)
    d.add_argument("--threshold", type=float, default=0.3)

    g = sub.add_parser("gen-synthetic", help="write a stochastic-block-model dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--nodes", type=int, default=PRESET["nodes"])
    g.add_argument("--classes", type=int, default=PRESET["classes"])
    g.add_argument("--intra-p", type=float, default=PRESET["intra_p"])
    g.add_argument("--inter-p", type=float, default=PRESET["inter_p"])
    g.add_argument("--feature-dim", type=int, default=PRESET["feature_dim"])
    g.add_argument("--noise", type=float, default=PRESET["noise"])
    g.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench", help="median timings of each primitive, fp32 vs quantized")
    _add_data_args(b)
    b.add_argument("--bits", type=int, default=8)
    b.add_argument("--hidden", type=int, default=128)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--reps", type=int, default=30)
    b.add_argument("--seed", type=int, default=0)
    return parser


def _config(args, **extra) -> TrainConfig:
    return TrainConfig(model=args.model, precision=args.precision, bits=args.bits, hidden=args.hidden,
                       heads=args.heads, seed=args.seed, leaky_slope=args.leaky_slope,
                       k_max=args.kmax, **extra).validate()


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


def run(args) -> int:
    if args.command == "train":
        cfg = _config(args, epochs=args.epochs, lr=args.lr, optimizer=args.optimizer,
                      quantize_last=args.quantize_last, rounding=args.rounding,
                      quantize_scores=args.quantize_scores, reuse=not args.no_reuse)
        if args.report:
            with open(args.report, "w", encoding="utf-8") as fh:
                run_train(cfg, args.graph, args.features, args.labels, args.split, report=fh)
        else:
            run_train(cfg, args.graph, args.features, args.labels, args.split, report=sys.stdout)
    elif args.command == "derive-bits":
        if args.precision != "quant" or args.bits != "auto":
            # the sweep itself is mode independent; accept the natural invocation
            args.precision, args.bits = "quant", "auto"
        cfg = _config(args, bits_threshold=args.threshold)
        ds = load_dataset(args.graph, args.features, args.labels, args.split, seed=args.seed)
        choice = derive_bits(cfg, ds)
        _emit({"bits": choice.bits, "threshold": args.threshold, "satisfied": choice.satisfied,
               "error_table": {str(k): v for k, v in choice.errors.items()}})
    elif args.command == "gen-synthetic":
        try:
            edges, X, y = gen_synthetic(args.nodes, args.classes, args.intra_p, args.inter_p,
                                        args.feature_dim, args.noise, args.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        paths = write_dataset(args.out, edges, X, y)
        _emit({"nodes": args.nodes, "edges": edges.num_edges, **{k: str(v) for k, v in paths.items()}})
    elif args.command == "bench":
        ds = load_dataset(args.graph, args.features, args.labels, args.split, seed=args.seed)
        for row in bench_primitives(ds, args.bits, args.hidden, args.heads, args.reps, args.seed):
            _emit(row)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors exit with EXIT_CONFIG, --help with 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return run(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
