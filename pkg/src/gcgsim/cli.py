"""Command-line entry point: ``gcgsim <subcommand> ...``.

Results go to stdout as JSON (CSV for ``gncm-dump``); errors go to stderr as
one JSON object. Exit codes: 0 ok, 1 runtime failure, 2 usage error,
3 gradient check failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import gradcheck
from . import model as M
from . import training as T
from .ged import DEFAULT_BEAM_WIDTH, compute_ged
from .graph import LabelVocab, extract_partition, load_graph, load_graphs, pad_pair
from . import metrics as mt

EXIT_RUNTIME, EXIT_USAGE, EXIT_GRADCHECK = 1, 2, 3


class UsageError(Exception):
    pass


class JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def _print_json(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def env_seed() -> int:
    raw = os.environ.get("GCGSIM_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"GCGSIM_SEED must be an integer, got {raw!r}")


# ----------------------------------------------------------------------------
# subcommands


def cmd_ged(args) -> int:
    vocab = LabelVocab()
    g1, g2 = load_graph(args.graph1, vocab), load_graph(args.graph2, vocab)
    pair = pad_pair(g1, g2)
    _print_json(compute_ged(pair, args.method, args.beam_width).to_json(pair))
    return 0


def cmd_partition(args) -> int:
    vocab = LabelVocab()
    g1, g2 = load_graph(args.graph1, vocab), load_graph(args.graph2, vocab)
    pair = pad_pair(g1, g2)
    res = compute_ged(pair, args.method, args.beam_width)
    out = extract_partition(pair, res.alignment).to_json()
    out.update(ged=int(res.value), exact=res.exact, method=res.method)
    _print_json(out)
    return 0


def data_config(args) -> D.DataConfig:
    return D.DataConfig(
        n_graphs=args.n_graphs, n_min=args.n_min, n_max=args.n_max, n_labels=args.n_labels,
        edge_prob=args.edge_prob, connected=args.connected, seed=args.seed, pairing=args.pairing,
        train_partners=args.train_partners, db_size=args.db_size, self_pairs=args.self_pairs,
        exact_cap=args.exact_cap, beam_width=args.beam_width, graphs_file=args.graphs,
    )


def cmd_gen(args) -> int:
    ds = D.build_dataset(data_config(args), args.out, jobs=args.jobs)
    _print_json({"out": str(args.out), "pairs": ds.manifest["pair_counts"],
                 "graphs": len(ds.graphs), "vocabulary": ds.manifest["vocabulary"]})
    return 0


def cmd_gen_eis(args) -> int:
    rng = np.random.default_rng(args.seed)
    vocab = LabelVocab([str(k) for k in range(args.n_labels)])
    graphs, side_a, side_b, builds = {}, [], [], []
    for t in range(args.count):
        a, b, info = D.gen_eis_pairs(args.mode, rng, args.n_labels, tuple(args.core_size),
                                     tuple(args.attach_size), args.edge_prob, tag=f"{args.mode}{t:04d}")
        for s in (a, b):
            graphs[s.g1.id], graphs[s.g2.id] = s.g1, s.g2
        side_a.append(a)
        side_b.append(b)
        builds.append(info.to_json())
    construction = {
        "aligned": "pair1=(C+A1, C+A2), pair2=(C+B1, C+B2): one shared core, distinct attachments",
        "unaligned": "pair1=(C1+D1, C1+D2), pair2=(C2+D1, C2+D2): distinct cores, shared attachments",
    }[args.mode]
    ds = D.Dataset(graphs, {"eis_a": side_a, "eis_b": side_b},
                   {"mode": args.mode, "seed": args.seed, "construction": construction,
                    "audit": "core maps onto core in an optimal alignment (exact GED + partition check)",
                    "pairs": builds, "vocabulary": vocab.names}, vocab)
    D.save_dataset(ds, args.out)
    _print_json({"out": str(args.out), "mode": args.mode, "pairs": args.count})
    return 0


def model_config(args, vocab_size: int) -> M.ModelConfig:
    return M.ModelConfig(
        channels=args.channels, ntn_k=args.ntn_k, beta=args.beta, lam=args.lam,
        label_vocab_size=vocab_size, seed=args.seed, head_hidden=args.head_hidden,
        alpha_map=args.alpha_map, iir_flip=args.iir_flip, use_gncm=not args.no_gncm,
        use_psgd=not args.no_psgd,
    )


def cmd_train(args) -> int:
    ds = D.load_dataset(args.data)
    for split in ("train", "val"):
        if not ds.splits.get(split):
            raise ValueError(f"dataset {args.data} has no {split} pairs")
    mcfg = model_config(args, max(1, len(ds.vocab)))
    tcfg = T.TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                         clip_norm=args.clip_norm)
    log = (lambda s: print(s, file=sys.stderr, flush=True)) if args.verbose else None
    start = time.time()
    params, report = T.fit(ds.splits["train"], ds.splits["val"], ds.splits.get("test"), mcfg, tcfg,
                           checkpoint_path=args.out, log=log, global_rank=args.global_rank,
                           vocabulary=ds.vocab.names)
    M.save_model(args.out, mcfg, params, ds.vocab.names)
    text = report.dumps()
    if args.report:
        Path(args.report).write_text(text + "\n")
    sys.stdout.write(text + "\n")
    if args.verbose:
        print(f"trained in {time.time() - start:.1f}s", file=sys.stderr)
    return 0


def _load_model_for(path, vocab: LabelVocab):
    cfg, params, names = M.load_model_file(path)
    if names is not None and vocab.names[:len(names)] != names[:len(vocab.names)]:
        raise ValueError(f"label vocabulary of {path} ({names}) does not match the data ({vocab.names})")
    return cfg, params


def _read_predictions(path) -> np.ndarray:
    with open(path) as fh:
        text = fh.read().strip()
    if text.startswith("["):
        return np.asarray(json.loads(text), dtype=float)
    return np.asarray([json.loads(line)["pred"] for line in text.splitlines() if line.strip()], dtype=float)


def cmd_eval(args) -> int:
    ds = D.load_dataset(args.data)
    samples = ds.splits.get(args.split)
    if not samples:
        raise ValueError(f"dataset {args.data} has no {args.split} pairs")
    if (args.model is None) == (args.predictions is None):
        raise UsageError("give exactly one of --model or --predictions")
    if args.predictions:
        pred = _read_predictions(args.predictions)
    else:
        cfg, params = _load_model_for(args.model, ds.vocab)
        pred = M.predict([(s.g1, s.g2) for s in samples], params, cfg)
    rep = mt.evaluate_query_set([s.g1.id for s in samples], pred, [s.sim for s in samples],
                                global_rank=args.global_rank)
    _print_json(rep)
    return 0


def cmd_rank(args) -> int:
    _, _, names = M.load_model_file(args.model)
    vocab = LabelVocab(names or [])
    cfg, params = _load_model_for(args.model, vocab)
    query = load_graph(args.query, vocab)
    database = load_graphs(args.database, vocab)
    if not database:
        raise ValueError("empty database")
    scores = M.predict([(query, g) for g in database], params, cfg)
    order = mt.top_k(scores, min(args.k, len(database)))
    rows = []
    truth = {}
    if args.with_ged:
        labelled = D.label_pairs([(query, database[i]) for i in order], args.exact_cap, jobs=args.jobs)
        truth = {int(i): s for i, s in zip(order, labelled)}
    for r, i in enumerate(order, start=1):
        row = {"rank": r, "graph": database[i].id, "score": float(scores[i])}
        if i in truth:
            row.update(ged=truth[i].ged, sim=truth[i].sim, source=truth[i].source)
        rows.append(row)
    _print_json({"query": query.id, "k": len(rows), "results": rows})
    return 0


def cmd_swap_eval(args) -> int:
    ds = D.load_dataset(args.data) if args.mode == "iis" else _load_eis(args.data)
    cfg, params = _load_model_for(args.model, ds.vocab)
    if args.mode == "iis":
        samples = ds.splits.get(args.split)
        if not samples:
            raise ValueError(f"dataset {args.data} has no {args.split} pairs")
        rep = T.swap_mse_difference(samples, params, cfg, "iis")
    else:
        rep = T.swap_mse_difference(ds.splits["eis_a"], params, cfg, args.mode, ds.splits["eis_b"])
    _print_json(rep)
    return 0


def _load_eis(path) -> D.Dataset:
    root = Path(path)
    base = D.load_dataset(root)
    for name in ("eis_a", "eis_b"):
        f = root / f"pairs.{name}.jsonl"
        if not f.exists():
            raise FileNotFoundError(f"{root}: missing {f.name} (generate with gen-eis)")
        base.splits[name] = D.read_pairs(f, base.graphs)
    return base


def cmd_gncm_dump(args) -> int:
    _, _, names = M.load_model_file(args.model)
    vocab = LabelVocab(names or [])
    cfg, params = _load_model_for(args.model, vocab)
    g1, g2 = load_graph(args.graph1, vocab), load_graph(args.graph2, vocab)
    acts = M.run_pairs([(g1, g2)], params, cfg)
    if not cfg.use_gncm:
        raise ValueError("model was trained without GNCM; there are no node weights to dump")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "graph", "node_index", "omega"])
    for layer, side, node, omega in M.gncm_rows(acts):
        w.writerow([layer, g1.id if side == "i" else g2.id, node, repr(omega)])
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_gradcheck(args) -> int:
    start = time.time()
    ok, results = gradcheck.run_all(args.instances, args.seed)
    worst = max(results, key=lambda r: r.rel_error)
    failures = [r for r in results if not r.ok]
    _print_json({
        "ok": ok, "checks": len(results), "failures": len(failures),
        "worst": {"case": worst.case, "tensor": worst.tensor, "rel_error": worst.rel_error},
        "failed": [{"case": r.case, "tensor": r.tensor, "rel_error": r.rel_error} for r in failures[:20]],
        "tolerance": gradcheck.TOLERANCE, "step": gradcheck.STEP, "seconds": round(time.time() - start, 2),
    })
    return 0 if ok else EXIT_GRADCHECK


# ----------------------------------------------------------------------------
# parser


def _add_model_flags(p) -> None:
    p.add_argument("--channels", type=int, nargs="+", default=[64, 64, 32, 16])
    p.add_argument("--ntn-k", type=int, default=16)
    p.add_argument("--head-hidden", type=int, default=32)
    p.add_argument("--beta", type=float, default=0.05, help="IIR replacement probability")
    p.add_argument("--lam", type=float, default=0.05, help="edit-cost loss weight (0 disables ECP)")
    p.add_argument("--alpha-map", choices=["clamp", "affine"], default="clamp")
    p.add_argument("--iir-flip", action="store_true", help="keep with probability beta instead of replacing")
    p.add_argument("--no-gncm", action="store_true")
    p.add_argument("--no-psgd", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    common = JsonArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="defaults to $GCGSIM_SEED, else 0")
    common.add_argument("--config", default=None, help="JSON file of flag defaults (flags win)")
    common.add_argument("--jobs", type=int, default=1, help="processes for pair labelling")

    parser = JsonArgumentParser(prog="gcgsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=JsonArgumentParser)
    methods = ["brute", "astar", "beam", "hungarian", "min"]

    p = sub.add_parser("ged", parents=[common], help="GED between two graph files")
    p.add_argument("graph1")
    p.add_argument("graph2")
    p.add_argument("--method", choices=methods, default="astar")
    p.add_argument("--beam-width", type=int, default=DEFAULT_BEAM_WIDTH)
    p.set_defaults(func=cmd_ged)

    p = sub.add_parser("partition", parents=[common], help="aligned/unaligned substructures of a pair")
    p.add_argument("graph1")
    p.add_argument("graph2")
    p.add_argument("--method", choices=methods, default="astar")
    p.add_argument("--beam-width", type=int, default=DEFAULT_BEAM_WIDTH)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("gen", parents=[common], help="generate and label a dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--graphs", default=None, help="ingest this graph collection instead of generating")
    p.add_argument("--n-graphs", type=int, default=200)
    p.add_argument("--n-min", type=int, default=5)
    p.add_argument("--n-max", type=int, default=10)
    p.add_argument("--n-labels", type=int, default=3)
    p.add_argument("--edge-prob", type=float, default=0.4)
    p.add_argument("--connected", action="store_true")
    p.add_argument("--pairing", choices=["sampled", "all"], default="sampled")
    p.add_argument("--train-partners", type=int, default=10)
    p.add_argument("--db-size", type=int, default=40)
    p.add_argument("--self-pairs", action="store_true")
    p.add_argument("--exact-cap", type=int, default=8, help="largest graph size labelled by exact A*")
    p.add_argument("--beam-width", type=int, default=DEFAULT_BEAM_WIDTH)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("gen-eis", parents=[common], help="generate extra-instance swap pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["aligned", "unaligned"], required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--n-labels", type=int, default=3)
    p.add_argument("--edge-prob", type=float, default=0.4)
    p.add_argument("--core-size", type=int, nargs=2, default=[4, 6])
    p.add_argument("--attach-size", type=int, nargs=2, default=[1, 2])
    p.set_defaults(func=cmd_gen_eis)

    p = sub.add_parser("train", parents=[common], help="train a model on a dataset directory")
    p.add_argument("data")
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--report", default=None, help="also write the report JSON here")
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--global-rank", action="store_true")
    p.add_argument("--verbose", action="store_true")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="metric report on a split")
    p.add_argument("data")
    p.add_argument("--model", default=None)
    p.add_argument("--predictions", default=None, help="JSON list or JSONL with 'pred', one per pair")
    p.add_argument("--split", default="test")
    p.add_argument("--global-rank", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rank", parents=[common], help="top-k database graphs for a query")
    p.add_argument("model")
    p.add_argument("query")
    p.add_argument("database")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--with-ged", action="store_true", help="label the returned pairs")
    p.add_argument("--exact-cap", type=int, default=8)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("swap-eval", parents=[common], help="MSE change under embedding swaps")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--mode", choices=["iis", "eisa", "eisu"], default="iis")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_swap_eval)

    p = sub.add_parser("gncm-dump", parents=[common], help="per-layer node weights as CSV")
    p.add_argument("model")
    p.add_argument("graph1")
    p.add_argument("graph2")
    p.set_defaults(func=cmd_gncm_dump)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _apply_config(parser, argv) -> argparse.Namespace:
    """Parse with precedence flags > --config file > built-in defaults."""
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("missing subcommand")
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = sorted(k for k in (key.replace("-", "_") for key in cfg) if k not in known)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {unknown}")
        subparser.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = env_seed()
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE
    except SystemExit as exc:
        # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - every failure is reported as JSON
        _emit_error(type(exc).__name__, str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
