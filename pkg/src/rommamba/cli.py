"""Command-line entry point: ``rommamba {train,eval,count,route-stats,selfcheck}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""
import argparse
import json
import os
import sys
from importlib import resources

from .accounting import count_flops, format_count
from .config import RunConfig, load_config
from .data import Corpus, pack, split_documents
from .errors import ConfigError, NumericalError, ShapeError
from .model import build_model, lm_forward
from .routing import max_entropy, routing_stats
from .tensor import no_grad
from .train import MetricsSink, evaluate_ppl, load_model, train, write_ppl_csv

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def bundled_configs():
    return sorted(p.name[:-4] for p in resources.files("rommamba.configs").iterdir() if p.name.endswith(".ini"))


def resolve_config(name_or_path) -> RunConfig:
    """A path to an ``.ini`` file, or the name of a bundled config such as ``mamba-115m``."""
    if os.path.exists(name_or_path):
        return load_config(name_or_path)
    ref = resources.files("rommamba.configs").joinpath(f"{name_or_path}.ini")
    if ref.is_file():
        with resources.as_file(ref) as p:
            return load_config(p)
    raise ConfigError(f"no config file or bundled config named {name_or_path!r}; bundled: {', '.join(bundled_configs())}")


def _apply_overrides(run: RunConfig, args):
    if getattr(args, "seed", None) is not None:
        run.train.seed = args.seed
    if getattr(args, "dtype", None) is not None:
        run.train.dtype = args.dtype
    run.train.validate()
    return run


def _corpus(run: RunConfig):
    d = run.data
    return Corpus.load(d.corpus, d.val_fraction, d.split_seed)


def cmd_train(args, out):
    run = _apply_overrides(resolve_config(args.config), args)
    corpus = _corpus(run)
    state = None
    if args.resume:
        model, state, _ = load_model(args.resume)
    else:
        model = build_model(run.model, seed=run.train.seed, dtype=run.train.np_dtype)
    out_dir = args.out_dir
    sink = MetricsSink(os.path.join(out_dir, "metrics.jsonl") if out_dir else None,
                       callback=None if args.quiet else (lambda r: out(json.dumps(r, sort_keys=True))))
    try:
        res = train(model, corpus, run.train, out_dir=out_dir, state=state, max_steps=args.steps, metrics=sink)
    finally:
        sink.close()
    if res.final_val:
        out(f"final validation loss {res.final_val['loss']:.4f}  ppl {res.final_val['ppl']:.3f}")
    if out_dir:
        out(f"checkpoint written to {os.path.join(out_dir, 'checkpoint')}")
    return EXIT_OK


def cmd_eval(args, out):
    run = _apply_overrides(resolve_config(args.config), args)
    corpus = _corpus(run)
    model, _, _ = load_model(args.checkpoint)
    lengths = [int(x) for x in args.context_lengths.split(",") if x.strip()]
    if not lengths:
        raise UsageError("--context-lengths needs at least one integer")
    rows = evaluate_ppl(model, corpus, lengths, max_windows=args.max_windows)
    out(f"{'context':>8} {'windows':>8} {'tokens':>9} {'nll':>8} {'ppl':>10}")
    for r in rows:
        out(f"{r['context_length']:>8d} {r['windows']:>8d} {r['tokens']:>9d} {r['nll']:>8.4f} {r['ppl']:>10.3f}")
    csv_path = args.csv or (os.path.join(args.out_dir, "ppl.csv") if args.out_dir else None)
    if csv_path:
        os.makedirs(os.path.dirname(os.path.abspath(csv_path)), exist_ok=True)
        write_ppl_csv(rows, csv_path)
        out(f"wrote {csv_path}")
    return EXIT_OK


def cmd_count(args, out):
    run = resolve_config(args.config)
    rep = count_flops(run.model, args.seq_len)
    out(f"total params   {rep.total_params:>16,d}  ({format_count(rep.total_params)})")
    out(f"active params  {rep.active_params:>16,d}  ({format_count(rep.active_params)})")
    out(f"forward FLOPs  {rep.forward_flops:>16,d}  ({format_count(rep.forward_flops)}, seq_len={args.seq_len})")
    if args.breakdown:
        out(f"{'part':<22} {'total':>14} {'active':>14} {'flops':>18}")
        for c in rep.layers:
            out(f"{c.name:<22} {c.total_params:>14,d} {c.active_params:>14,d} {c.flops:>18,d}")
    return EXIT_OK


def cmd_route_stats(args, out):
    model, _, _ = load_model(args.checkpoint)
    with open(args.input, "rb") as f:
        ids = pack(split_documents(f.read()))
    if ids.size == 0:
        raise UsageError(f"{args.input} contains no text")
    ids = ids[: args.max_tokens]
    with no_grad():
        _, aux = lm_forward(model, ids)
    routed = aux.decisions()
    if not routed:
        out("model has no routed layers")
        return EXIT_OK
    for i, name, d in routed:
        s = routing_stats(d)
        util = " ".join(f"{u:.3f}" for u in s["utilization"])
        out(f"layer {i:3d} {name:6s} tokens={d.n_tokens} entropy={s['entropy']:.3f}/{max_entropy(d.num_experts):.3f} "
            f"max_load={s['max_load']:.3f} utilization=[{util}]")
    return EXIT_OK


def cmd_selfcheck(args, out):
    from .selfcheck import run_selfcheck

    return EXIT_OK if run_selfcheck(out) else EXIT_NUMERICAL


def build_parser():
    p = _Parser(prog="rommamba", description="Routing Mamba models: train, evaluate, count and inspect routing.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, dtype=True):
        sp.add_argument("config", help="config .ini path or bundled config name")
        sp.add_argument("--seed", type=int, default=None)
        if dtype:
            sp.add_argument("--dtype", choices=("float32", "float64"), default=None)
        sp.add_argument("--out-dir", default=None)

    t = sub.add_parser("train", help="train a model from a config")
    common(t)
    t.add_argument("--steps", type=int, default=None, help="stop after this many steps (resumable)")
    t.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    t.add_argument("--quiet", action="store_true", help="do not echo metrics to stdout")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="perplexity at several context lengths")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--context-lengths", default="256,512,1024")
    e.add_argument("--max-windows", type=int, default=None)
    e.add_argument("--csv", default=None, help="write the table as CSV")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("count", help="parameter and FLOP accounting")
    c.add_argument("config")
    c.add_argument("--seq-len", type=int, default=4096)
    c.add_argument("--breakdown", action="store_true")
    c.set_defaults(fn=cmd_count)

    r = sub.add_parser("route-stats", help="expert utilization of a checkpoint on a text file")
    common(r, dtype=False)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--max-tokens", type=int, default=4096)
    r.set_defaults(fn=cmd_route_stats)

    s = sub.add_parser("selfcheck", help="run the built-in oracle and invariant checks")
    s.set_defaults(fn=cmd_selfcheck)
    return p


def main(argv=None, out=print) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            parser.print_help()
            return EXIT_USAGE
        return args.fn(args, out)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
