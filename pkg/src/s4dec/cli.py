"""Command-line entry point: ``s4dec {train,eval,avg,longform,gen-data}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import average_checkpoints
from .exceptions import S4DecError
from .harness import evaluate, load_config, run_longform_experiment, train
from .tasks import Metrics, concat_longform, gen_continuous_task, gen_copy_task, gen_reverse_task, read_jsonl, write_jsonl

log = logging.getLogger("s4dec")


def _cmd_train(args) -> int:
    rc = load_config(args.config)
    if args.seed is not None:
        rc = rc.replace(seed=args.seed)
    out = Path(args.out or rc.out_dir or "runs/train")
    result = train(rc, out_dir=out)
    last = result.history[-1] if result.history else {}
    print(json.dumps({"out_dir": str(out), "epochs": len(result.history),
                      "best_metric": result.checkpoints[0][0] if result.checkpoints else None,
                      "last": last}, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    ds = read_jsonl(args.data)
    prefix = Path(args.out) if args.out else None
    res = evaluate(args.ckpt, ds, beam=args.beam, out_prefix=prefix)
    print(json.dumps(res.to_dict() if isinstance(res, Metrics) else res, indent=1))
    return 0


def _cmd_avg(args) -> int:
    avg = average_checkpoints(args.ckpts)
    path = avg.save(args.out)
    print(path)
    return 0


def _cmd_longform(args) -> int:
    rc = load_config(args.config)
    if args.seed is not None:
        rc = rc.replace(seed=args.seed)
    out = Path(args.out or rc.out_dir or "runs/longform")
    report = run_longform_experiment(rc, out)
    summary = {}
    for variant, blocks in report["variants"].items():
        summary[variant] = {name: [round(b["error_rate"], 4) for b in blocks[name]["buckets"]]
                            for name in ("original", "longform")}
    print(json.dumps({"out_dir": str(out), "error_by_bucket": summary}, indent=1))
    return 0


def _cmd_gen_data(args) -> int:
    lo, hi = args.min_len, args.max_len
    if args.task == "continuous":
        ds = gen_continuous_task(args.n, (lo, hi), args.features, args.seed, vocab=args.vocab)
    else:
        gen = gen_copy_task if args.task == "copy" else gen_reverse_task
        ds = gen(args.n, (lo, hi), args.vocab, args.seed)
    if args.longform:
        ds = concat_longform(ds, args.longform)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(ds, args.out)
    print(f"wrote {len(ds)} examples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="s4dec", description="S4 and Transformer decoders on synthetic seq2seq tasks")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model and keep the k best checkpoints")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="decode a dataset with a checkpoint and report bucketed error rates")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--beam", type=int)
    e.add_argument("--out", help="write <out>.json and <out>.csv")
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("avg", help="average checkpoints with identical layouts")
    a.add_argument("--out", required=True)
    a.add_argument("ckpts", nargs="+")
    a.set_defaults(func=_cmd_avg)

    lf = sub.add_parser("longform", help="train both variants and compare on concatenated long inputs")
    lf.add_argument("--config", required=True)
    lf.add_argument("--seed", type=int)
    lf.add_argument("--out")
    lf.set_defaults(func=_cmd_longform)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as JSON lines")
    g.add_argument("--task", required=True, choices=["copy", "reverse", "continuous"])
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--min-len", type=int, default=5)
    g.add_argument("--max-len", type=int, default=20)
    g.add_argument("--vocab", type=int, default=16)
    g.add_argument("--features", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--longform", type=int, default=0, metavar="K", help="concatenate every K examples")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except S4DecError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
