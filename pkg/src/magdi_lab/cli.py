"""``magdi-lab`` command line: corpus generation, training, evaluation.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from .graph import GraphError, Structure, corpus_stats, drop_structures, read_corpus, write_corpus
from .sim import SimConfig, gen_corpus
from .trainer import CheckpointError, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        hint = _suggest(self, message)
        raise UsageError(f"{self.prog}: error: {message}{hint}")


def _subparsers(parser: argparse.ArgumentParser) -> dict:
    return next(a.choices for a in parser._actions if isinstance(a, argparse._SubParsersAction))


def _suggest(parser: argparse.ArgumentParser, message: str) -> str:
    words = []
    if "invalid choice:" in message:
        words = [message.split("invalid choice:")[1].split("'")[1]]
        pool = list(_subparsers(parser))
    elif "unrecognized arguments:" in message:
        words = message.split("unrecognized arguments:")[1].split()
        pool = [o for a in parser._actions for o in a.option_strings]
    else:
        return ""
    hits = [m for w in words for m in difflib.get_close_matches(w, pool, n=1)]
    return f" (did you mean {', '.join(hits)}?)" if hits else ""


def _dump(obj, out: str | None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=1) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_gen_corpus(args) -> int:
    cfg = SimConfig(
        task=args.task,
        n_instances=args.n,
        n_agents=args.agents,
        max_rounds=args.max_rounds,
        error_rates=[float(x) for x in args.error_rates.split(",")],
        follow_rate=args.follow,
        seed=args.seed,
        split=args.split,
        n_operands=args.operands,
    )
    _, stats = gen_corpus(cfg, args.out)
    print(stats.table(args.task))
    return EXIT_OK


def cmd_stats(args) -> int:
    corpus = read_corpus(args.input)
    stats = corpus_stats(corpus)
    if args.json:
        _dump(stats.to_dict(), None)
    else:
        print(stats.table(Path(args.input).stem))
    return EXIT_OK


def cmd_filter(args) -> int:
    corpus = read_corpus(args.input)
    drop = [Structure[s.strip().upper()] for s in args.drop.split(",") if s.strip()]
    kept = drop_structures(corpus, drop)
    write_corpus(args.out, kept)
    print(f"kept {len(kept)} of {len(corpus)} graphs")
    return EXIT_OK


def cmd_train(args) -> int:
    base = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {
        "level": args.level,
        "edge_variant": args.edge_variant,
        "seed": args.seed,
        "epochs": args.epochs,
        "corpus_paths": list(args.corpus) if args.corpus else None,
    }
    cfg = TrainConfig.from_dict({**base.to_dict(), **{k: v for k, v in overrides.items() if v is not None}})
    result = train(cfg, out_dir=args.out)
    last = result.log[-1] if result.log else {}
    print(json.dumps({"steps": len(result.log), "final": last}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    student = ev.Student.load(args.ckpt, max_new_tokens=args.max_new_tokens)
    testset = ev.load_testset(args.test)
    if args.sc:
        report = ev.self_consistency(student, testset, args.sc, args.temp, args.seed)
    else:
        report = ev.evaluate(student, testset)
    _dump(report.to_dict(), args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    paths = [p for p in args.ckpts.split(",") if p]
    names = args.levels.split(",") if args.levels else list(ev.LEVEL_ORDER[: len(paths)])
    if len(names) != len(paths):
        raise UsageError("--levels must name one level per checkpoint")
    testset = ev.load_testset(args.test)
    summary = ev.compare_checkpoints(dict(zip(names, paths)), testset, args.seeds)
    _dump(summary, args.out)
    return EXIT_OK


def cmd_efficiency(args) -> int:
    if args.reference is not None:
        reference = args.reference
    elif args.reference_corpus:
        reference = ev.discussion_token_cost(read_corpus(args.reference_corpus))
    else:
        raise UsageError("give --reference or --reference-corpus")
    reports = {}
    for path in args.report or []:
        reports[Path(path).stem] = json.loads(Path(path).read_text(encoding="utf-8"))["mean_generated_tokens"]
    if args.student_tokens is not None:
        reports["student"] = args.student_tokens
    if not reports:
        raise UsageError("give --report or --student-tokens")
    factors = ev.efficiency_report(reports, reference)
    _dump({"reference_tokens": reference, "student_tokens": reports, "reduction": factors}, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="magdi-lab", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING", help="logging verbosity (default WARNING)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gen-corpus", help="simulate discussions and write a graph corpus")
    g.add_argument("--task", default="modsum", choices=["modsum", "listmax"])
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--agents", type=int, default=3)
    g.add_argument("--max-rounds", type=int, default=3)
    g.add_argument("--error-rates", default="0.1,0.25,0.4")
    g.add_argument("--follow", type=float, default=0.8)
    g.add_argument("--operands", type=int, default=3)
    g.add_argument("--split", default="train", help="id namespace; use distinct splits for train and test")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_corpus)

    s = sub.add_parser("stats", help="round / agent / structure breakdown of a corpus")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_stats)

    f = sub.add_parser("filter", help="drop graphs by structure class")
    f.add_argument("--in", dest="input", required=True)
    f.add_argument("--drop", required=True, help="comma-separated classes, e.g. G3 or G2,G3")
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_filter)

    t = sub.add_parser("train", help="train a student at one distillation level")
    t.add_argument("--config")
    t.add_argument("--corpus", action="append", help="repeat to mix several corpora")
    t.add_argument("--level", choices=["r0", "cn", "an", "magdi"])
    t.add_argument("--edge-variant", choices=["directed", "undirected", "fully_connected"])
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="zero-shot accuracy and token counts")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--sc", type=int, default=0, help="self-consistency sample count")
    e.add_argument("--temp", type=float, default=0.7)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--max-new-tokens", type=int, default=64)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compare", help="compare checkpoints across levels and seeds")
    c.add_argument("--ckpts", required=True, help="comma-separated, in level order")
    c.add_argument("--levels", help="comma-separated level names (default r0,cn,an,magdi)")
    c.add_argument("--test", required=True)
    c.add_argument("--seeds", type=int)
    c.add_argument("--out")
    c.set_defaults(fn=cmd_compare)

    x = sub.add_parser("efficiency", help="token reduction of students against the discussion")
    x.add_argument("--report", action="append", help="eval report JSON (repeatable)")
    x.add_argument("--student-tokens", type=float)
    x.add_argument("--reference", type=float, help="reference tokens per example")
    x.add_argument("--reference-corpus", help="graph corpus whose discussions set the reference")
    x.add_argument("--out")
    x.set_defaults(fn=cmd_efficiency)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            sub = _subparsers(parser)[args.command]
            pool = [o for a in sub._actions for o in a.option_strings]
            hits = [m for w in extra for m in difflib.get_close_matches(w.split("=")[0], pool, n=1)]
            hint = f" (did you mean {', '.join(hits)}?)" if hits else ""
            raise UsageError(f"{sub.prog}: error: unrecognized arguments: {' '.join(extra)}{hint}")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"magdi-lab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphError, CheckpointError, ValueError, OSError, ArithmeticError, KeyError) as exc:
        print(f"magdi-lab: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
