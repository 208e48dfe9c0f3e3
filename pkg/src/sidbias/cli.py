"""Command-line entry point: ``sidbias <command> --config run.json [--out DIR] [--seed N]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import pipeline
from .pipeline import RunConfig

log = logging.getLogger("sidbias")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over = {}
    if args.out is not None:
        over["out_dir"] = args.out
    if args.seed is not None:
        over["seed"] = args.seed
    return replace(cfg, **over) if over else cfg


def _print(doc) -> None:
    print(json.dumps(doc, indent=1, sort_keys=True, default=str))


def cmd_gen_data(args) -> int:
    _print(pipeline.stage_gen_data(_config(args)))
    return 0


def cmd_tokenize(args) -> int:
    _print(pipeline.stage_tokenize(_config(args)))
    return 0


def cmd_train(args) -> int:
    _print(pipeline.stage_train(_config(args), resume=args.resume, stop_after=args.stop_after))
    return 0


def cmd_eval(args) -> int:
    _print(pipeline.stage_eval(_config(args), args.checkpoint))
    return 0


def cmd_biaslab(args) -> int:
    entry, ok = pipeline.stage_biaslab(_config(args), args.checkpoint)
    _print(entry)
    return 0 if ok else 3


def cmd_report(args) -> int:
    rows = pipeline.stage_report(args.runs, args.out or ".")
    _print([{"model": r.model, "cns": r.cns, **r.components} for r in rows])
    return 0


def cmd_init_config(args) -> int:
    cfg = _config(args)
    text = pipeline.canonical_json(cfg.to_json())
    if args.write:
        with open(args.write, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sidbias", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="run configuration JSON (defaults when omitted)")
        sp.add_argument("--out", help="run directory (overrides out_dir)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.set_defaults(func=fn)
        return sp

    add("gen-data", cmd_gen_data, "generate or load the corpus, split it and write item vectors")
    add("tokenize", cmd_tokenize, "assign semantic IDs and report trie statistics")
    t = add("train", cmd_train, "train the recommender and write checkpoint + loss log")
    t.add_argument("--resume", help="train_state.json to continue from")
    t.add_argument("--stop-after", type=int, help="stop after this many epochs in total")
    e = add("eval", cmd_eval, "beam-search recommendations and metrics")
    e.add_argument("--checkpoint", help="parameter checkpoint (default: run directory)")
    b = add("biaslab", cmd_biaslab, "gradient checks, starvation, amplification and suppression reports")
    b.add_argument("--checkpoint", help="parameter checkpoint (default: run directory)")
    r = add("report", cmd_report, "CNS table across run directories")
    r.add_argument("runs", nargs="+", help="run directories containing metrics.json")
    c = add("init-config", cmd_init_config, "print the default configuration")
    c.add_argument("--write", help="write to this path instead of stdout")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, FloatingPointError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
