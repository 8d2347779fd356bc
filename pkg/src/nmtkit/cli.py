"""``nmtkit`` command line: datagen, train, decode, avg-ckpt, bench, regress.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench import report_table
from .checkpoint import average_checkpoints, latest_checkpoint, list_checkpoints, load_checkpoint, save_checkpoint
from .data.problems import get_problem
from .decoding import DecodeParams, TransformerScorer, decode_file
from .hparams import HParams, get_hparams
from .registry import RegistryError, list_registry
from .training import PINNED_SPECS, RunConfig, build_model, regression_suite, train

log = logging.getLogger("nmtkit")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _triple(p: argparse.ArgumentParser, problem=True, model=True) -> None:
    if problem:
        p.add_argument("--problem", required=True)
    if model:
        p.add_argument("--model", default="transformer")
    p.add_argument("--hparams_set", default="transformer_tiny")
    p.add_argument("--hparams", default="", help="comma-separated key=value overrides")
    p.add_argument("--seed", type=int, default=1)


def build_parser() -> Parser:
    parser = Parser(prog="nmtkit", description="Desk-scale sequence-to-sequence toolkit.")
    parser.add_argument("--registry", metavar="KIND",
                        help="list registered names of KIND (problems, models, hparams_sets)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("datagen", help="generate a problem's vocabulary and record files")
    _triple(p, model=False)
    p.add_argument("--data_dir", required=True)

    p = sub.add_parser("train", help="train a model")
    _triple(p)
    p.add_argument("--data_dir", required=True)
    p.add_argument("--output_dir", required=True)
    p.add_argument("--train_steps", type=int, default=1000)
    p.add_argument("--num_replicas", type=int, default=1)
    p.add_argument("--checkpoint_every", type=int, default=500)
    p.add_argument("--eval_every", type=int, default=500)
    p.add_argument("--keep_last", type=int, default=5)
    p.add_argument("--log_every", type=int, default=10)

    p = sub.add_parser("decode", help="translate a file line by line")
    _triple(p)
    p.add_argument("--data_dir", required=True)
    p.add_argument("--output_dir", help="use the latest checkpoint found here")
    p.add_argument("--checkpoint_path")
    p.add_argument("--decode_from_file", required=True)
    p.add_argument("--decode_to_file", required=True)
    p.add_argument("--beam_size", type=int, help="defaults to the hparams set (4)")
    p.add_argument("--alpha", type=float, help="defaults to the hparams set (0.6)")
    p.add_argument("--extra_length", type=int, help="defaults to the hparams set (50)")
    p.add_argument("--dump_attention", action="store_true")
    p.add_argument("--decode_workers", type=int, default=1)

    p = sub.add_parser("avg-ckpt", help="average checkpoints")
    p.add_argument("--checkpoints", nargs="*", default=[], help="checkpoint files")
    p.add_argument("--output_dir", help="average the last --last checkpoints found here")
    p.add_argument("--last", type=int, default=5)
    p.add_argument("--out", required=True, help="path of the averaged checkpoint")

    p = sub.add_parser("bench", help="layer complexity bench")
    p.add_argument("--csv", help="also write the table as CSV here")

    p = sub.add_parser("regress", help="pinned end-to-end regression runs")
    p.add_argument("--work_dir", required=True)
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--only", action="append", help="restrict to these problems")
    return parser


def resolve_hparams(args) -> HParams:
    return get_hparams(args.hparams_set).override_from_string(args.hparams)


def decode_params(args, hp: HParams) -> DecodeParams:
    pick = lambda flag, default: default if flag is None else flag
    return DecodeParams(beam_size=pick(args.beam_size, hp.beam_size), alpha=pick(args.alpha, hp.alpha),
                        extra_length=pick(args.extra_length, hp.extra_length),
                        dump_attention=args.dump_attention)


def header(args) -> str:
    get = lambda k: getattr(args, k, None) or "-"
    line = (f"problem={get('problem')} model={get('model')} hparams_set={get('hparams_set')} "
            f"seed={getattr(args, 'seed', '-')}")
    if getattr(args, "hparams", ""):
        line += f" hparams={args.hparams}"
    return line


def cmd_datagen(args) -> None:
    hp = resolve_hparams(args)
    paths = get_problem(args.problem).generate(args.data_dir, args.seed, hp)
    for name, path in paths.items():
        print(f"{name}: {path}")


def cmd_train(args) -> None:
    hp = resolve_hparams(args)
    run = RunConfig(output_dir=args.output_dir, data_dir=args.data_dir, train_steps=args.train_steps,
                    seed=args.seed, num_replicas=args.num_replicas, checkpoint_every=args.checkpoint_every,
                    keep_last=args.keep_last, eval_every=args.eval_every, log_every=args.log_every)
    res = train(args.problem, args.model, hp, run)
    if res.evals:
        last = res.evals[-1]
        print(f"step {last['step']}: dev loss {last['loss']:.4f} token_accuracy {last['token_accuracy']:.4f}")


def cmd_decode(args) -> None:
    hp = resolve_hparams(args)
    if args.checkpoint_path:
        path = Path(args.checkpoint_path)
    elif args.output_dir:
        path = latest_checkpoint(args.output_dir)
    else:
        raise UsageError("decode needs --checkpoint_path or --output_dir")
    problem = get_problem(args.problem)
    vocab = problem.vocabulary(args.data_dir)
    ckpt = load_checkpoint(path)
    if ckpt.hparams_set != hp.set_name:
        log.warning("checkpoint was trained with %s, decoding with %s", ckpt.hparams_set, hp.set_name)
    model = build_model(args.model, hp, vocab.size)
    scorer = TransformerScorer(model, ckpt)
    n = decode_file(scorer, vocab, args.decode_from_file, args.decode_to_file,
                    decode_params(args, hp), workers=args.decode_workers)
    print(f"decoded {n} lines with {path.name}")


def cmd_avg_ckpt(args) -> None:
    paths = [Path(p) for p in args.checkpoints]
    if args.output_dir:
        paths += list_checkpoints(args.output_dir)[-args.last:]
    if not paths:
        raise UsageError("avg-ckpt needs --checkpoints or --output_dir")
    avg = average_checkpoints(paths)
    save_checkpoint(args.out, avg)
    print(f"averaged {len(paths)} checkpoints (step {avg.step}) into {args.out}")


def cmd_bench(args) -> int:
    report = report_table()
    print(report.render_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0 if report.passed else 2


def cmd_regress(args) -> int:
    specs = [s for s in PINNED_SPECS if not args.only or s.problem in args.only]
    report = regression_suite(specs, args.work_dir, args.report)
    for e in report["entries"]:
        s = e["spec"]
        print(f"{'PASS' if e['pass'] else 'FAIL'} {s['problem']} {s['hparams_set']} {s['steps']} steps: "
              f"{e['metric']} {e['value']:.4f} (threshold {e['threshold']})")
    if not args.report:
        print(json.dumps(report, indent=2))
    return 0 if report["pass"] else 2


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "decode": cmd_decode,
            "avg-ckpt": cmd_avg_ckpt, "bench": cmd_bench, "regress": cmd_regress}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.registry:
            for name in list_registry(args.registry):
                print(name)
            return 0
        if not args.command:
            parser.error("a subcommand is required")
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except RegistryError as e:
        print(f"nmtkit: error: {e.args[0]}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s:%(name)s:%(message)s")
    print(header(args))
    try:
        rc = COMMANDS[args.command](args)
    except UsageError as e:
        print(f"nmtkit {args.command}: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures map to exit code 2
        print(f"nmtkit {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
