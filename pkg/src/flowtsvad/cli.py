# src/flowtsvad/cli.py
"""
flowtsvad simulate | train {label-ae,flow-tsvad,baseline} | infer | score REF HYP | ensemble HYP... --out OUT

Every subcommand takes --config FILE, --preset NAME and one --<key> VALUE flag per RunConfig key.
Failures print a single `error[<category>]: <message>` line to stderr.
"""
import argparse
import json
import os
import sys

from src.flowtsvad import pipeline
from src.flowtsvad.config import add_config_arguments, config_from_args, save_config
from src.flowtsvad.errors import EXIT_CODES, FlowTsvadError
from src.flowtsvad.scoring import format_report

TRAIN_TARGETS = ("label-ae", "flow-tsvad", "baseline")


def cmd_simulate(args):
    config = config_from_args(args)
    out = pipeline.simulate_dataset(config)
    print(f"[simulate] dataset at {out}")


def cmd_train(args):
    config = config_from_args(args)
    if args.target == "label-ae":
        pipeline.train_label_ae_from_dataset(config)
    else:
        pipeline.train_tsvad_from_dataset(config, args.target, resume=config.resume)


def cmd_infer(args):
    config = config_from_args(args)
    summary = pipeline.infer_dataset(config, out_dir=args.out)
    print(summary.to_string(index=False))


def cmd_score(args):
    config = config_from_args(args)
    report = pipeline.score_files(args.reference, args.hypothesis, config)
    print(format_report(report))
    if args.json:
        os.makedirs(os.path.dirname(os.path.abspath(args.json)), exist_ok=True)
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        save_config(config, os.path.splitext(args.json)[0] + ".config.yaml")


def cmd_ensemble(args):
    config = config_from_args(args)
    combined = pipeline.ensemble_files(args.hypotheses, args.out, config)
    save_config(config, os.path.splitext(args.out)[0] + ".config.yaml")
    print(f"[ensemble] {len(args.hypotheses)} runs, {len(combined)} files -> {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowtsvad", description="generative target-speaker diarization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic conversation dataset")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the label auto-encoder, flow-tsvad or the baseline")
    p.add_argument("target", choices=TRAIN_TARGETS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="diarize a dataset split for every (steps, seed)")
    p.add_argument("--out", default=None, help="output directory (default <output_dir>/infer)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("score", help="DER of a hypothesis RTTM against a reference RTTM")
    p.add_argument("reference")
    p.add_argument("hypothesis")
    p.add_argument("--json", default=None, help="also write the report as JSON")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("ensemble", help="vote several hypothesis RTTMs into one")
    p.add_argument("hypotheses", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    for name, subparser in sub.choices.items():
        add_config_arguments(subparser)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except FlowTsvadError as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return EXIT_CODES[e.category]
    except Exception as e:
        print(f"error[internal]: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CODES["internal"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
