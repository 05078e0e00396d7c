"""Command line: mapattack {gen,classify,attack,eval,run,replay}.

Exit codes: 0 ok, 2 usage, 3 config or data, 4 external service, 5 internal.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .config import RunConfig, UsageError
from .errors import ExternalServiceError, MapAttackError, WireDecodeError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_EXTERNAL, EXIT_INTERNAL = 0, 2, 3, 4, 5
log = logging.getLogger("mapattack")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run config")
    common.add_argument("--out", help="run directory (overrides config 'out')")
    common.add_argument("--jobs", type=int, default=1, help="scene-level worker threads")
    common.add_argument("--seed", type=int, help="overrides config 'seed'")
    common.add_argument("--oracle", choices=("surrogate", "external"))
    common.add_argument("--vlm", choices=("on", "off"))
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="mapattack", description="Symmetry-bias attack pipeline on synthetic scenes.")
    ap.add_argument("--version", action="version", version=f"mapattack {__version__}")
    sub = ap.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen", parents=[common], help="generate and render a scene suite")
    sub.add_parser("classify", parents=[common], help="rule-based (+ optional VLM) asymmetry verdicts")
    sub.add_parser("attack", parents=[common], help="optimize one attack per selected scene")
    sub.add_parser("eval", parents=[common], help="map AP and planning metrics, clean vs attacked")
    sub.add_parser("run", parents=[common], help="gen, classify, attack and eval in sequence")
    rp = sub.add_parser("replay", help="re-evaluate a finished run from its artifacts")
    rp.add_argument("run_dir")
    rp.add_argument("-v", "--verbose", action="store_true")
    return ap


def _run(args) -> int:
    from . import pipeline

    if args.verb == "replay":
        text, same = pipeline.cmd_replay(args.run_dir)
        print(text, end="")
        if not same:
            print("replay: recomputed report differs from eval/report.json", file=sys.stderr)
            return EXIT_INTERNAL
        print("replay: report identical", file=sys.stderr)
        return EXIT_OK
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    cfg = RunConfig.load(args.config).with_overrides(seed=args.seed, out=args.out, oracle=args.oracle,
                                                     vlm=args.vlm)
    verbs = ("gen", "classify", "attack", "eval") if args.verb == "run" else (args.verb,)
    for verb in verbs:
        if verb == "gen":
            idx = pipeline.cmd_gen(cfg, args.jobs)
            print(f"gen: {len(idx['scenes'])} scenes {idx['counts']} -> {cfg.out / 'scenes'}")
        elif verb == "classify":
            res = pipeline.cmd_classify(cfg, args.jobs)
            c = res["confusion"]["final"]
            print(f"classify: tp={c['tp']} fp={c['fp']} fn={c['fn']} tn={c['tn']} "
                  f"precision={c['precision']} recall={c['recall']}")
        elif verb == "attack":
            idx = pipeline.cmd_attack(cfg, args.jobs)
            print(f"attack: {len(idx['scenes'])} scenes attacked (budget {idx['budget']})")
        else:
            report = pipeline.cmd_eval(cfg, args.jobs)
            print(pipeline.report_table(report), end="")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ExternalServiceError, WireDecodeError) as e:
        print(f"external service error: {e}", file=sys.stderr)
        return EXIT_EXTERNAL
    except MapAttackError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:  # noqa: BLE001
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
