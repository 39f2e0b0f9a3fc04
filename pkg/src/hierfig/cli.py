"""hierfig command line.

Exit codes: 0 success, 1 config error, 2 data error, 3 LVLM endpoint error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .corpus import ManifestError
from .features import FeatureError
from .lvlm import LvlmError
from .pipeline import STAGES, DataError, Run, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ENDPOINT = 0, 1, 2, 3

MINING = ["parse-panels", "associate-text", "mine-regions", "postprocess-boxes"]
HELP = {
    "parse-panels": "propose, merge and filter panels for every figure",
    "associate-text": "route caption fragments to panels and describe each panel",
    "mine-regions": "detect markers and grounded objects, fuse them into regions",
    "postprocess-boxes": "clip, filter, NMS and merge region boxes",
    "build-corpus": "validate the corpus and write the train/eval split",
    "pretrain": "alternating hierarchical contrastive training",
    "eval-retrieval": "image-text recall@k on the held-out split",
    "report": "summarize cleanup, training and retrieval",
    "all": "every stage in order",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML run configuration (see data/defaults.yaml)")
    common.add_argument("--work-dir", help="override paths.work_dir")
    common.add_argument("--figures", help="override paths.figures")
    common.add_argument("--mock-dir", help="replay LVLM answers from this fixture directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field, e.g. --set regions.tau=0.08")
    common.add_argument("--force", action="store_true", help="recompute cached per-figure outputs")
    common.add_argument("--keep-raw", action="store_true", help="keep raw LVLM proposals as audit sidecars")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hierfig", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ["all"]:
        sp = sub.add_parser(name, parents=[common], help=HELP[name])
        if name in ("build-corpus", "all"):
            sp.add_argument("--synthetic", metavar="SPEC",
                            help="generate a synthetic corpus from this YAML spec instead of mining")
    return parser


def _config(args) -> dict:
    overrides = list(args.set)
    if args.work_dir:
        overrides.append(f"paths.work_dir={args.work_dir}")
    if args.figures:
        overrides.append(f"paths.figures={args.figures}")
    if args.mock_dir:
        overrides += [f"lvlm.mock_dir={args.mock_dir}", "lvlm.mode=mock"]
    return load_config(args.config, overrides)


def execute(args) -> int:
    cfg = _config(args)
    run = Run(cfg, force=args.force, keep_raw=args.keep_raw)
    if args.command == "all":
        synthetic = getattr(args, "synthetic", None)
        stages = ([] if synthetic else MINING) + ["build-corpus", "pretrain", "eval-retrieval", "report"]
    else:
        stages = [args.command]
    for stage in stages:
        kw = {"synthetic": args.synthetic} if stage == "build-corpus" else {}
        result = run_stage(run, stage, **kw)
        summary = json.dumps(result, sort_keys=True) if stage != "report" else ""
        print(f"[{stage}] ok {summary}".rstrip())
    if "report" in stages:
        print(run.path("report.txt").read_text("utf-8"), end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return execute(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LvlmError as exc:
        print(f"LVLM endpoint error: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except (DataError, ManifestError, FeatureError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
