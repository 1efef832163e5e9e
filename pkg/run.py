"""
Form extraction harness.
Usage: python run.py <command> [--preset desk] [--config file.json] [--set key=value ...]

Commands: gen-corpus, import-funsd, pretrain, finetune, eval, ablate, ablate-pretrain, oracles.
"""
import argparse
import logging
import os
import sys

from dotenv import load_dotenv

load_dotenv()

import harness  # noqa: E402
from config_helpers import build_config, preset_names  # noqa: E402
from errors import FormGraphError, OracleFailure  # noqa: E402

logger = logging.getLogger("formgraph")

COMMANDS = ("gen-corpus", "import-funsd", "pretrain", "finetune", "eval", "ablate", "ablate-pretrain", "oracles")


def configure_logging() -> None:
    level = os.environ.get("FORMGRAPH_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        stream=sys.stderr,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="run.py", description="Layout-aware form information extraction")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--preset", help=f"named preset ({', '.join(preset_names()) or 'none found'})")
    parser.add_argument("--config", help="flat JSON config file")
    parser.add_argument("--set", dest="set_pairs", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", dest="out_dir")
    parser.add_argument("--corpus", dest="corpus_dir")
    parser.add_argument("--checkpoint", help="eval: checkpoint to score; finetune: pretrained initialization")
    parser.add_argument("--resume", action="store_true", help="finetune: continue from out/checkpoints/last")
    parser.add_argument("--split", help="eval: corpus split (default test); import-funsd: split to write (default train)")
    parser.add_argument("--gold-as-predictions", action="store_true", help="eval: score gold spans against themselves")
    parser.add_argument("--inject-bug", choices=harness.BUGS, help="oracles: negative control")
    parser.add_argument("--source", help="import-funsd: FUNSD directory or annotation file")
    parser.add_argument("--limit", type=int, help="import-funsd: import at most this many files")
    return parser


def main(argv=None) -> int:
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "import-funsd" and not args.source:
        parser.error("import-funsd needs --source")
    try:
        config = build_config(
            preset=args.preset,
            config_path=args.config,
            set_pairs=args.set_pairs,
            explicit={"seed": args.seed, "out_dir": args.out_dir, "corpus_dir": args.corpus_dir},
        )
        logger.info("Running %s (seed %d, output %s)", args.command, config.seed, config.out_dir)
        if args.command == "gen-corpus":
            harness.cmd_gen_corpus(config)
        elif args.command == "import-funsd":
            harness.cmd_import_funsd(config, args.source, split=args.split or "train", limit=args.limit)
        elif args.command == "pretrain":
            harness.cmd_pretrain(config)
        elif args.command == "finetune":
            harness.cmd_finetune(config, init_checkpoint=args.checkpoint, resume=args.resume)
        elif args.command == "eval":
            scores = harness.cmd_eval(config, args.checkpoint, split=args.split or "test", gold_as_predictions=args.gold_as_predictions)
            m = scores.micro
            logger.info("Entity P %.4f  R %.4f  F1 %.4f  (macro F1 %.4f)", m.precision, m.recall, m.f1, scores.macro_f1)
        elif args.command == "ablate":
            harness.cmd_ablate(config)
        elif args.command == "ablate-pretrain":
            harness.cmd_ablate_pretrain(config)
        elif args.command == "oracles":
            harness.cmd_oracles(config, inject_bug=args.inject_bug)
    except OracleFailure as e:
        logger.error("%s", e)
        return 1
    except FormGraphError as e:
        logger.error("%s failed: %s", args.command, e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
