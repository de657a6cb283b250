"""
Command line front end: `xlinfluence <command> [options]`.
"""
import sys
import argparse
import logging
from typing import Optional, Sequence
from colorama import Fore, Style
from xlinfluence import pipeline
from xlinfluence.config import load_config, with_seed, bundled_configs
from xlinfluence.enums import EXIT, CHECKPOINTS
from xlinfluence.errors import (ConfigurationError, ContractViolation, FormatError, DependencyError,
                                LockedError, StaleCacheError)


logger = logging.getLogger("root_logger")
COMMANDS = ("gen-data", "train", "prune", "influence", "analyze", "verify", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xlinfluence",
        description="Language-specific subnetworks and cross-language training-data influence "
                    "on a synthetic multilingual classifier.")
    parser.add_argument("command", choices=COMMANDS, help="Pipeline stage to run")
    parser.add_argument("--config", default="ci-scale",
                        help=f"Config file, or a bundled config name {bundled_configs()}")
    parser.add_argument("--mode", default=CHECKPOINTS.FULL.value, choices=[c.value for c in CHECKPOINTS],
                        help="Training run for `train`")
    parser.add_argument("--variant", default=None, help="Influence variant (default: all)")
    parser.add_argument("--language", default=None, help="Language to prune (default: all)")
    parser.add_argument("--seed", type=int, default=None,
                        help="Override the corpus and model-initialization seeds")
    parser.add_argument("--seeds", type=int, nargs="+", default=None,
                        help="With `report`: run every seed and write the seed summary")
    parser.add_argument("--out", default=None, help="Output directory (default: <output_dir>/<name>)")
    parser.add_argument("--force", action="store_true", help="Recompute stages with stale caches")
    return parser


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    kw = {"out": args.out, "force": args.force}
    if args.command == "gen-data":
        pipeline.cmd_gen_data(cfg, **kw)
    elif args.command == "train":
        pipeline.cmd_train(cfg, args.mode, **kw)
    elif args.command == "prune":
        pipeline.cmd_prune(cfg, args.language, **kw)
    elif args.command == "influence":
        pipeline.cmd_influence(cfg, args.variant, **kw)
    elif args.command == "analyze":
        pipeline.cmd_analyze(cfg, **kw)
    elif args.command == "report" and args.seeds:
        pipeline.cmd_seed_summary(cfg, args.seeds, **kw)
    elif args.command == "report":
        pipeline.cmd_report(cfg, **kw)
    elif not pipeline.cmd_verify(cfg, **kw):
        return EXIT.FAILURE.value
    return EXIT.OK.value


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except (ContractViolation, ConfigurationError, FormatError) as e:
        logger.error(f"{Fore.RED}{type(e).__name__}: {e}{Style.RESET_ALL}")
        return EXIT.CONTRACT.value
    except (DependencyError, StaleCacheError) as e:
        logger.error(f"{Fore.RED}{type(e).__name__}: {e}{Style.RESET_ALL}")
        return EXIT.DEPENDENCY.value
    except LockedError as e:
        logger.error(f"{Fore.RED}{e}{Style.RESET_ALL}")
        return EXIT.LOCKED.value
    except Exception as e:
        logger.exception(f"{Fore.RED}{args.command} failed: {e}{Style.RESET_ALL}")
        return EXIT.FAILURE.value


if __name__ == "__main__":
    sys.exit(main())
