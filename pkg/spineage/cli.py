import argparse
import logging
import sys

from .config import ConfigException, load_config
from .pipeline import STAGES, Pipeline, PipelineLockException, StageDependencyException, StageFailure, ablation, parse_arm

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_STAGE_FAILED = 1
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_LOCKED = 4


def build_parser():
    parser = argparse.ArgumentParser(prog="spineage", description="Spine-age estimation pipeline on synthetic data")
    parser.add_argument("stages", nargs="+", metavar="stage",
                        help="one or more of: {}, all, ablation".format(", ".join(STAGES)))
    parser.add_argument("--config", help="INI configuration file (defaults to the desk preset)")
    parser.add_argument("--force", action="store_true", help="rerun stages even when their inputs are unchanged")
    parser.add_argument("--seed", type=int, help="override [pipeline] seed")
    parser.add_argument("--arm", action="append", default=[],
                        help="ablation arm as name:key=value[,key=value] (keys: data_size, loss, region)")
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        config = load_config(args.config, seed=args.seed)
        if "ablation" in args.stages:
            if len(args.stages) > 1:
                raise ConfigException("ablation runs on its own, not with other stages")
            if not args.arm:
                raise ConfigException("ablation needs at least one --arm")
            path = ablation(config, [parse_arm(text) for text in args.arm], force=args.force)
            logger.info("Ablation table written to %s", path)
        else:
            executed = Pipeline(config, force=args.force).run(args.stages)
            logger.info("Executed stages: %s", ", ".join(executed) or "none (all up to date)")
    except ConfigException as exc:
        logger.error("Configuration error: %s", exc)
        return EXIT_CONFIG
    except StageDependencyException as exc:
        logger.error("%s", exc)
        return EXIT_DEPENDENCY
    except PipelineLockException as exc:
        logger.error("%s", exc)
        return EXIT_LOCKED
    except StageFailure as exc:
        logger.error("%s", exc)
        return EXIT_STAGE_FAILED

    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
