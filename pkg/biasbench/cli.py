"""
Command line entry point.

    biasbench synth|train|attribute|evaluate|report --config <file> [--out <dir>] [--methods a,b] [--seed N]

Exit codes: 0 on success, 2 for usage or configuration errors, 1 for all other failures.
"""

import argparse
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from . import commands, utils
from .exceptions import UsageError
from .models import METHODS, RunConfig

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def setup_logging(debug: bool):
    level = logging.DEBUG if debug else logging.INFO
    unimportant_level = logging.INFO if debug else logging.WARN
    format = '%(asctime)s.%(msecs)03d [%(levelname).1s:%(name)s:%(lineno)d] %(message)s'
    datefmt = '%Y/%m/%d %H:%M:%S'

    logging.basicConfig(level=level, format=format, datefmt=datefmt)
    logging.captureWarnings(True)

    logging.getLogger('numexpr').setLevel(unimportant_level)


def parse_args(raw_args: list[str]) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog='biasbench',
                                     description='Measures how well attribution methods reveal injected biases')
    parser.add_argument('command', choices=list(commands.COMMANDS))
    parser.add_argument('--config', required=True, type=Path,
                        help='JSON run configuration')
    parser.add_argument('--out', type=Path,
                        help='Artifact root directory. Overrides the configured root.')
    parser.add_argument('--methods',
                        help=f'Comma-separated attribution methods ({",".join(METHODS)})')
    parser.add_argument('--seed', type=int,
                        help='Overrides the data seed')
    parser.add_argument('--debug', action='store_true')
    return parser.parse_args(raw_args)


def parse_methods(value: str) -> list[str]:
    methods = [v.strip() for v in value.split(',') if v.strip()]
    unknown = [v for v in methods if v not in METHODS]
    if unknown or not methods:
        raise UsageError(f'Unknown method(s) {unknown}, valid: {", ".join(METHODS)}')
    return methods


def load_config(args: argparse.Namespace) -> RunConfig:
    if not args.config.exists():
        raise UsageError(f'Config file not found: {args.config}')
    try:
        raw = utils.read_json(args.config)
    except ValueError as ex:
        raise UsageError(f'Config file {args.config} is not valid JSON: {ex}')
    if not isinstance(raw, dict):
        raise UsageError(f'Config file {args.config} must contain a JSON object')

    if args.out is not None:
        raw['root'] = str(args.out)
    if args.methods is not None:
        raw['methods'] = parse_methods(args.methods)
    if args.seed is not None:
        raw['data_seed'] = args.seed
    return RunConfig.model_validate(raw)


def main(raw_args: list[str] | None = None) -> int:
    args = parse_args(sys.argv[1:] if raw_args is None else raw_args)
    config = utils.get_config()
    setup_logging(config.debug or args.debug)

    if config.debugger:  # pragma: no cover
        import faulthandler
        faulthandler.enable()

        import debugpy
        debugpy.listen(('0.0.0.0', 5678))
        LOGGER.info('Debugger is enabled and listening on 5678')

    try:
        cfg = load_config(args)
        LOGGER.debug(f'Run config: {cfg}')
        commands.run(args.command, cfg)
        return EXIT_OK

    except (UsageError, ValidationError) as ex:
        LOGGER.error(utils.strex(ex))
        return EXIT_USAGE

    except Exception as ex:
        LOGGER.error(utils.strex(ex, tb=config.debug))
        return EXIT_FAILURE


if __name__ == '__main__':  # pragma: no cover
    sys.exit(main())
