"""
Command-line interface for fusion_select.
"""

import argparse
import json
import sys

from loguru import logger
from scipy import linalg

from fusion_select.config import COMMANDS, load_run_config
from fusion_select.exceptions import ConfigError, DataError, EstimationError
from fusion_select.processor import analyze, compare, simulate

PIPELINES = {"analyze": analyze, "compare": compare, "simulate": simulate}


def _comma_list(text):
    return tuple(part.strip() for part in text.split(",") if part.strip())


def build_parser():
    """
    Build the argument parser. Defaults are None so that config files and
    the environment can fill anything not given on the command line.

    Returns:
        argparse.ArgumentParser: Parser with analyze, simulate and compare subcommands
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-i', '--input', help='Input CSV file (S, A, Y, W* columns; optional NCO, DELTA)')
    common.add_argument('-o', '--output', help='Output report file, or directory for simulate')
    common.add_argument('--config', help='key=value config file')
    common.add_argument('--folds', type=int, help='Number of cross-validation folds (default: 10)')
    common.add_argument('--seed', type=int, help='Seed for folds, learners and Monte Carlo draws (default: 0)')
    common.add_argument('--draws', type=int, help='Monte Carlo draws for the interval (default: 1000)')
    common.add_argument('--alpha', type=float, help='Two-sided interval level (default: 0.05)')
    common.add_argument('--selector', help='Bias estimator of the selector: b2v, +nco or nco-only (default: b2v)')
    common.add_argument('--mode', choices=['weights', 'clever'],
                        help='TMLE targeting mode (default: weights)')
    common.add_argument('--penalty', type=float, help='Variance penalty c(n) of the selector (default: 1)')
    common.add_argument('--rand-prob', type=float, help='Known trial randomization probability')
    common.add_argument('--no-trim', dest='trim', action='store_const', const=False,
                        help='Keep external rows outside the trial covariate range')
    common.add_argument('--outcome-library', help="Outcome learners, e.g. 'ols' or 'lasso,ols'")
    common.add_argument('--treatment-library', help="Propensity learners, e.g. 'lasso,mean'")
    common.add_argument('--estimators', type=_comma_list,
                        help='Comma separated estimators (simulate) or methods (compare)')
    common.add_argument('--threads', type=int, help='Parallel workers (default: 1)')
    common.add_argument('-v', '--verbose', action='store_const', const=True,
                        help='Enable verbose output')

    parser = argparse.ArgumentParser(
        prog="fusion-select",
        description="Estimate a trial ATE, borrowing external controls only when they look unbiased.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    subparsers.add_parser('analyze', parents=[common], help='Run the experiment-selector CV-TMLE on a CSV file')
    subparsers.add_parser('compare', parents=[common], help='Run the comparison estimators on a CSV file')
    sim = subparsers.add_parser('simulate', parents=[common], help='Run the simulation study')
    sim.add_argument('--replicates', type=int, help='Number of replicates (default: 100)')
    sim.add_argument('--datasets', type=_comma_list, help='External datasets to simulate, e.g. 1,2,3')
    sim.add_argument('--aggregate-only', action='store_const', const=True,
                     help='Re-aggregate an existing replicate log without running replicates')
    sim.add_argument('--dgp', action='append', metavar='KEY=VALUE', default=None,
                     help='Override a data-generating parameter, e.g. --dgp n_rct=200')
    return parser


def parse_args(argv=None):
    """
    Parse command-line arguments.

    Returns:
        argparse.Namespace: Parsed arguments
    """
    return build_parser().parse_args(argv)


def cli_values(args):
    """Turn parsed arguments into the settings dict consumed by load_run_config."""
    values = {k: v for k, v in vars(args).items() if k not in ("config", "dgp")}
    for item in getattr(args, "dgp", None) or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--dgp expects KEY=VALUE, got '{item}'")
        values[f"dgp_{key.strip()}"] = value
    return values


def configure_logging(verbose=False):
    """Send fusion_select log records to stderr; DEBUG when verbose, otherwise WARNING."""
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else "WARNING")
    logger.enable("fusion_select")


def _fail(error, code):
    sys.stderr.write(json.dumps(error.to_dict()) + "\n")
    return code


def main(argv=None):
    """
    Main entry point for the command-line interface.

    Returns:
        int: 0 on success, 2 on data, configuration or file errors, 3 on estimation failure
    """
    args = parse_args(argv)
    configure_logging(bool(args.verbose))
    try:
        config = load_run_config(cli_values(args), args.config)
        if config.command not in COMMANDS:
            raise ConfigError(f"unknown command '{config.command}'")
        if config.command in ("analyze", "compare") and not config.input:
            raise ConfigError("Input path is required. Use -i or --input to specify.")
        PIPELINES[config.command](config)
        return 0
    except (DataError, ConfigError) as e:
        return _fail(e, 2)
    except OSError as e:
        return _fail(DataError(str(e)), 2)
    except EstimationError as e:
        return _fail(e, 3)
    except (linalg.LinAlgError, FloatingPointError) as e:
        return _fail(EstimationError(str(e)), 3)


if __name__ == "__main__":
    sys.exit(main())
