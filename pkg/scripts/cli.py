##################################################################################################
#                                        SCRIPT OVERVIEW                                         #
#                                                                                                #
# Command-line entry point of the FITKit pipeline. Every subcommand runs one stage and reads     #
# the artifacts earlier stages wrote to the same output directory:                               #
#                                                                                                #
#   train      -> checkpoint.json, train_history.csv, train_report.json                          #
#   calibrate  -> ranges.json                                                                    #
#   trace      -> traces_<kind>.json / .csv     (--mode ef-weight | ef-activation | hutchinson)  #
#   fit        -> fit_report.json                                                                #
#   sweep      -> sweep.json, sweep.csv                                                          #
#   correlate  -> correlation.json, correlation.csv                                              #
#   bench      -> bench.json, variance_vs_batch_size.csv                                         #
#                                                                                                #
# Exit codes: 0 success, 1 validation failure, 2 numerical failure.                              #
#                                                                                                #
# Usage:                                                                                         #
#   python -m scripts.cli train --config configs/desk_cnn.yaml                                   #
#   python -m scripts.cli trace --config configs/desk_cnn.yaml --mode ef-weight --tolerance 0.01 #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

import argparse
import sys

from fitkit.config import apply_overrides, load_run_config
from fitkit.errors import FitKitError, ValidationError
from scripts.benchmark_estimators import benchmark
from scripts.calibrate_ranges import calibrate_ranges
from scripts.common import TRACE_MODES
from scripts.compute_fit import NOISE_MODELS, compute_fit
from scripts.compute_traces import compute_traces
from scripts.correlate_sweep import correlate_sweep
from scripts.run_sweep import sweep
from scripts.train_model import train_model
from utils.artifact_store import ArtifactStore                      # Output directory
from utils.logs_config import logger                                # Logs and events

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

EXIT_OK = 0
EXIT_VALIDATION = 1

##################################################################################################
#                                        ARGUMENTS                                               #
##################################################################################################

class _Parser(argparse.ArgumentParser):
    """Argument errors are validation failures (exit 1), not argparse's exit 2."""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _bit_list(text):
    try:
        return [int(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None


def _common_flags():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
    common.add_argument("--seed", type=int)
    common.add_argument("--tolerance", type=float, help="relative standard error at which traces stop")
    common.add_argument("--max-iters", type=int, dest="max_iters")
    common.add_argument("--bits", type=_bit_list, help="allowed bit widths, e.g. 8,6,4,3")
    common.add_argument("--jobs", type=int, help="sweep worker threads")
    common.add_argument("--out", dest="output_dir", help="output directory")
    return common


def build_parser():
    common = _common_flags()
    parser = _Parser(prog="fitkit", description="Fisher Information Trace quantization-sensitivity pipeline")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    commands.add_parser("train", parents=[common], help="train the full-precision model")

    calibrate = commands.add_parser("calibrate", parents=[common], help="calibrate quantization ranges")
    calibrate.add_argument("--checkpoint")

    trace = commands.add_parser("trace", parents=[common], help="estimate per-block traces")
    trace.add_argument("--mode", choices=sorted(TRACE_MODES), default="ef-weight")
    trace.add_argument("--checkpoint")

    fit = commands.add_parser("fit", parents=[common], help="score one bit configuration")
    fit.add_argument("--weight-traces", dest="weight_traces")
    fit.add_argument("--activation-traces", dest="activation_traces")
    fit.add_argument("--ranges")
    fit.add_argument("--bitconfig", help="YAML/JSON bit configuration")
    fit.add_argument("--uniform-bits", type=int, dest="uniform_bits")
    fit.add_argument("--noise-model", choices=NOISE_MODELS, default="uniform", dest="noise_model")
    fit.add_argument("--checkpoint")

    sweep_cmd = commands.add_parser("sweep", parents=[common], help="QAT sweep over random bit configurations")
    sweep_cmd.add_argument("--checkpoint")
    sweep_cmd.add_argument("--weight-traces", dest="weight_traces")
    sweep_cmd.add_argument("--activation-traces", dest="activation_traces")
    sweep_cmd.add_argument("--ranges")

    correlate = commands.add_parser("correlate", parents=[common], help="rank-correlate a sweep")
    correlate.add_argument("--sweep", dest="sweep_path")

    bench = commands.add_parser("bench", parents=[common], help="EF vs Hutchinson benchmark")
    bench.add_argument("--checkpoint")
    return parser

##################################################################################################
#                                        IMPLEMENTATION                                          #
##################################################################################################

def run_command(args, config, store):
    if args.command == "train":
        return train_model(config, store)
    if args.command == "calibrate":
        return calibrate_ranges(config, store, args.checkpoint)
    if args.command == "trace":
        return compute_traces(config, store, args.mode, args.checkpoint)
    if args.command == "fit":
        return compute_fit(config, store, args.weight_traces, args.activation_traces, args.ranges, args.bitconfig,
                           args.uniform_bits, args.noise_model, args.checkpoint)
    if args.command == "sweep":
        return sweep(config, store, args.checkpoint, args.weight_traces, args.activation_traces, args.ranges)
    if args.command == "correlate":
        return correlate_sweep(config, store, args.sweep_path)
    return benchmark(config, store, args.checkpoint)


def main(argv=None):
    """
    Parses arguments, validates the run configuration and runs one stage.

    Returns:
        int: Process exit code.
    """

    try:
        args = build_parser().parse_args(argv)
        config = apply_overrides(
            load_run_config(args.config), seed=args.seed, tolerance=args.tolerance, max_iters=args.max_iters,
            bits=args.bits, jobs=args.jobs, output_dir=args.output_dir,
        )
        with ArtifactStore(config.output_dir) as store:
            output = run_command(args, config, store)
        logger.info(f"✅ {args.command} completed: {output}")
        return EXIT_OK

    except FitKitError as exc:
        logger.error(f"❌ {type(exc).__name__}: {exc}")
        return exc.exit_code

    except Exception as exc:
        logger.error(f"❌ Unexpected error: {exc}")
        return EXIT_VALIDATION

    finally:
        logger.info("🔄 Process finished.")

##################################################################################################
#                                               MAIN                                             #
##################################################################################################

if __name__ == "__main__":
    sys.exit(main())
