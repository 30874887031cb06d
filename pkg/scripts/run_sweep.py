##################################################################################################
#                                        SCRIPT OVERVIEW                                         #
#                                                                                                #
# This script runs the mixed-precision sweep: it samples random bit configurations, scores each  #
# one with every heuristic from the full-precision model's traces and ranges, then QAT-fine-     #
# tunes every configuration from the same checkpoint and records its quantized accuracies.       #
#                                                                                                #
# Key Features:                                                                                  #
# - Reuses stored trace and range reports when they exist, otherwise computes them first.        #
# - Fine-tuning runs on a thread pool bounded by --jobs; rows are written in config-id order.    #
# - A diverging row is kept, marked failed, and excluded later by the correlate stage.           #
#                                                                                                #
# Configuration Variables:                                                                       #
# - CONFIG_PATH: Run configuration used when the script is executed directly.                    #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

import math

from fitkit.config import build_datasets, load_run_config, qat_config
from fitkit.experiments import run_sweep
from fitkit.quantization import track_ranges
from scripts.common import (
    CHECKPOINT_FILE, RANGES_FILE, SWEEP_FILE, SWEEP_TABLE, load_model, load_ranges, load_traces, resolve, trace_file,
)
from utils.artifact_store import ArtifactStore                      # Output directory
from utils.logs_config import logger                                # Logs and events

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

CONFIG_PATH = "configs/desk_cnn.yaml"

##################################################################################################
#                                        IMPLEMENTATION                                          #
##################################################################################################

def _finite_or_none(value):
    return None if isinstance(value, float) and math.isnan(value) else value


def sweep_row_document(row):
    return {
        "config_id": row.config_id,
        "bitconfig": row.bitconfig.to_document(),
        "scores": row.scores,
        "train_accuracy": _finite_or_none(row.train_accuracy),
        "test_accuracy": _finite_or_none(row.test_accuracy),
        "seed": row.seed,
        "failed": row.failed,
        "error": row.error,
    }


def _stored(store, path, name, loader, inputs, role):
    """Loads a stored report when it exists; None tells run_sweep to compute it."""

    target = resolve(store, path, name)
    if path is None and not target.exists():
        return None
    inputs[role] = target
    return loader(target)


def sweep(config, store, checkpoint=None, weight_traces=None, activation_traces=None, ranges=None):
    """
    Runs the sweep and writes sweep.json (full rows) and sweep.csv (flat, plot-ready).

    Returns:
        Path: Location of the sweep document.
    """

    checkpoint = resolve(store, checkpoint, CHECKPOINT_FILE)
    model = load_model(checkpoint)
    train_set, test_set = build_datasets(config)
    inputs = {"checkpoint": checkpoint}

    w_report = _stored(store, weight_traces, trace_file("ef-weight"), load_traces, inputs, "weight_traces")
    a_report = _stored(store, activation_traces, trace_file("ef-activation"), load_traces, inputs,
                       "activation_traces")
    r_report = _stored(store, ranges, RANGES_FILE, load_ranges, inputs, "ranges")
    if r_report is None:
        r_report = track_ranges(model, train_set, config.quantization.ema_decay)

    t = config.trace
    trace_kwargs = {"batch_size": t.batch_size, "tolerance": t.tolerance, "max_iters": t.max_iters,
                    "window": t.window, "seed": config.seed}
    rows = run_sweep(
        model, train_set, test_set, config.sweep.n_configs, config.quantization.bits, config.seed,
        qat_config(config), w_report, a_report, r_report, trace_kwargs, config.sweep.jobs,
    )
    for row in rows:
        logger.debug(f"📊 config {row.config_id}: test accuracy {row.test_accuracy:.4f} in {row.wall_time:.1f}s")

    store.write_csv(SWEEP_TABLE, [row.to_row() for row in rows])
    return store.save_document(SWEEP_FILE, "sweep", {
        "seed": config.seed,
        "bits": list(config.quantization.bits),
        "qat": config.qat.model_dump(),
        "rows": [sweep_row_document(row) for row in rows],
    }, inputs=inputs)

##################################################################################################
#                                               MAIN                                             #
##################################################################################################

if __name__ == "__main__":
    try:
        run_config = load_run_config(CONFIG_PATH)
        with ArtifactStore(run_config.output_dir) as artifact_store:
            sweep(run_config, artifact_store)
            logger.info("✅ Sweep completed successfully.")

    except Exception as exc:
        logger.error(f"❌ Sweep error: {exc}")

    finally:
        logger.info("🔄 Process finished.")
