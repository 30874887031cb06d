##################################################################################################
#                                        SCRIPT OVERVIEW                                         #
#                                                                                                #
# This script estimates per-block sensitivity traces of a trained checkpoint with one of three   #
# estimators:                                                                                    #
# - ef-weight:     empirical Fisher trace of each block's weights.                               #
# - ef-activation: empirical Fisher trace at each block's activation site.                       #
# - hutchinson:    Hutchinson estimate of each block's Hessian trace (Hessian-vector products).  #
#                                                                                                #
# Estimation stops when every block's relative standard error falls below the tolerance, or at   #
# max-iters. A tolerance of 0 always runs exactly max-iters iterations.                          #
#                                                                                                #
# Configuration Variables:                                                                       #
# - CONFIG_PATH: Run configuration used when the script is executed directly.                    #
# - HVP_PARAMETER_BUDGET: Largest model the Hutchinson mode accepts.                             #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

from fitkit.config import build_datasets, load_run_config
from fitkit.errors import ValidationError
from fitkit.sensitivity import ef_activation_trace, ef_weight_trace, hutchinson_trace
from scripts.common import CHECKPOINT_FILE, TRACE_MODES, load_model, resolve, trace_file, trace_table
from utils.artifact_store import ArtifactStore                      # Output directory
from utils.logs_config import logger                                # Logs and events

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

CONFIG_PATH = "configs/desk_cnn.yaml"
MODE = "ef-weight"

HVP_PARAMETER_BUDGET = 250_000  # Parameters above which one HVP per iteration is too slow on CPU

##################################################################################################
#                                        IMPLEMENTATION                                          #
##################################################################################################

def compute_traces(config, store, mode, checkpoint=None):
    """
    Estimates traces of a checkpoint and writes a trace report plus a per-block CSV.

    Args:
        config (RunConfig): Validated run configuration (trace section and dataset).
        store (ArtifactStore): Open output directory.
        mode (str): "ef-weight", "ef-activation" or "hutchinson".
        checkpoint (str | Path, optional): Model to analyse; the stored checkpoint by default.

    Returns:
        Path: Location of the trace report.

    Raises:
        ValidationError: Unknown mode, or a model above the HVP budget in Hutchinson mode.
        NumericalError: On a non-finite gradient.
    """

    if mode not in TRACE_MODES:
        raise ValidationError(f"Unknown trace mode '{mode}' (expected one of {sorted(TRACE_MODES)}).")
    checkpoint = resolve(store, checkpoint, CHECKPOINT_FILE)
    model = load_model(checkpoint)
    train_set, _ = build_datasets(config)
    t = config.trace

    num_params = sum(p.size for p in model.parameters())
    if mode == "hutchinson" and num_params > HVP_PARAMETER_BUDGET:
        raise ValidationError(f"Hutchinson mode is limited to {HVP_PARAMETER_BUDGET} parameters; "
                              f"this model has {num_params}. Use ef-weight instead.")

    logger.info(f"🚀 {mode} traces: batch {t.batch_size}, tolerance {t.tolerance}, max-iters {t.max_iters}.")
    if mode == "ef-weight":
        report = ef_weight_trace(model, train_set, t.batch_size, t.tolerance, t.max_iters, config.seed, t.window)
    elif mode == "ef-activation":
        report = ef_activation_trace(model, train_set, t.batch_size, t.tolerance, t.max_iters, config.seed, t.window)
    else:
        report = hutchinson_trace(model, train_set, t.max_iters, config.seed, t.batch_size, t.tolerance, t.window)

    for block in report.blocks.values():
        logger.info(f"📊 {block.name}: trace {block.trace:.6g} after {block.iterations} iterations")
    for name in report.fallback_blocks:
        logger.warning(f"⚠️ {name}: mean estimate is 0, convergence was judged on the absolute error.")

    store.write_csv(trace_table(mode), report.to_rows())
    return store.save_document(trace_file(mode), "trace_report", report.to_document(),
                               inputs={"checkpoint": checkpoint})

##################################################################################################
#                                               MAIN                                             #
##################################################################################################

if __name__ == "__main__":
    try:
        run_config = load_run_config(CONFIG_PATH)
        with ArtifactStore(run_config.output_dir) as artifact_store:
            compute_traces(run_config, artifact_store, MODE)
            logger.info("✅ Trace estimation completed successfully.")

    except Exception as exc:
        logger.error(f"❌ Trace estimation error: {exc}")

    finally:
        logger.info("🔄 Process finished.")
