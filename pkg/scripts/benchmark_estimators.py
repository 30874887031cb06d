##################################################################################################
#                                        SCRIPT OVERVIEW                                         #
#                                                                                                #
# This script compares the empirical Fisher and Hutchinson trace estimators on a checkpoint:     #
# trace-normalized per-iteration variance, seconds per iteration and the resulting speedup of    #
# EF over Hutchinson at a fixed tolerance, each as mean ± std over repeats. It also writes the   #
# estimator variances for several batch sizes, and recomputes the published ResNet-18 speedup    #
# from its published inputs as a self-test of the speedup formula.                               #
#                                                                                                #
# Timing values depend on the machine; they are the only non-reproducible outputs of the         #
# pipeline.                                                                                      #
#                                                                                                #
# Configuration Variables:                                                                       #
# - CONFIG_PATH: Run configuration used when the script is executed directly.                    #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

from fitkit.config import build_datasets, load_run_config
from fitkit.experiments import benchmark_estimators, reference_speedup_check, variance_vs_batch_size
from scripts.common import BATCH_SIZE_TABLE, BENCH_FILE, CHECKPOINT_FILE, load_model, resolve
from utils.artifact_store import ArtifactStore                      # Output directory
from utils.logs_config import logger                                # Logs and events

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

CONFIG_PATH = "configs/desk_cnn.yaml"

##################################################################################################
#                                        IMPLEMENTATION                                          #
##################################################################################################

def benchmark(config, store, checkpoint=None):
    """
    Writes bench.json and the batch-size table for a checkpoint.

    Returns:
        Path: Location of the benchmark report.
    """

    checkpoint = resolve(store, checkpoint, CHECKPOINT_FILE)
    model = load_model(checkpoint)
    train_set, _ = build_datasets(config)
    b = config.bench

    check = reference_speedup_check()
    logger.info(f"📊 Published speedup recomputed: {check['speedup']:.2f} "
                f"({'within' if check['within_band'] else 'outside'} {check['band_mean']} ± {check['band_std']})")

    logger.info(f"🚀 Benchmarking estimators: batch {b.batch_size}, {b.iters} iterations, {b.repeats} repeats.")
    result = benchmark_estimators(model, train_set, b.batch_size, b.iters, config.seed, b.repeats)
    if result.speedup <= 1:
        logger.warning(f"⚠️ EF is not faster than Hutchinson here (speedup {result.speedup:.2f}).")

    rows = variance_vs_batch_size(model, train_set, b.batch_sizes, b.iters, b.repeats, config.seed)
    store.write_csv(BATCH_SIZE_TABLE, rows)
    return store.save_document(BENCH_FILE, "bench", result.to_document(), inputs={"checkpoint": checkpoint})

##################################################################################################
#                                               MAIN                                             #
##################################################################################################

if __name__ == "__main__":
    try:
        run_config = load_run_config(CONFIG_PATH)
        with ArtifactStore(run_config.output_dir) as artifact_store:
            benchmark(run_config, artifact_store)
            logger.info("✅ Benchmark completed successfully.")

    except Exception as exc:
        logger.error(f"❌ Benchmark error: {exc}")

    finally:
        logger.info("🔄 Process finished.")
