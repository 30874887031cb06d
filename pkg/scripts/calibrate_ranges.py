##################################################################################################
#                                        SCRIPT OVERVIEW                                         #
#                                                                                                #
# This script calibrates quantization ranges for a trained checkpoint: exact weight extrema per  #
# quantizable block and EMA-tracked activation extrema at every block's activation site, taken   #
# over the training set in dataset order.                                                        #
#                                                                                                #
# Configuration Variables:                                                                       #
# - CONFIG_PATH: Run configuration used when the script is executed directly.                    #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

from fitkit.config import build_datasets, load_run_config
from fitkit.quantization import track_ranges
from scripts.common import CHECKPOINT_FILE, RANGES_FILE, load_model, resolve
from utils.artifact_store import ArtifactStore                      # Output directory
from utils.logs_config import logger                                # Logs and events

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

CONFIG_PATH = "configs/desk_cnn.yaml"

##################################################################################################
#                                        IMPLEMENTATION                                          #
##################################################################################################

def calibrate_ranges(config, store, checkpoint=None):
    """
    Writes the RangeReport of a checkpoint.

    Args:
        config (RunConfig): Validated run configuration (dataset and EMA decay).
        store (ArtifactStore): Open output directory.
        checkpoint (str | Path, optional): Model to calibrate; the stored checkpoint by default.

    Returns:
        Path: Location of the range report.
    """

    checkpoint = resolve(store, checkpoint, CHECKPOINT_FILE)
    model = load_model(checkpoint)
    train_set, _ = build_datasets(config)

    logger.info(f"🚀 Calibrating ranges on {len(train_set)} examples (EMA decay {config.quantization.ema_decay}).")
    ranges = track_ranges(model, train_set, config.quantization.ema_decay)
    for name in model.block_names:
        (w_lo, w_hi), (a_lo, a_hi) = ranges.weight[name], ranges.activation[name]
        logger.info(f"📊 {name}: weights [{w_lo:.4g}, {w_hi:.4g}], activations [{a_lo:.4g}, {a_hi:.4g}]")

    return store.save_document(RANGES_FILE, "range_report", ranges.to_document(), inputs={"checkpoint": checkpoint})

##################################################################################################
#                                               MAIN                                             #
##################################################################################################

if __name__ == "__main__":
    try:
        run_config = load_run_config(CONFIG_PATH)
        with ArtifactStore(run_config.output_dir) as artifact_store:
            calibrate_ranges(run_config, artifact_store)
            logger.info("✅ Calibration completed successfully.")

    except Exception as exc:
        logger.error(f"❌ Calibration error: {exc}")

    finally:
        logger.info("🔄 Process finished.")
