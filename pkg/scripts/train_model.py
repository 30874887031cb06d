##################################################################################################
#                                        SCRIPT OVERVIEW                                         #
#                                                                                                #
# This script trains the full-precision model described by the run configuration and stores it   #
# as the checkpoint every later stage starts from.                                               #
#                                                                                                #
# Key Features:                                                                                  #
# - Synthetic digits or IDX data, desk CNN or MLP, Adam/SGD with a cosine schedule.              #
# - Writes checkpoint.json (byte-identical for identical seeds), the per-epoch loss history as   #
#   CSV and a train report with full-precision train/test accuracy.                              #
#                                                                                                #
# Configuration Variables:                                                                       #
# - CONFIG_PATH: Run configuration used when the script is executed directly.                    #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

from fitkit.config import build_configured_model, build_datasets, load_run_config, train_config
from fitkit.models import evaluate, save_checkpoint, train
from scripts.common import CHECKPOINT_FILE, TRAIN_HISTORY_FILE, TRAIN_REPORT_FILE
from utils.artifact_store import ArtifactStore                      # Output directory
from utils.logs_config import logger                                # Logs and events

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

CONFIG_PATH = "configs/desk_cnn.yaml"

##################################################################################################
#                                        IMPLEMENTATION                                          #
##################################################################################################

def train_model(config, store):
    """
    Trains a model from scratch and writes the checkpoint, loss history and train report.

    Args:
        config (RunConfig): Validated run configuration.
        store (ArtifactStore): Open output directory.

    Returns:
        Path: Location of the checkpoint.

    Raises:
        NumericalError: If training diverges.
    """

    train_set, test_set = build_datasets(config)
    model = build_configured_model(config, train_set.sample_shape)
    cfg = train_config(config)
    logger.info(f"🚀 Training {config.model.kind} ({len(model.blocks)} quantizable blocks) "
                f"for {cfg.epochs} epochs on {len(train_set)} examples.")

    model, history = train(model, train_set, cfg)
    train_eval = evaluate(model, train_set)
    test_eval = evaluate(model, test_set)
    logger.info(f"📊 Full precision: train accuracy {train_eval.accuracy:.4f}, test accuracy {test_eval.accuracy:.4f}")

    checkpoint = store.path(CHECKPOINT_FILE)
    save_checkpoint(model, checkpoint)
    store.write_csv(TRAIN_HISTORY_FILE, history.to_rows())
    store.save_document(TRAIN_REPORT_FILE, "train_report", {
        "seed": config.seed,
        "train": config.train.model_dump(),
        "model": config.model.model_dump(),
        "train_accuracy": train_eval.accuracy,
        "train_loss": train_eval.loss,
        "test_accuracy": test_eval.accuracy,
        "test_loss": test_eval.loss,
        "final_loss": history.losses[-1],
    }, inputs={"checkpoint": checkpoint})
    return checkpoint

##################################################################################################
#                                               MAIN                                             #
##################################################################################################

if __name__ == "__main__":
    try:
        run_config = load_run_config(CONFIG_PATH)
        with ArtifactStore(run_config.output_dir) as artifact_store:
            train_model(run_config, artifact_store)
            logger.info("✅ Training completed successfully.")

    except Exception as exc:
        logger.error(f"❌ Training error: {exc}")

    finally:
        logger.info("🔄 Process finished.")
