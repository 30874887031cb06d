##################################################################################################
#                                        SCRIPT OVERVIEW                                         #
#                                                                                                #
# This script rank-correlates every heuristic of a stored sweep with the final quantized         #
# accuracies. Each heuristic gets one row with its Spearman ρ against test accuracy and against  #
# train accuracy (ρ of the negated score, so higher is better). Failed sweep rows are excluded   #
# and counted; a correlation that is undefined (constant ranks) is reported empty and flagged.   #
#                                                                                                #
# Configuration Variables:                                                                       #
# - CONFIG_PATH: Run configuration used when the script is executed directly.                    #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

import math

from fitkit.config import load_run_config
from fitkit.errors import ValidationError
from fitkit.experiments import SweepResult, correlate
from fitkit.quantization import BitConfig
from scripts.common import CORRELATION_FILE, CORRELATION_TABLE, SWEEP_FILE, resolve
from utils.artifact_store import ArtifactStore                      # Output directory
from utils.logs_config import logger                                # Logs and events

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

CONFIG_PATH = "configs/desk_cnn.yaml"

##################################################################################################
#                                        IMPLEMENTATION                                          #
##################################################################################################

def _accuracy(value):
    return float("nan") if value is None else float(value)


def sweep_rows_from_document(document):
    """SweepResult rows of a stored sweep document."""

    try:
        return [
            SweepResult(
                row["config_id"], BitConfig.from_document(row["bitconfig"]), dict(row["scores"]),
                _accuracy(row["train_accuracy"]), _accuracy(row["test_accuracy"]), row["seed"],
                failed=bool(row["failed"]), error=row.get("error", ""),
            )
            for row in document["rows"]
        ]
    except (KeyError, TypeError) as e:
        raise ValidationError(f"Malformed sweep document: {e}") from None


def _nan_to_none(row):
    return {k: None if isinstance(v, float) and math.isnan(v) else v for k, v in row.items()}


def correlate_sweep(config, store, sweep_path=None):
    """
    Writes correlation.json and correlation.csv for a stored sweep.

    Raises:
        ValidationError: If fewer than 3 sweep rows succeeded.
    """

    sweep_path = resolve(store, sweep_path, SWEEP_FILE)
    rows = sweep_rows_from_document(ArtifactStore.load_document(sweep_path, "sweep"))
    logger.info(f"🚀 Correlating {len(rows)} sweep rows.")
    reports = correlate(rows)

    table = [report.to_row() for report in reports]
    store.write_csv(CORRELATION_TABLE, table)
    return store.save_document(CORRELATION_FILE, "correlation", {
        "rows": [_nan_to_none(row) for row in table],
    }, inputs={"sweep": sweep_path})

##################################################################################################
#                                               MAIN                                             #
##################################################################################################

if __name__ == "__main__":
    try:
        run_config = load_run_config(CONFIG_PATH)
        with ArtifactStore(run_config.output_dir) as artifact_store:
            correlate_sweep(run_config, artifact_store)
            logger.info("✅ Correlation completed successfully.")

    except Exception as exc:
        logger.error(f"❌ Correlation error: {exc}")

    finally:
        logger.info("🔄 Process finished.")
