##################################################################################################
#                                        SCRIPT OVERVIEW                                         #
#                                                                                                #
# Shared plumbing of the pipeline stages: the artifact file names every stage agrees on, and     #
# loaders that turn stored reports back into library objects. A stage that is not given an       #
# explicit input path reads the artifact a previous stage wrote to the same output directory.    #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

from pathlib import Path

import yaml                             # Hand-written bit configurations

from fitkit.errors import ValidationError
from fitkit.models import load_checkpoint
from fitkit.quantization import BitConfig, RangeReport
from fitkit.sensitivity import TraceReport
from utils.artifact_store import ArtifactStore

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

CHECKPOINT_FILE = "checkpoint.json"
TRAIN_HISTORY_FILE = "train_history.csv"
TRAIN_REPORT_FILE = "train_report.json"
RANGES_FILE = "ranges.json"
FIT_REPORT_FILE = "fit_report.json"
SWEEP_FILE = "sweep.json"
SWEEP_TABLE = "sweep.csv"
CORRELATION_FILE = "correlation.json"
CORRELATION_TABLE = "correlation.csv"
BENCH_FILE = "bench.json"
BATCH_SIZE_TABLE = "variance_vs_batch_size.csv"

# Command-line trace modes and the report kind each one produces
TRACE_MODES = {"ef-weight": "ef_weight", "ef-activation": "ef_activation", "hutchinson": "hutchinson"}

##################################################################################################
#                                        IMPLEMENTATION                                          #
##################################################################################################

def trace_file(mode):
    return f"traces_{TRACE_MODES[mode]}.json"


def trace_table(mode):
    return f"traces_{TRACE_MODES[mode]}.csv"


def resolve(store, path, default_name):
    """Explicit path when given, otherwise the stage default inside the store."""

    return Path(path) if path else store.path(default_name)


def load_model(path):
    if not Path(path).exists():
        raise ValidationError(f"Checkpoint {path} does not exist; run the train stage first.")
    return load_checkpoint(path)


def load_ranges(path):
    return RangeReport.from_document(ArtifactStore.load_document(path, "range_report"))


def load_traces(path):
    return TraceReport.from_document(ArtifactStore.load_document(path, "trace_report"))


def load_bitconfig(path):
    """
    BitConfig from a YAML/JSON document `{layers: [{layer, w_bits, a_bits}, ...]}`, or the one
    embedded in a stored FIT report.
    """

    try:
        with open(path, "r", encoding="utf-8") as f:
            document = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise ValidationError(f"Cannot read bit configuration {path}: {e}") from None
    if isinstance(document, dict) and document.get("schema") == "fit_report":
        document = ArtifactStore.load_document(path, "fit_report")["bitconfig"]
    if not isinstance(document, dict) or not isinstance(document.get("layers"), list):
        raise ValidationError(f"{path} does not describe a bit configuration.")
    try:
        return BitConfig.from_document(document)
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"Malformed bit configuration in {path}: {e}") from None
