##################################################################################################
#                                        SCRIPT OVERVIEW                                         #
#                                                                                                #
# This script scores one mixed-precision bit configuration with FIT and every baseline           #
# heuristic, from previously stored traces and ranges.                                           #
#                                                                                                #
# Key Features:                                                                                  #
# - Weight traces are required; activation traces are used when their report exists.            #
# - The bit configuration comes from a YAML/JSON file, or is uniform (--uniform-bits, default    #
#   the smallest width of the configured bit set).                                               #
# - noise-model "empirical" measures ‖Q(θ) − θ‖²/n on the checkpoint's actual weights instead    #
#   of the uniform-noise model.                                                                  #
#                                                                                                #
# Configuration Variables:                                                                       #
# - CONFIG_PATH: Run configuration used when the script is executed directly.                    #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

from fitkit.config import load_run_config
from fitkit.errors import ValidationError
from fitkit.quantization import BitConfig
from fitkit.experiments import score_config
from fitkit.sensitivity import fit_metric
from scripts.common import (
    CHECKPOINT_FILE, FIT_REPORT_FILE, RANGES_FILE, load_bitconfig, load_model, load_ranges, load_traces,
    resolve, trace_file,
)
from utils.artifact_store import ArtifactStore                      # Output directory
from utils.logs_config import logger                                # Logs and events

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

CONFIG_PATH = "configs/desk_cnn.yaml"
NOISE_MODELS = ("uniform", "empirical")

##################################################################################################
#                                        IMPLEMENTATION                                          #
##################################################################################################

def compute_fit(config, store, weight_traces=None, activation_traces=None, ranges=None, bitconfig=None,
                uniform_bits=None, noise_model="uniform", checkpoint=None):
    """
    Writes a FIT report for one bit configuration.

    Args:
        config (RunConfig): Validated run configuration.
        store (ArtifactStore): Open output directory.
        weight_traces, activation_traces, ranges (str | Path, optional): Stored reports; the stage
            defaults inside the store when missing. Activation traces are optional.
        bitconfig (str | Path, optional): Bit configuration file.
        uniform_bits (int, optional): Uniform width when no file is given.
        noise_model (str): "uniform" or "empirical".
        checkpoint (str | Path, optional): Weights for the empirical noise model.

    Returns:
        Path: Location of the FIT report.
    """

    if noise_model not in NOISE_MODELS:
        raise ValidationError(f"noise model must be one of {NOISE_MODELS}, got '{noise_model}'.")
    w_path = resolve(store, weight_traces, trace_file("ef-weight"))
    a_path = resolve(store, activation_traces, trace_file("ef-activation"))
    r_path = resolve(store, ranges, RANGES_FILE)
    inputs = {"weight_traces": w_path, "ranges": r_path}

    w_report = load_traces(w_path)
    r_report = load_ranges(r_path)
    a_report = None
    if activation_traces is not None or a_path.exists():
        a_report = load_traces(a_path)
        inputs["activation_traces"] = a_path
    else:
        logger.warning("⚠️ No activation traces found; FIT uses the weight terms only.")

    if bitconfig is not None:
        bits = load_bitconfig(bitconfig)
        inputs["bitconfig"] = bitconfig
    else:
        width = uniform_bits if uniform_bits is not None else min(config.quantization.bits)
        bits = BitConfig.uniform(list(r_report.weight), width)
    bits.check(config.quantization.bits)

    weights, model = None, None
    if noise_model == "empirical" or checkpoint is not None:
        c_path = resolve(store, checkpoint, CHECKPOINT_FILE)
        model = load_model(c_path)
        inputs["checkpoint"] = c_path
        if noise_model == "empirical":
            weights = {b.name: b.weights.data for b in model.blocks}

    include_twelfth = config.trace.include_twelfth
    report = fit_metric(w_report, a_report, bits, r_report, include_twelfth, weights=weights)
    heuristics = score_config(bits, w_report, a_report, r_report, model, include_twelfth, weights)
    logger.info(f"📊 FIT Ω = {report.omega:.6g} for bits {bits.key()}")

    document = report.to_document()
    document["heuristics"] = heuristics
    return store.save_document(FIT_REPORT_FILE, "fit_report", document, inputs=inputs)

##################################################################################################
#                                               MAIN                                             #
##################################################################################################

if __name__ == "__main__":
    try:
        run_config = load_run_config(CONFIG_PATH)
        with ArtifactStore(run_config.output_dir) as artifact_store:
            compute_fit(run_config, artifact_store)
            logger.info("✅ FIT scoring completed successfully.")

    except Exception as exc:
        logger.error(f"❌ FIT scoring error: {exc}")

    finally:
        logger.info("🔄 Process finished.")
