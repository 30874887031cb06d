##################################################################################################
#                                        OVERVIEW                                                #
#                                                                                                #
# Process-level defaults for FITKit, loaded securely from environment variables using dotenv.    #
# Run-specific parameters (dataset, model, training, bits) live in the YAML run configuration;   #
# this module only holds what changes between machines: where outputs go, how many workers may  #
# run, how chatty the logs are and whether progress bars are drawn.                              #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

import os

from dotenv import load_dotenv          # Environment variables from .env

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

load_dotenv()  # Load environment variables from .env

# Output and reproducibility
OUTPUT_DIR = os.getenv("FITKIT_OUTPUT_DIR", "runs")
DEFAULT_SEED = int(os.getenv("FITKIT_SEED", "0"))

# Parallelism (sweep workers); defaults to the machine's CPU count
MAX_WORKERS = int(os.getenv("FITKIT_JOBS", str(os.cpu_count() or 1)))

# Logs and progress
LOG_LEVEL = os.getenv("FITKIT_LOG_LEVEL", "INFO").upper()
SHOW_PROGRESS = os.getenv("FITKIT_PROGRESS", "1") not in ("0", "false", "False", "")
